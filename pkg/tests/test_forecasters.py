import logging

import numpy as np
import pytest

from digital_twin import rmse
from forecasters import (ArimaForecaster, ar_check, css_residuals, fit_arima, forecast_arima,
                         forecast_persistence, ma_check, rolling_forecasts)


def ar1_series(phi=0.8, n=2000, seed=0):
    noise = np.random.default_rng(seed).normal(size=n)
    x = np.zeros(n)
    for t in range(1, n):
        x[t] = phi * x[t - 1] + noise[t]
    return x


def test_persistence_examples():
    assert forecast_persistence([1.0, 3.0, 5.0]) == 5.0
    with pytest.raises(ValueError):
        forecast_persistence([])


def test_persistence_on_constant_and_ramp():
    constant = rolling_forecasts(np.full(20, 4.0), 1, forecast_persistence, "persistence")
    assert rmse(constant) == 0.0
    ramp = rolling_forecasts(2.5 * np.arange(20), 1, forecast_persistence, "persistence")
    np.testing.assert_allclose([r.actual - r.predicted for r in ramp], 2.5)


def test_random_walk_model_is_persistence():
    history = np.cumsum(np.random.default_rng(1).normal(size=50)) + 10
    assert forecast_arima(history, 0, 1, 0).value == pytest.approx(history[-1])


def test_ar1_coefficient_is_recovered():
    fit = fit_arima(ar1_series(), 1, 0, 0)
    assert not fit.fallback
    assert fit.ar[0] == pytest.approx(0.8, abs=0.1)


@pytest.mark.parametrize("order", [(1, 0, 0), (1, 1, 1), (0, 1, 0)])
def test_constant_series_forecasts_the_constant(order):
    assert forecast_arima(np.full(40, 7.0), *order).value == pytest.approx(7.0)


def test_explosive_series_falls_back_to_persistence(caplog):
    history = 1.1 ** np.arange(60)
    with caplog.at_level(logging.WARNING, logger="forecasters"):
        result = forecast_arima(history, 1, 0, 0)
    assert result.fallback
    assert result.value == history[-1]
    assert "persistence" in caplog.text


def test_short_history_rejected():
    with pytest.raises(ValueError, match="needs more than"):
        fit_arima(np.ones(12), 1, 1, 1)


def test_stationarity_and_invertibility_checks():
    assert ar_check(np.array([0.5]))
    assert not ar_check(np.array([1.2]))
    assert ar_check(np.array([0.0]))
    assert ma_check(np.array([0.3]))
    assert not ma_check(np.array([-1.5]))


def test_css_residuals_of_pure_ar():
    z = np.array([1.0, 2.0, 3.0, 5.0])
    np.testing.assert_allclose(css_residuals(z, np.array([0.5]), np.zeros(0)), [1.5, 2.0, 3.5])


def test_css_residuals_with_ma_recursion():
    z = np.array([1.0, 1.0, 1.0])
    # e0 = 1, e1 = 1 - 0.5 e0, e2 = 1 - 0.5 e1
    np.testing.assert_allclose(css_residuals(z, np.zeros(0), np.array([0.5])), [1.0, 0.5, 0.75])


def test_forecaster_must_be_trained_first():
    forecaster = ArimaForecaster(1, 1, 1)
    assert forecaster.model_id == "arima(1,1,1)"
    with pytest.raises(RuntimeError):
        forecaster(np.ones(30))


def test_trained_forecaster_beats_persistence_on_ar1():
    series = ar1_series(phi=0.5, n=1200, seed=3) + 5.0
    forecaster = ArimaForecaster(1, 0, 0)
    forecaster.train(series[:1000])
    arima = rolling_forecasts(series, 1000, forecaster, forecaster.model_id)
    persistence = rolling_forecasts(series, 1000, forecast_persistence, "persistence")
    assert rmse(arima) < rmse(persistence)


def test_rolling_forecasts_are_non_negative():
    records = rolling_forecasts(np.array([3.0, 1.0, 0.0, 0.0]), 1, lambda h: h[-1] - 2.0, "m")
    assert [r.predicted for r in records] == [1.0, 0.0, 0.0]
    with pytest.raises(ValueError):
        rolling_forecasts(np.ones(3), 0, forecast_persistence, "m")
