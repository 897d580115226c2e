"""
Baseline demand forecasters the twin is compared against: persistence and ARIMA(p, d, q).

ARIMA is fitted by conditional sum of squares on the differenced series and forecasts one
step ahead; a fit whose AR part is non-stationary or whose MA part is non-invertible falls
back to persistence and says so.
"""

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import least_squares
from scipy.signal import lfilter

from config import get_logger
from digital_twin import ForecastRecord

logger = get_logger(__name__)


def forecast_persistence(history: Sequence[float]) -> float:
    history = np.asarray(history, dtype=np.float64)
    if history.size == 0:
        raise ValueError("persistence forecast needs at least one observation")
    return float(history[-1])


def roots_outside_unit_circle(coefficients: np.ndarray, sign: float) -> bool:
    """True if 1 + sign·Σ c_i x^i has every root strictly outside the unit circle."""
    coefficients = np.asarray(coefficients, dtype=np.float64)
    nonzero = np.flatnonzero(coefficients)
    if nonzero.size == 0:
        return True
    poly = np.concatenate([[1.0], sign * coefficients[:nonzero[-1] + 1]])
    return bool(np.all(np.abs(np.roots(poly[::-1])) > 1.0))


def ar_check(ar: np.ndarray) -> bool:
    return roots_outside_unit_circle(ar, -1.0)


def ma_check(ma: np.ndarray) -> bool:
    return roots_outside_unit_circle(ma, 1.0)


def css_residuals(z: np.ndarray, ar: np.ndarray, ma: np.ndarray) -> np.ndarray:
    """e_t = z_t - Σφ_i z_{t-i} - Σθ_j e_{t-j} for t >= p, pre-sample residuals zero."""
    p = len(ar)
    u = z[p:].copy()
    for i, phi in enumerate(ar, start=1):
        u -= phi * z[p - i:len(z) - i]
    if len(ma) == 0:
        return u
    return lfilter([1.0], np.concatenate([[1.0], ma]), u)


@dataclass(frozen=True)
class ArimaFit:
    order: tuple[int, int, int]
    ar: np.ndarray = field(repr=False)
    ma: np.ndarray = field(repr=False)
    mean: float
    sigma2: float
    fallback: bool

    def forecast(self, history: Sequence[float]) -> float:
        """One-step forecast of the level series using the fitted coefficients."""
        history = np.asarray(history, dtype=np.float64)
        p, d, q = self.order
        if self.fallback:
            return forecast_persistence(history)
        levels = [history]
        for _ in range(d):
            levels.append(np.diff(levels[-1]))
        z = levels[-1] - self.mean
        e = css_residuals(z, self.ar, self.ma)
        step = float(self.ar @ z[::-1][:p]) if p else 0.0
        if q:
            recent = e[::-1][:q]
            step += float(self.ma[:len(recent)] @ recent)
        value = step + self.mean
        for level in reversed(levels[:-1]):
            value += level[-1]
        return float(value)


@dataclass(frozen=True)
class ArimaForecast:
    value: float
    fallback: bool


def _validate_order(history: np.ndarray, p: int, d: int, q: int) -> None:
    if min(p, d, q) < 0:
        raise ValueError(f"ARIMA orders must be non-negative, got ({p}, {d}, {q})")
    if len(history) <= p + d + q + 10:
        raise ValueError(f"ARIMA({p},{d},{q}) needs more than {p + d + q + 10} observations, got {len(history)}")


def fit_arima(history: Sequence[float], p: int, d: int, q: int) -> ArimaFit:
    history = np.asarray(history, dtype=np.float64)
    _validate_order(history, p, d, q)
    z = np.diff(history, n=d) if d else history
    mean = float(np.mean(z)) if d == 0 else 0.0
    z = z - mean
    order = (p, d, q)
    if p + q == 0:
        return ArimaFit(order, np.zeros(0), np.zeros(0), mean, float(np.mean(z ** 2)), fallback=False)

    def objective(x: np.ndarray) -> np.ndarray:
        return css_residuals(z, x[:p], x[p:])

    solution = least_squares(objective, np.zeros(p + q), method="lm" if len(z) - p >= p + q else "trf")
    ar, ma = solution.x[:p], solution.x[p:]
    residuals = objective(solution.x)
    sigma2 = float(np.mean(residuals ** 2))
    ok = solution.success and np.isfinite(sigma2) and ar_check(ar) and ma_check(ma)
    if not ok:
        logger.warning("ARIMA%s fit is non-stationary or non-invertible (ar=%s, ma=%s); using persistence",
                       order, np.round(ar, 4), np.round(ma, 4))
        return ArimaFit(order, ar, ma, mean, sigma2, fallback=True)
    return ArimaFit(order, ar, ma, mean, sigma2, fallback=False)


def forecast_arima(history: Sequence[float], p: int, d: int, q: int) -> ArimaForecast:
    fit = fit_arima(history, p, d, q)
    return ArimaForecast(value=fit.forecast(history), fallback=fit.fallback)


class ArimaForecaster:
    """Fit once on a training prefix, then forecast online with fixed coefficients."""

    def __init__(self, p: int = 1, d: int = 1, q: int = 1):
        self.order = (p, d, q)
        self.fit: ArimaFit | None = None

    @property
    def model_id(self) -> str:
        return "arima({},{},{})".format(*self.order)

    def train(self, history: Sequence[float]) -> ArimaFit:
        self.fit = fit_arima(history, *self.order)
        return self.fit

    def __call__(self, history: Sequence[float]) -> float:
        if self.fit is None:
            raise RuntimeError("ArimaForecaster used before train()")
        return self.fit.forecast(history)


def rolling_forecasts(series: Sequence[float], start: int, forecaster: Callable[[np.ndarray], float],
                      model_id: str) -> list[ForecastRecord]:
    """One-step forecasts of series[t] from series[:t] for every t in [start, len(series))."""
    series = np.asarray(series, dtype=np.float64)
    if not 0 < start <= len(series):
        raise ValueError(f"rolling start {start} outside (0, {len(series)}]")
    return [ForecastRecord(t=t, actual=float(series[t]), predicted=max(float(forecaster(series[:t])), 0.0),
                           model_id=model_id)
            for t in range(start, len(series))]
