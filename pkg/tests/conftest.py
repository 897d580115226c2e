import numpy as np
import pytest

from radio_env import RadioConfig, SliceKind, SliceSpec, SliceTraffic
from schemas import parse_scenario


@pytest.fixture
def radio() -> RadioConfig:
    return RadioConfig()


@pytest.fixture
def rate_slice() -> SliceSpec:
    return SliceSpec(id="embb-0", kind=SliceKind.RATE, r_min=0.5e6, phi=1e-5, device_count=4)


@pytest.fixture
def delay_slice() -> SliceSpec:
    return SliceSpec(id="urllc-0", kind=SliceKind.DELAY, tau_max=0.05, phi=100.0, device_count=4)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def small_traffic() -> SliceTraffic:
    return SliceTraffic(base_load_mbps=1.0, amplitude=0.5, noise_std=0.05, rho=0.6, period=24)


def small_scenario_data(**overrides) -> dict:
    """Two slices of four devices, tiny networks and a short episode."""
    data = {
        "name": "tiny",
        "slices": [
            {"id": "embb-0", "kind": "rate-constrained", "r_min": 5e5, "phi": 1e-5, "device_count": 4,
             "traffic": {"base_load_mbps": 2.0, "amplitude": 0.5, "noise_std": 0.1, "period": 24}},
            {"id": "urllc-0", "kind": "delay-constrained", "tau_max": 0.05, "phi": 100.0, "device_count": 4,
             "traffic": {"base_load_mbps": 1.0, "amplitude": 0.3, "noise_std": 0.05, "period": 24}},
        ],
        "twin": {"window": 6, "feature_dim": 4, "embed_dim": 4, "attention_dim": 4, "output_dim": 4,
                 "pretrain_steps": 30, "pretrain_epochs": 1},
        "agent": {"hidden_units": 8, "hidden_layers": 2, "batch_size": 8, "learn_start": 4,
                  "buffer_capacity": 64},
        "dqn": {"hidden_units": 8, "hidden_layers": 2, "batch_size": 8, "learn_start": 4,
                "buffer_capacity": 64, "target_sync_steps": 5},
        "federation": {"aggregation_period": 5},
        "forecast_eval": {"enabled": False},
        "steps": 20,
        "seeds": [7],
    }
    data.update(overrides)
    return data


@pytest.fixture
def tiny_scenario():
    return parse_scenario(small_scenario_data())
