"""
Single-cell downlink OFDM environment shared by the network slices.

Channel realisation (path loss, log-normal shadowing, Rayleigh fading), Shannon rate,
M/M/1 delay, sigmoid QoS utilities, utilisation, reward, and the projection of per-slice
RB requests onto the feasible allocation set.
"""

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator
from scipy.special import expit

from config import get_logger

logger = get_logger(__name__)

TTI_METRIC_COLUMNS = ["t", "slice_id", "w_m", "phi_m", "omega_raw", "omega_clipped", "u_sum", "u_mean", "reward"]


class SliceKind(str, Enum):
    RATE = "rate-constrained"
    DELAY = "delay-constrained"


class RadioConfig(BaseModel):
    carrier_mhz: float = Field(2000.0, gt=0)
    cell_radius_m: float = Field(500.0, gt=0)
    total_rbs: int = Field(50, gt=0)
    rb_bandwidth_hz: float = Field(180e3, gt=0)
    tx_power_dbm: float = 30.0
    noise_density_dbm_hz: float = -174.0
    shadowing_std_db: float = Field(8.0, gt=0)
    utilization_weight: float = Field(0.5, ge=0)  # Λ
    utility_weight: float = Field(0.5, ge=0)  # μ
    delay_cap_s: float = Field(10.0, gt=0)
    rb_cap: int | None = Field(None, gt=0)  # κ, defaults to total_rbs
    reference_spectral_efficiency: float = Field(4.0, gt=0)  # b/s/Hz, demand -> RBs
    interference_threshold_dbm: float = -101.2  # recorded only; single cell has no interferers

    @property
    def kappa(self) -> int:
        return self.rb_cap if self.rb_cap is not None else self.total_rbs

    @property
    def total_bandwidth_hz(self) -> float:
        return self.total_rbs * self.rb_bandwidth_hz

    @property
    def tx_power_w(self) -> float:
        return dbm_to_watts(self.tx_power_dbm)

    @property
    def pool_capacity_mbps(self) -> float:
        return self.total_bandwidth_hz * self.reference_spectral_efficiency / 1e6


class SliceTraffic(BaseModel):
    base_load_mbps: float = Field(0.3, ge=0)  # per node
    amplitude: float = Field(0.5, ge=0)  # diurnal swing, fraction of base load
    noise_std: float = Field(0.05, ge=0)  # Mb/s
    rho: float = Field(0.6, ge=0, lt=1)
    period: int = Field(288, gt=0)
    scale_m: float = Field(100.0, gt=0)
    connect_radius_m: float = Field(200.0, gt=0)


class SliceSpec(BaseModel):
    id: str
    kind: SliceKind
    r_min: float | None = Field(None, gt=0)  # bits/s
    tau_max: float | None = Field(None, gt=0)  # seconds
    phi: float = Field(..., gt=0)
    device_count: int = Field(20, ge=1)
    arrival_rate: float = Field(50.0, gt=0)  # λ_u, packets/s per device
    packet_size_bits: float = Field(12000.0, gt=0)
    traffic: SliceTraffic = Field(default_factory=SliceTraffic)

    @model_validator(mode="after")
    def check_requirement(self):
        if self.kind == SliceKind.RATE and (self.r_min is None or self.tau_max is not None):
            raise ValueError("rate-constrained slices set r_min and not tau_max")
        if self.kind == SliceKind.DELAY and (self.tau_max is None or self.r_min is not None):
            raise ValueError("delay-constrained slices set tau_max and not r_min")
        return self


@dataclass
class DeviceState:
    position: tuple[float, float]
    distance_m: float
    shadowing_db: float
    fading_power: float = 1.0
    bandwidth_hz: float = 0.0
    rate_bps: float = 0.0
    delay_s: float = 0.0
    arrival_rate: float = 0.0

    def __post_init__(self):
        if self.distance_m <= 0:
            raise ValueError(f"device distance must be positive, got {self.distance_m}")
        if self.fading_power < 0 or self.bandwidth_hz < 0:
            raise ValueError("fading power and bandwidth must be non-negative")


@dataclass(frozen=True)
class AllocationState:
    grants: tuple[int, ...]
    caps: tuple[int, ...]
    total_rbs: int

    def __post_init__(self):
        if len(self.grants) != len(self.caps):
            raise ValueError(f"{len(self.grants)} grants but {len(self.caps)} caps")
        for m, (w, cap) in enumerate(zip(self.grants, self.caps)):
            if not 0 < w <= cap:
                raise ValueError(f"slice {m}: grant {w} outside (0, {cap}]")
        if sum(self.grants) > self.total_rbs:
            raise ValueError(f"grants sum to {sum(self.grants)} > pool of {self.total_rbs} RBs")

    @classmethod
    def equal_split(cls, n_slices: int, total_rbs: int, cap: int | None = None) -> "AllocationState":
        cap = cap if cap is not None else total_rbs
        share = max(1, min(cap, total_rbs // n_slices))
        return cls(tuple([share] * n_slices), tuple([cap] * n_slices), total_rbs)

    @classmethod
    def minimal(cls, n_slices: int, total_rbs: int, cap: int | None = None) -> "AllocationState":
        """Cold start: one RB per slice."""
        cap = cap if cap is not None else total_rbs
        return cls(tuple([1] * n_slices), tuple([cap] * n_slices), total_rbs)

    @classmethod
    def initial(cls, kind: str, n_slices: int, total_rbs: int, cap: int | None = None) -> "AllocationState":
        if kind == "equal-split":
            return cls.equal_split(n_slices, total_rbs, cap)
        if kind == "minimal":
            return cls.minimal(n_slices, total_rbs, cap)
        raise ValueError(f"Unknown initial allocation '{kind}'")


def dbm_to_watts(dbm: float) -> float:
    return 10 ** ((dbm - 30.0) / 10.0)


def path_loss(distance_m: float, carrier_mhz: float) -> float:
    if distance_m <= 0 or carrier_mhz <= 0:
        raise ValueError(f"path loss needs positive distance and frequency, got d={distance_m}, f={carrier_mhz}")
    return 20.0 * np.log10(distance_m) + 20.0 * np.log10(carrier_mhz) - 27.55


def channel_magnitude(path_loss_db: float, shadowing_db: float, fading_power: float) -> float:
    """|h| = 10^(-PL/20) * sqrt(Θ_lin * |g|^2)."""
    shadowing_lin = 10 ** (shadowing_db / 10.0)
    return 10 ** (-path_loss_db / 20.0) * np.sqrt(shadowing_lin * fading_power)


def channel_coefficient(device: DeviceState, cfg: RadioConfig) -> float:
    return channel_magnitude(path_loss(device.distance_m, cfg.carrier_mhz), device.shadowing_db, device.fading_power)


def achievable_rate(bandwidth_hz: float, power_w: float, channel_gain: float, noise_power_w: float) -> float:
    if bandwidth_hz <= 0:
        return 0.0
    if noise_power_w <= 0:
        raise ValueError(f"noise power must be positive, got {noise_power_w}")
    return bandwidth_hz * np.log2(1.0 + power_w * channel_gain / noise_power_w)


def average_delay(rate_bps: float, arrival_rate: float, packet_size_bits: float, delay_cap_s: float = 10.0) -> float:
    """M/M/1 sojourn time with service rate r/packet-size; saturates at the cap."""
    service_rate = rate_bps / packet_size_bits
    if service_rate <= arrival_rate:
        return delay_cap_s
    return min(1.0 / (service_rate - arrival_rate), delay_cap_s)


def rate_utility(rate_bps: float, r_min: float, phi: float) -> float:
    return float(expit(phi * (rate_bps - r_min)))


def delay_utility(delay_s: float, tau_max: float, phi: float) -> float:
    return float(expit(phi * (tau_max - delay_s)))


@dataclass(frozen=True)
class SliceUtility:
    total: float
    mean: float


def device_utility(spec: SliceSpec, device: DeviceState) -> float:
    if spec.kind == SliceKind.RATE:
        return rate_utility(device.rate_bps, spec.r_min, spec.phi)
    return delay_utility(device.delay_s, spec.tau_max, spec.phi)


def slice_utility(spec: SliceSpec, devices: Sequence[DeviceState]) -> SliceUtility:
    if not devices:
        raise ValueError(f"slice {spec.id} has no devices to score")
    utilities = [device_utility(spec, d) for d in devices]
    total = float(np.sum(utilities))
    return SliceUtility(total=total, mean=total / len(utilities))


@dataclass(frozen=True)
class Utilization:
    raw: float  # w/φ as printed, can exceed 1
    clipped: float  # min(w, φ)/w, fraction of the grant in use


def utilization(grant_rbs: float, demanded_rbs: float) -> Utilization:
    if grant_rbs <= 0:
        raise ValueError(f"utilization needs a positive grant, got {grant_rbs}")
    if demanded_rbs <= 0:
        return Utilization(raw=0.0, clipped=0.0)
    return Utilization(raw=grant_rbs / demanded_rbs, clipped=min(grant_rbs, demanded_rbs) / grant_rbs)


def reward(omega: float, mean_utility: float, utilization_weight: float, utility_weight: float) -> float:
    return utilization_weight * omega + utility_weight * mean_utility


def apply_allocation(requests: Sequence[int], state: AllocationState) -> AllocationState:
    """
    Add the requested RB deltas, clamp each slice into [1, κ] and, if the pool is
    oversubscribed, scale the grants above the 1-RB floor down proportionally (rounding down).
    """
    if len(requests) != len(state.grants):
        raise ValueError(f"{len(requests)} requests for {len(state.grants)} slices")
    caps = np.asarray(state.caps, dtype=np.int64)
    grants = np.asarray(state.grants, dtype=np.int64) + np.asarray(np.round(requests), dtype=np.int64)
    grants = np.clip(grants, 1, caps)
    if grants.sum() > state.total_rbs:
        excess = grants - 1
        budget = state.total_rbs - len(grants)
        if budget < 0:
            raise ValueError(f"pool of {state.total_rbs} RBs cannot give {len(grants)} slices one RB each")
        grants = 1 + (excess * budget) // excess.sum()
    return AllocationState(tuple(int(w) for w in grants), state.caps, state.total_rbs)


def demand_to_rbs(total_mbps: float, cfg: RadioConfig) -> int:
    """RBs needed for a slice's total demand at the reference spectral efficiency (min 1)."""
    per_rb_mbps = cfg.rb_bandwidth_hz * cfg.reference_spectral_efficiency / 1e6
    return max(1, int(np.ceil(round(total_mbps / per_rb_mbps, 9))))


def place_devices(count: int, radius_m: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform positions in the disk, at least 1 m from the BS."""
    r = radius_m * np.sqrt(rng.uniform(0.0, 1.0, size=count))
    r = np.clip(r, 1.0, radius_m)
    angle = rng.uniform(0.0, 2 * np.pi, size=count)
    return np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1)


@dataclass(frozen=True)
class SliceOutcome:
    slice_id: str
    grant_rbs: int
    demanded_rbs: int
    utilization: Utilization
    utility: SliceUtility
    reward: float
    rates_bps: np.ndarray = field(repr=False)
    delays_s: np.ndarray = field(repr=False)

    def metrics_row(self, t: int) -> dict:
        return {
            "t": t,
            "slice_id": self.slice_id,
            "w_m": self.grant_rbs,
            "phi_m": self.demanded_rbs,
            "omega_raw": self.utilization.raw,
            "omega_clipped": self.utilization.clipped,
            "u_sum": self.utility.total,
            "u_mean": self.utility.mean,
            "reward": self.reward,
        }


class SlicingEnvironment:
    """
    One BS shared by the slices. Devices sit at fixed positions (one per traffic node);
    shadowing is drawn per episode, fading per TTI from a generator keyed on (seed, t).
    """

    def __init__(self, cfg: RadioConfig, slices: Sequence[SliceSpec],
                 positions: Mapping[str, np.ndarray], seed: int = 0):
        self.cfg = cfg
        self.slices = list(slices)
        self.seed = seed
        self.episode = 0
        self.positions = {s.id: np.asarray(positions[s.id], dtype=np.float64) for s in self.slices}
        for spec in self.slices:
            if len(self.positions[spec.id]) != spec.device_count:
                raise ValueError(
                    f"slice {spec.id}: {len(self.positions[spec.id])} positions for {spec.device_count} devices"
                )
        self.noise_density_w = dbm_to_watts(cfg.noise_density_dbm_hz)
        self.reset_episode()

    def reset_episode(self) -> None:
        rng = np.random.default_rng([self.seed, self.episode, 0x5AD0])
        self.devices: dict[str, list[DeviceState]] = {}
        for spec in self.slices:
            pos = self.positions[spec.id]
            distance = np.clip(np.hypot(pos[:, 0], pos[:, 1]), 1.0, self.cfg.cell_radius_m)
            shadowing = rng.normal(0.0, self.cfg.shadowing_std_db, size=len(pos))
            self.devices[spec.id] = [
                DeviceState(position=(float(p[0]), float(p[1])), distance_m=float(d), shadowing_db=float(s))
                for p, d, s in zip(pos, distance, shadowing)
            ]
        self.episode += 1

    def demanded_rbs(self, node_demand_mbps: np.ndarray) -> int:
        return demand_to_rbs(float(np.sum(node_demand_mbps)), self.cfg)

    def step(self, t: int, allocation: AllocationState,
             demands: Mapping[str, np.ndarray]) -> list[SliceOutcome]:
        """Evaluate one TTI: fresh fading, equal RB split over active devices, utilities, reward."""
        missing = [s.id for s in self.slices if s.id not in demands]
        if missing:
            raise KeyError(f"no demand for slices {missing} at t={t}")
        if len(allocation.grants) != len(self.slices):
            raise ValueError(f"allocation covers {len(allocation.grants)} slices, environment has {len(self.slices)}")
        rng = np.random.default_rng([self.seed, self.episode, t])
        outcomes = []
        for spec, grant in zip(self.slices, allocation.grants):
            demand = np.asarray(demands[spec.id], dtype=np.float64)
            devices = self.devices[spec.id]
            fading = rng.exponential(1.0, size=len(devices))
            active = [i for i, d in enumerate(demand) if d > 0]
            phi_m = self.demanded_rbs(demand) if active else 0
            rates = np.zeros(len(devices))
            delays = np.full(len(devices), self.cfg.delay_cap_s)
            scored = []
            if active:
                share_hz = grant * self.cfg.rb_bandwidth_hz / len(active)
                power_w = self.cfg.tx_power_w * share_hz / self.cfg.total_bandwidth_hz
                noise_w = self.noise_density_w * share_hz
                for i in active:
                    device = devices[i]
                    device.fading_power = float(fading[i])
                    device.bandwidth_hz = share_hz
                    gain = channel_coefficient(device, self.cfg) ** 2
                    device.rate_bps = achievable_rate(share_hz, power_w, gain, noise_w)
                    device.arrival_rate = max(spec.arrival_rate, demand[i] * 1e6 / spec.packet_size_bits)
                    device.delay_s = average_delay(device.rate_bps, device.arrival_rate,
                                                   spec.packet_size_bits, self.cfg.delay_cap_s)
                    rates[i], delays[i] = device.rate_bps, device.delay_s
                    scored.append(device)
                utility = slice_utility(spec, scored)
            else:
                utility = SliceUtility(total=0.0, mean=1.0)
            util = utilization(grant, phi_m)
            r = reward(util.clipped, utility.mean, self.cfg.utilization_weight, self.cfg.utility_weight)
            outcomes.append(SliceOutcome(spec.id, int(grant), int(phi_m), util, utility, r, rates, delays))
        return outcomes


def write_tti_metrics(rows: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(list(rows), columns=TTI_METRIC_COLUMNS).to_csv(path, index=False)
    return path
