"""
Synthetic spatiotemporal slice traffic with planted inter-device correlation.

Node deviations from a diurnal profile diffuse over a latent geometric graph, so neighbouring
devices' series are cross-correlated and a graph-aware forecaster has structure to find.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from config import get_logger
from radio_env import RadioConfig, SliceTraffic, demand_to_rbs, place_devices

logger = get_logger(__name__)

TRACE_COLUMNS = ["t", "node_id", "demand"]


class DemandUnavailableError(IndexError):
    pass


@dataclass(frozen=True)
class LatentTopology:
    positions: np.ndarray = field(repr=False)
    adjacency: np.ndarray = field(repr=False)
    rho: float

    def __post_init__(self):
        if not 0 <= self.rho < 1:
            raise ValueError(f"diffusion strength must lie in [0, 1), got {self.rho}")
        if np.any(self.adjacency < 0) or np.any(self.adjacency.sum(axis=1) > 1 + 1e-12):
            raise ValueError("adjacency must be non-negative with row sums <= 1")

    @property
    def size(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class DemandTensor:
    """Z x T x V demand in Mb/s."""

    values: np.ndarray = field(repr=False)
    node_ids: tuple[str, ...]
    slice_id: str

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError(f"demand tensor must be Z x T x V, got shape {self.values.shape}")
        if self.values.shape[2] != len(self.node_ids):
            raise ValueError(f"{self.values.shape[2]} nodes in values but {len(self.node_ids)} node ids")
        if np.any(self.values < 0):
            raise ValueError("demand must be non-negative")

    @property
    def steps(self) -> int:
        return self.values.shape[1]

    def at(self, t: int, channel: int = 0) -> np.ndarray:
        if not 0 <= t < self.steps:
            raise DemandUnavailableError(f"slice {self.slice_id}: no demand at t={t} (trace has {self.steps} steps)")
        return self.values[channel, t]

    def window(self, end: int, length: int, channel: int = 0) -> np.ndarray:
        """V x length history ending at `end` inclusive."""
        start = end - length + 1
        if start < 0 or end >= self.steps:
            raise DemandUnavailableError(f"slice {self.slice_id}: window [{start}, {end}] outside trace")
        return self.values[channel, start:end + 1].T

    def totals(self, channel: int = 0) -> np.ndarray:
        return self.values[channel].sum(axis=1)


def gen_topology(V: int, seed: int, cell_radius_m: float = 500.0, scale_m: float = 100.0,
                 connect_radius_m: float = 200.0, rho: float = 0.6,
                 positions: np.ndarray | None = None) -> LatentTopology:
    """Random geometric graph with exp(-distance/scale) weights; rows scaled to sum at most 1."""
    if V < 2:
        raise ValueError(f"topology needs at least 2 nodes, got {V}")
    rng = np.random.default_rng(seed)
    if positions is None:
        positions = place_devices(V, cell_radius_m, rng)
    positions = np.asarray(positions, dtype=np.float64)
    distance = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=2)
    with np.errstate(under="ignore"):
        weights = np.exp(-distance / scale_m)
    weights[distance > connect_radius_m] = 0.0
    np.fill_diagonal(weights, 0.0)
    row_sums = weights.sum(axis=1, keepdims=True)
    adjacency = weights / np.maximum(row_sums, 1.0)
    return LatentTopology(positions=positions, adjacency=adjacency, rho=rho)


def gen_traces(topology: LatentTopology, T: int, base_load: float, seed: int,
               amplitude: float = 0.5, noise_std: float = 0.05, period: int = 288,
               slice_id: str = "slice", t0: int = 0) -> DemandTensor:
    """
    x(t) = max(0, s(t) + y(t)) with s the diurnal profile base*(1 + amplitude*sin(2πt/period))
    and y(t+1) = ρ·A·y(t) + (1-ρ)·ε(t+1), ε ~ N(0, noise_std²) per node.
    """
    if T < 1:
        raise ValueError(f"trace needs at least one step, got T={T}")
    rng = np.random.default_rng(seed)
    V = topology.size
    rho = topology.rho
    steps = np.arange(t0, t0 + T)
    profile = base_load * (1.0 + amplitude * np.sin(2 * np.pi * steps / period))
    noise = rng.normal(0.0, noise_std, size=(T, V)) if noise_std > 0 else np.zeros((T, V))
    deviation = np.zeros(V)
    values = np.empty((T, V))
    for t in range(T):
        if t > 0:
            deviation = rho * topology.adjacency @ deviation + (1.0 - rho) * noise[t]
        values[t] = np.maximum(profile[t] + deviation, 0.0)
    node_ids = tuple(f"{slice_id}-n{v}" for v in range(V))
    return DemandTensor(values=values[None, :, :], node_ids=node_ids, slice_id=slice_id)


def slice_traces(traffic: SliceTraffic, device_count: int, T: int, seed: int, slice_id: str,
                 radio: RadioConfig) -> tuple[LatentTopology, DemandTensor]:
    seeds = np.random.SeedSequence(seed).spawn(2)
    topology = gen_topology(device_count, int(seeds[0].generate_state(1)[0]), radio.cell_radius_m,
                            traffic.scale_m, traffic.connect_radius_m, traffic.rho)
    tensor = gen_traces(topology, T, traffic.base_load_mbps, int(seeds[1].generate_state(1)[0]),
                        traffic.amplitude, traffic.noise_std, traffic.period, slice_id)
    return topology, tensor


def slice_demand_aggregate(tensor: DemandTensor, t: int, radio: RadioConfig) -> int:
    """φ_m: the slice's total demand at t in RBs (ceiling, at least 1)."""
    return demand_to_rbs(float(np.sum(tensor.at(t))), radio)


def export_traces(tensor: DemandTensor, path: str | Path, channel: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    series = tensor.values[channel]
    frame = pd.DataFrame({
        "t": np.repeat(np.arange(series.shape[0]), series.shape[1]),
        "node_id": np.tile(np.asarray(tensor.node_ids), series.shape[0]),
        "demand": series.ravel(),
    })
    frame.to_csv(path, index=False)
    return path


def import_traces(path: str | Path, slice_id: str) -> DemandTensor:
    frame = pd.read_csv(path)
    for col in TRACE_COLUMNS:
        if col not in frame.columns:
            raise ValueError(f"Trace CSV missing required column: {col}")
    wide = frame.pivot(index="t", columns="node_id", values="demand").sort_index()
    wide = wide[pd.unique(frame["node_id"])]
    if wide.isna().any().any():
        raise ValueError(f"Trace CSV {path} has missing (t, node_id) entries")
    node_ids = tuple(str(c) for c in wide.columns)
    logger.info("Imported %d steps x %d nodes for slice %s from %s", len(wide), len(node_ids), slice_id, path)
    return DemandTensor(values=wide.to_numpy(dtype=np.float64)[None, :, :], node_ids=node_ids, slice_id=slice_id)


def trace_node_count(path: str | Path) -> int:
    """Distinct node ids in a trace CSV, without pivoting the demand."""
    frame = pd.read_csv(path, usecols=["node_id"])
    return int(frame["node_id"].nunique())
