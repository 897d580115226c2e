"""Scenario files and the per-step metrics table."""

import json
from pathlib import Path
from typing import Any, Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError, model_validator

from baselines import AllocatorId, DQNConfig
from digital_twin import TwinConfig
from federation import FederationConfig
from marl import AgentConfig
from radio_env import RadioConfig, SliceKind, SliceSpec, SliceTraffic
from traffic_gen import trace_node_count

METRICS_COLUMNS = [
    "t", "slice_id", "allocator_id", "seed", "device_count", "reward", "critic_loss",
    "omega", "u_mean", "rmse_so_far", "comm_scalars",
]
FORECAST_COLUMNS = ["t", "slice_id", "actual", "predicted", "model_id", "seed"]


class ArimaOrder(BaseModel):
    p: int = Field(1, ge=0)
    d: int = Field(1, ge=0)
    q: int = Field(1, ge=0)


class ForecastEvalConfig(BaseModel):
    """Stand-alone forecaster comparison on a long trace with a held-out tail."""

    enabled: bool = True
    steps: int = Field(2000, ge=50)
    holdout_fraction: float = Field(0.2, gt=0, lt=1)
    arima: ArimaOrder = Field(default_factory=ArimaOrder)
    slice_ids: list[str] | None = None  # None: the first slice only
    traffic: SliceTraffic | None = None  # None: each slice's own traffic profile


def default_slices() -> list[SliceSpec]:
    slices = []
    for m in range(6):
        if m % 2 == 0:
            slices.append(SliceSpec(id=f"embb-{m // 2}", kind=SliceKind.RATE, r_min=0.5e6, phi=1e-5))
        else:
            slices.append(SliceSpec(id=f"urllc-{m // 2}", kind=SliceKind.DELAY, tau_max=0.05, phi=100.0))
    return slices


class Scenario(BaseModel):
    name: str = "reference"
    radio: RadioConfig = Field(default_factory=RadioConfig)
    slices: list[SliceSpec] = Field(default_factory=default_slices, min_length=1)
    twin: TwinConfig = Field(default_factory=TwinConfig)
    agent: AgentConfig = Field(default_factory=AgentConfig)
    dqn: DQNConfig = Field(default_factory=DQNConfig)
    federation: FederationConfig = Field(default_factory=FederationConfig)
    forecast_eval: ForecastEvalConfig = Field(default_factory=ForecastEvalConfig)
    allocators: list[AllocatorId] = Field(default_factory=lambda: list(AllocatorId), min_length=1)
    steps: int = Field(1000, ge=0)
    eval_steps: int = Field(0, ge=0)  # greedy episode after training, from the equal split
    initial_allocation: Literal["equal-split", "minimal"] = "equal-split"
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4], min_length=1)
    device_count_sweep: list[int] = Field(default_factory=list)  # empty: each slice's own device_count
    traces: dict[str, str] = Field(default_factory=dict)  # slice id -> trace CSV replacing the generator
    checkpoints: bool = True

    @model_validator(mode="after")
    def check_references(self):
        ids = [s.id for s in self.slices]
        if len(set(ids)) != len(ids):
            raise ValueError(f"slice ids must be unique, got {ids}")
        unknown = sorted(set(self.traces) - set(ids))
        if unknown:
            raise ValueError(f"traces reference unknown slices {unknown}")
        if self.forecast_eval.slice_ids:
            missing = sorted(set(self.forecast_eval.slice_ids) - set(ids))
            if missing:
                raise ValueError(f"forecast_eval references unknown slices {missing}")
        if self.radio.total_rbs < len(self.slices):
            raise ValueError(f"{self.radio.total_rbs} RBs cannot give {len(self.slices)} slices one RB each")
        if any(n < 2 for n in self.device_count_sweep):
            raise ValueError("device counts in the sweep must be >= 2")
        if any(s.device_count < 2 for s in self.slices):
            raise ValueError("every slice needs at least 2 devices to form a traffic graph")
        if self.federation.federate_twins and len(self.slices) > 1:
            self.check_twin_layouts()
        return self

    def check_twin_layouts(self) -> None:
        """Federated twins average one parameter vector, so every slice must have the same node count."""
        imported = {}
        for slice_id, path in self.traces.items():
            try:
                imported[slice_id] = trace_node_count(path)
            except (OSError, ValueError) as exc:
                raise ValueError(f"cannot count the nodes of trace {path} for twin federation: {exc}") from exc
        generated = [s for s in self.slices if s.id not in imported]
        points = self.device_count_sweep or [None]
        for n in points:
            counts = dict(imported)
            counts.update({s.id: n or s.device_count for s in generated})
            if len(set(counts.values())) > 1:
                where = f" at device count {n}" if n else ""
                raise ValueError(f"federate_twins needs equal node counts across slices{where}, got {counts}")

    @property
    def device_counts(self) -> list[int | None]:
        return list(self.device_count_sweep) or [None]

    def warmup_steps(self) -> int:
        """Trace steps consumed by twin pre-training before the allocation episode starts."""
        return max(self.twin.pretrain_steps, self.twin.window + 1)


class ScenarioError(ValueError):
    """Schema violations, each as (JSON path, message)."""

    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{path}: {message}" for path, message in errors))


def json_path(location: tuple[Any, ...]) -> str:
    path = "$"
    for part in location:
        path += f"[{part}]" if isinstance(part, int) else f".{part}"
    return path


def parse_scenario(data: dict) -> Scenario:
    try:
        return Scenario.model_validate(data)
    except ValidationError as exc:
        raise ScenarioError([(json_path(tuple(e["loc"])), e["msg"]) for e in exc.errors()]) from exc


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError([("$", f"invalid JSON at line {exc.lineno}: {exc.msg}")]) from exc
    if not isinstance(data, dict):
        raise ScenarioError([("$", "scenario must be a JSON object")])
    return parse_scenario(data)


def scenario_schema() -> dict:
    return Scenario.model_json_schema()


class MetricsFrame:
    """Append-only per-step rows with a fixed column set."""

    def __init__(self, rows: list[dict] | None = None):
        self._rows: list[dict] = []
        for row in rows or []:
            self.append(row)

    def __len__(self) -> int:
        return len(self._rows)

    def append(self, row: dict) -> None:
        if set(row) != set(METRICS_COLUMNS):
            raise ValueError(f"metrics row columns {sorted(row)} differ from {sorted(METRICS_COLUMNS)}")
        self._rows.append(dict(row))

    def extend(self, other: "MetricsFrame") -> None:
        self._rows.extend(dict(r) for r in other._rows)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self._rows, columns=METRICS_COLUMNS)
        return frame.astype({"t": np.int64, "seed": np.int64, "device_count": np.int64,
                             "reward": np.float64, "critic_loss": np.float64, "omega": np.float64,
                             "u_mean": np.float64, "rmse_so_far": np.float64, "comm_scalars": np.int64})

    @classmethod
    def read_csv(cls, path: str | Path) -> pd.DataFrame:
        frame = pd.read_csv(path, dtype={"slice_id": str, "allocator_id": str})
        missing = [c for c in METRICS_COLUMNS if c not in frame.columns]
        if missing:
            raise ValueError(f"Metrics CSV {path} missing required columns: {missing}")
        return frame[METRICS_COLUMNS]
