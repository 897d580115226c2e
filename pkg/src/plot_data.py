"""
Tidy per-panel CSVs for the forecast, convergence and scaling figures.

Every panel except the raw forecast trace has columns (x, series_id, y, seed), sorted, so
any plotting tool can draw it directly. Missing inputs produce warnings and a partial emit.
"""

from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd

from baselines import AllocatorId
from config import get_logger
from digital_twin import rmse_of

logger = get_logger(__name__)

PANEL_COLUMNS = ["x", "series_id", "y", "seed"]
FORECAST_PANEL_COLUMNS = ["t", "model_id", "actual", "predicted"]
EXPECTED_FORECASTERS = ("dt-gat", "persistence")
LEARNING_ALLOCATORS = (AllocatorId.DT_MAFL.value, AllocatorId.FL_ONLY.value, AllocatorId.MADQN.value)


@dataclass
class PlotBundle:
    files: list[Path] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def _tidy(frame: pd.DataFrame) -> pd.DataFrame:
    frame = frame[PANEL_COLUMNS].sort_values(["x", "series_id", "seed"], kind="mergesort")
    return frame.reset_index(drop=True)


def forecast_trace(forecasts: pd.DataFrame) -> pd.DataFrame:
    """Actual vs predicted for the first evaluated slice and seed."""
    if forecasts.empty:
        return pd.DataFrame(columns=FORECAST_PANEL_COLUMNS)
    slice_id = sorted(forecasts["slice_id"].unique())[0]
    seed = sorted(forecasts["seed"].unique())[0]
    picked = forecasts[(forecasts["slice_id"] == slice_id) & (forecasts["seed"] == seed)]
    return picked[FORECAST_PANEL_COLUMNS].sort_values(["t", "model_id"], kind="mergesort").reset_index(drop=True)


def forecast_rmse(forecasts: pd.DataFrame) -> pd.DataFrame:
    """RMSE per (slice, forecaster, seed); x is the slice id."""
    if forecasts.empty:
        return pd.DataFrame(columns=PANEL_COLUMNS)
    groups = forecasts.groupby(["slice_id", "model_id", "seed"])[["actual", "predicted"]]
    table = groups.apply(lambda g: rmse_of(g["actual"], g["predicted"])).reset_index(name="y")
    return _tidy(table.rename(columns={"slice_id": "x", "model_id": "series_id"}))


def per_step(metrics: pd.DataFrame, column: str, allocators=None) -> pd.DataFrame:
    """Slice-averaged `column` per TTI for each allocator and seed."""
    frame = metrics if allocators is None else metrics[metrics["allocator_id"].isin(allocators)]
    frame = frame.dropna(subset=[column])
    if frame.empty:
        return pd.DataFrame(columns=PANEL_COLUMNS)
    table = frame.groupby(["t", "allocator_id", "seed"])[column].mean().reset_index()
    return _tidy(table.rename(columns={"t": "x", "allocator_id": "series_id", column: "y"}))


def per_device_count(metrics: pd.DataFrame, column: str) -> pd.DataFrame:
    """Run-mean `column` per device count for each allocator and seed."""
    if metrics.empty:
        return pd.DataFrame(columns=PANEL_COLUMNS)
    table = metrics.groupby(["device_count", "allocator_id", "seed"])[column].mean().reset_index()
    return _tidy(table.rename(columns={"device_count": "x", "allocator_id": "series_id", column: "y"}))


def emit_plot_data(metrics: pd.DataFrame, forecasts: pd.DataFrame, out_dir: str | Path,
                   evaluation: pd.DataFrame | None = None) -> PlotBundle:
    """Scaling panels come from the greedy episodes when there are any, else from the training frame."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = PlotBundle()

    present_models = set(forecasts["model_id"]) if not forecasts.empty else set()
    for model_id in EXPECTED_FORECASTERS:
        if model_id not in present_models:
            bundle.warnings.append(f"forecasts: missing series '{model_id}'")
    if not any(str(m).startswith("arima") for m in present_models):
        bundle.warnings.append("forecasts: missing series 'arima'")
    present_allocators = set(metrics["allocator_id"]) if not metrics.empty else set()
    for allocator in AllocatorId:
        if allocator.value not in present_allocators:
            bundle.warnings.append(f"metrics: missing series '{allocator.value}'")
    scaling = evaluation if evaluation is not None and not evaluation.empty else metrics
    if not scaling.empty and scaling["device_count"].nunique() < 2:
        bundle.warnings.append("metrics: a single device count, scaling panels have one x value")

    panels = {
        "forecast_trace.csv": forecast_trace(forecasts),
        "forecast_rmse.csv": forecast_rmse(forecasts),
        "reward_by_step.csv": per_step(metrics, "reward"),
        "critic_loss_by_step.csv": per_step(metrics, "critic_loss", LEARNING_ALLOCATORS),
        "utilization_by_devices.csv": per_device_count(scaling, "omega"),
        "qos_by_devices.csv": per_device_count(scaling, "u_mean"),
    }
    for name, frame in panels.items():
        if frame.empty:
            bundle.warnings.append(f"{name}: no data, header only")
        path = out / name
        frame.to_csv(path, index=False)
        bundle.files.append(path)
    for warning in bundle.warnings:
        logger.warning(warning)
    (out / "warnings.txt").write_text("".join(f"{w}\n" for w in bundle.warnings))
    return bundle
