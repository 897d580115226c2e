"""
Experiment runner.

    python src/run_experiment.py run scenarios/reference.json --out results/reference
    python src/run_experiment.py plots results/reference
    python src/run_experiment.py validate scenarios/reference.json --schema-out scenario.schema.json

Exit codes: 0 success, 2 scenario schema error, 3 runtime failure.
"""

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from baselines import AllocatorId
from config import REPO_ROOT, configure_logging, get_logger, load_config
from federation import write_round_log
from marl import TRAINING_LOG_COLUMNS
from nn_core import save_params
from plot_data import emit_plot_data
from radio_env import write_tti_metrics
from schemas import (FORECAST_COLUMNS, METRICS_COLUMNS, MetricsFrame, Scenario, ScenarioError, load_scenario,
                     scenario_schema)
from simulation import checkpoint_dir, run_seed

logger = get_logger(__name__)

EXIT_OK, EXIT_SCHEMA, EXIT_RUNTIME = 0, 2, 3
FINAL_WINDOW_FRACTION = 0.1
SUMMARY_METRICS = {"reward": "reward", "omega": "omega", "u_mean": "u_mean", "rmse": "rmse_so_far"}


@dataclass
class ExperimentResult:
    metrics: pd.DataFrame
    forecasts: pd.DataFrame
    evaluation: pd.DataFrame = field(default_factory=lambda: MetricsFrame().to_frame())
    files: list[Path] = field(default_factory=list)


def _run_name(allocator: AllocatorId, seed: int, device_count: int | None) -> str:
    return f"{allocator.value}_seed{seed}" + ("" if device_count is None else f"_dev{device_count}")


def run_experiment(scenario: Scenario, out_dir: str | Path | None = None, seeds: list[int] | None = None,
                   allocators: list[AllocatorId] | None = None, progress: bool = False) -> ExperimentResult:
    """Every (device count, seed) of the scenario through every allocator; files under `out_dir` if given."""
    seeds = list(seeds) if seeds is not None else list(scenario.seeds)
    allocators = allocators or list(scenario.allocators)
    out = Path(out_dir) if out_dir is not None else None
    frame, evaluation = MetricsFrame(), MetricsFrame()
    forecast_rows: list[dict] = []
    files: list[Path] = []
    for device_count in scenario.device_counts:
        for seed in seeds:
            result = run_seed(scenario, seed, device_count, allocators, progress)
            frame.extend(result.metrics)
            evaluation.extend(result.evaluation)
            forecast_rows += result.forecasts
            if out is None:
                continue
            for run in result.runs:
                name = _run_name(run.allocator, seed, device_count)
                files.append(write_tti_metrics(run.tti_rows, out / "logs" / f"{name}_tti.csv"))
                if run.training_rows:
                    path = out / "logs" / f"{name}_training.csv"
                    path.parent.mkdir(parents=True, exist_ok=True)
                    pd.DataFrame(run.training_rows, columns=TRAINING_LOG_COLUMNS).to_csv(path, index=False)
                    files.append(path)
                if run.round_rows:
                    files.append(write_round_log(run.round_rows, out / "logs" / f"{name}_rounds.csv"))
                if scenario.checkpoints:
                    target = checkpoint_dir(out / "checkpoints", run.allocator, seed, device_count)
                    files += [save_params(params, target / name_) for name_, params in run.checkpoints.items()]
    metrics, greedy = frame.to_frame(), evaluation.to_frame()
    forecasts = pd.DataFrame(forecast_rows, columns=FORECAST_COLUMNS)
    if out is not None:
        files += list(export_metrics(metrics, out / "metrics.csv"))
        if not greedy.empty:
            files += list(export_metrics(greedy, out / "evaluation.csv", fraction=1.0))
        forecasts_path = out / "forecasts.csv"
        forecasts.to_csv(forecasts_path, index=False)
        scenario_path = out / "scenario.json"
        scenario_path.write_text(scenario.model_dump_json(indent=2))
        files += [forecasts_path, scenario_path]
    return ExperimentResult(metrics=metrics, forecasts=forecasts, evaluation=greedy, files=files)


def _stats(values: pd.Series) -> dict:
    values = values.dropna()
    if values.empty:
        return {"mean": None, "std": None, "seeds": 0}
    return {"mean": float(values.mean()), "std": float(values.std(ddof=0)), "seeds": int(len(values))}


def final_window(frame: pd.DataFrame, fraction: float = FINAL_WINDOW_FRACTION) -> pd.DataFrame:
    """Rows in the last `fraction` of each run's TTIs (at least one TTI)."""
    if frame.empty:
        return frame
    keys = ["allocator_id", "seed", "device_count"]
    bounds = frame.groupby(keys)["t"].agg(["min", "max"])
    span = (bounds["max"] - bounds["min"] + 1)
    start = bounds["max"] - np.maximum(np.floor(span * fraction), 1) + 1
    merged = frame.merge(start.rename("start").reset_index(), on=keys)
    return merged[merged["t"] >= merged["start"]].drop(columns="start")


def summarize(frame: pd.DataFrame, fraction: float = FINAL_WINDOW_FRACTION) -> dict:
    """Per allocator and device count: mean ± std over seeds of each seed's final-window mean."""
    summary: dict = {"rows": int(len(frame)), "final_window_fraction": fraction, "allocators": {}}
    window = final_window(frame, fraction)
    keys = ["allocator_id", "device_count", "seed"]
    per_seed = window.groupby(keys)[list(SUMMARY_METRICS.values())].mean() if not window.empty else None
    comm = frame.groupby(keys)["comm_scalars"].max() if not frame.empty else None
    overall = {name: _stats(per_seed[column] if per_seed is not None else pd.Series(dtype=float))
               for name, column in SUMMARY_METRICS.items()}
    overall["comm_scalars"] = _stats(comm if comm is not None else pd.Series(dtype=float))
    summary["overall"] = overall
    if per_seed is None:
        return summary
    for (allocator, device_count), group in per_seed.groupby(level=[0, 1]):
        entry = {name: _stats(group[column]) for name, column in SUMMARY_METRICS.items()}
        entry["comm_scalars"] = _stats(comm.loc[(allocator, device_count)])
        summary["allocators"].setdefault(str(allocator), {})[str(int(device_count))] = entry
    return summary


def export_metrics(frame: pd.DataFrame, path: str | Path,
                   fraction: float = FINAL_WINDOW_FRACTION) -> tuple[Path, Path]:
    """Metrics CSV in the fixed column order plus a JSON summary next to it."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame[METRICS_COLUMNS].to_csv(path, index=False)
        summary_path = path.with_name(path.stem + "_summary.json")
        summary_path.write_text(json.dumps(summarize(frame, fraction), indent=2, sort_keys=True))
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc
    return path, summary_path


def _scenario_path(args) -> Path:
    if args.scenario is not None:
        return args.scenario
    return REPO_ROOT / load_config()["experiment"]["scenario"]


def _print_schema_errors(error: ScenarioError) -> None:
    print("Scenario validation failed:", file=sys.stderr)
    for location, message in error.errors:
        print(f"  {location}: {message}", file=sys.stderr)


def cmd_run(args) -> int:
    config = load_config()
    scenario = load_scenario(_scenario_path(args))
    allocators = [AllocatorId(a) for a in args.allocator] if args.allocator else None
    out_dir = Path(args.out or Path(config["experiment"]["output_dir"]) / scenario.name)
    progress = config["experiment"].get("progress", True) and not args.no_progress

    print("\n" + "=" * 70)
    print(" " * 20 + f"Slicing experiment: {scenario.name}")
    print("=" * 70)
    print(f"✓ Slices: {[s.id for s in scenario.slices]}")
    print(f"✓ Allocators: {[a.value for a in (allocators or scenario.allocators)]}")
    print(f"✓ Seeds: {args.seeds or scenario.seeds}, steps: {scenario.steps}")

    result = run_experiment(scenario, out_dir, args.seeds, allocators, progress)

    print("\n" + "=" * 50)
    print("Summary (final window)")
    print("=" * 50)
    summary = summarize(result.metrics)
    for allocator, by_count in summary["allocators"].items():
        for device_count, entry in by_count.items():
            reward = entry["reward"]
            if reward["mean"] is not None:
                print(f"{allocator:>9} @ {device_count:>3} devices: "
                      f"reward {reward['mean']:.4f} ± {reward['std']:.4f}, "
                      f"comm scalars {entry['comm_scalars']['mean']:.0f}")
    if not result.evaluation.empty:
        print("\nGreedy episode")
        greedy = summarize(result.evaluation, fraction=1.0)
        for allocator, by_count in greedy["allocators"].items():
            for device_count, entry in by_count.items():
                print(f"{allocator:>9} @ {device_count:>3} devices: "
                      f"omega {entry['omega']['mean']:.4f}, u_mean {entry['u_mean']['mean']:.4f}")
    print(f"\n✓ {len(result.files)} files written to {out_dir}")
    return EXIT_OK


def cmd_plots(args) -> int:
    run_dir = Path(args.run_dir)
    metrics = MetricsFrame.read_csv(run_dir / "metrics.csv")
    forecasts_path = run_dir / "forecasts.csv"
    forecasts = pd.read_csv(forecasts_path, dtype={"slice_id": str}) if forecasts_path.exists() \
        else pd.DataFrame(columns=FORECAST_COLUMNS)
    evaluation_path = run_dir / "evaluation.csv"
    evaluation = MetricsFrame.read_csv(evaluation_path) if evaluation_path.exists() else None
    bundle = emit_plot_data(metrics, forecasts, args.out or run_dir / "plots", evaluation)
    for path in bundle.files:
        print(f"✓ {path}")
    for warning in bundle.warnings:
        print(f"! {warning}")
    return EXIT_OK


def cmd_validate(args) -> int:
    path = _scenario_path(args)
    scenario = load_scenario(path)
    print(f"✓ {path} is valid: {len(scenario.slices)} slices, {scenario.steps} steps, "
          f"seeds {scenario.seeds}")
    if args.schema_out:
        Path(args.schema_out).write_text(json.dumps(scenario_schema(), indent=2))
        print(f"✓ JSON schema written to {args.schema_out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Digital-twin assisted federated RAN slicing experiments",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run a scenario and write metrics, logs and checkpoints")
    run.add_argument("scenario", type=Path, nargs="?", default=None,
                     help="Scenario JSON file (default: experiment.scenario in config.yml)")
    run.add_argument("--out", type=Path, default=None, help="Output directory (default: experiment.output_dir/<name>)")
    run.add_argument("--seeds", type=int, nargs="+", default=None, help="Override the scenario's seeds")
    run.add_argument("--allocator", nargs="+", choices=[a.value for a in AllocatorId], default=None,
                     help="Restrict to these allocators")
    run.add_argument("--no-progress", action="store_true", help="Disable progress bars")
    run.set_defaults(func=cmd_run)

    plots = sub.add_parser("plots", help="Emit per-figure CSV bundles from a run directory")
    plots.add_argument("run_dir", type=Path)
    plots.add_argument("--out", type=Path, default=None, help="Bundle directory (default: <run_dir>/plots)")
    plots.set_defaults(func=cmd_plots)

    validate = sub.add_parser("validate", help="Validate a scenario file against the schema")
    validate.add_argument("scenario", type=Path, nargs="?", default=None)
    validate.add_argument("--schema-out", type=Path, default=None, help="Also write the JSON schema here")
    validate.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging()
    try:
        return args.func(args)
    except ScenarioError as exc:
        _print_schema_errors(exc)
        return EXIT_SCHEMA
    except Exception as exc:  # noqa: BLE001
        logger.exception("%s failed", args.command)
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
