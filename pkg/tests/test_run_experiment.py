import json

import numpy as np
import pandas as pd
import pytest

from baselines import AllocatorId
from conftest import small_scenario_data
from run_experiment import EXIT_OK, EXIT_RUNTIME, EXIT_SCHEMA, export_metrics, final_window, main, run_experiment, \
    summarize
from schemas import METRICS_COLUMNS, MetricsFrame, parse_scenario


def write_scenario(path, **overrides):
    path.write_text(json.dumps(small_scenario_data(**overrides)))
    return path


def synthetic_metrics(rewards_by_seed: dict[int, float], steps: int = 10) -> pd.DataFrame:
    rows = [{"t": t, "slice_id": "embb-0", "allocator_id": "netshare", "seed": seed, "device_count": 4,
             "reward": reward, "critic_loss": np.nan, "omega": 0.5, "u_mean": 0.5, "rmse_so_far": np.nan,
             "comm_scalars": 10 * t}
            for seed, reward in rewards_by_seed.items() for t in range(1, steps + 1)]
    return MetricsFrame(rows).to_frame()


def test_run_writes_metrics_logs_and_checkpoints(tmp_path, tiny_scenario):
    result = run_experiment(tiny_scenario, tmp_path)
    assert len(result.metrics) == 4 * 20 * 2
    for name in ("metrics.csv", "metrics_summary.json", "forecasts.csv", "scenario.json"):
        assert (tmp_path / name).exists()
    assert (tmp_path / "logs" / "dt-mafl_seed7_tti.csv").exists()
    assert (tmp_path / "logs" / "dt-mafl_seed7_training.csv").exists()
    assert (tmp_path / "logs" / "fl-only_seed7_rounds.csv").exists()
    assert not (tmp_path / "logs" / "netshare_seed7_training.csv").exists()
    assert (tmp_path / "checkpoints" / "dt-mafl" / "seed7" / "global.params").exists()
    assert (tmp_path / "checkpoints" / "madqn" / "seed7" / "urllc-0.q.params").exists()
    assert all(path.exists() for path in result.files)
    saved = parse_scenario(json.loads((tmp_path / "scenario.json").read_text()))
    assert saved.model_dump() == tiny_scenario.model_dump()


def test_metrics_csv_reads_back(tmp_path, tiny_scenario):
    result = run_experiment(tiny_scenario, tmp_path, allocators=[AllocatorId.FL_ONLY, AllocatorId.NETSHARE])
    pd.testing.assert_frame_equal(MetricsFrame.read_csv(tmp_path / "metrics.csv"), result.metrics)


def test_same_scenario_gives_identical_csv_bytes(tmp_path, tiny_scenario):
    run_experiment(tiny_scenario, tmp_path / "a")
    run_experiment(tiny_scenario, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_seed_order_does_not_leak_state(tiny_scenario):
    allocators = [AllocatorId.FL_ONLY, AllocatorId.MADQN]
    forward = run_experiment(tiny_scenario, seeds=[7, 8], allocators=allocators).metrics
    backward = run_experiment(tiny_scenario, seeds=[8, 7], allocators=allocators).metrics
    for seed in (7, 8):
        pd.testing.assert_frame_equal(forward[forward["seed"] == seed].reset_index(drop=True),
                                      backward[backward["seed"] == seed].reset_index(drop=True))


def test_device_count_sweep_runs_every_count():
    scenario = parse_scenario(small_scenario_data(device_count_sweep=[3, 5], steps=5))
    metrics = run_experiment(scenario, allocators=[AllocatorId.NETSHARE]).metrics
    assert sorted(metrics["device_count"].unique()) == [3, 5]
    assert len(metrics) == 2 * 5 * 2


def test_zero_steps_gives_an_empty_frame(tmp_path):
    scenario = parse_scenario(small_scenario_data(steps=0))
    result = run_experiment(scenario, tmp_path)
    assert result.metrics.empty
    assert (tmp_path / "metrics.csv").read_text().strip() == ",".join(METRICS_COLUMNS)


def test_final_window_keeps_the_last_tenth():
    frame = synthetic_metrics({0: 0.1}, steps=20)
    assert final_window(frame)["t"].tolist() == [19, 20]
    assert final_window(synthetic_metrics({0: 0.1}, steps=5))["t"].tolist() == [5]


def test_summary_is_a_mean_over_seeds():
    summary = summarize(synthetic_metrics({0: 0.4, 1: 0.6}))
    entry = summary["allocators"]["netshare"]["4"]
    assert entry["reward"]["mean"] == pytest.approx(0.5)
    assert entry["reward"]["std"] == pytest.approx(0.1)
    assert entry["reward"]["seeds"] == 2
    assert entry["rmse"]["mean"] is None
    assert entry["comm_scalars"]["mean"] == 100
    assert summary["overall"]["reward"]["mean"] == pytest.approx(0.5)
    assert summary["rows"] == 20


def test_empty_frame_exports_header_and_null_summary(tmp_path):
    csv_path, summary_path = export_metrics(MetricsFrame().to_frame(), tmp_path / "metrics.csv")
    assert csv_path.read_text().splitlines() == [",".join(METRICS_COLUMNS)]
    summary = json.loads(summary_path.read_text())
    assert summary["rows"] == 0
    assert summary["allocators"] == {}
    assert summary["overall"]["reward"]["mean"] is None


def test_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        export_metrics(synthetic_metrics({0: 0.5}), blocker / "metrics.csv")


def test_cli_validate(tmp_path, capsys):
    path = write_scenario(tmp_path / "tiny.json")
    schema_path = tmp_path / "schema.json"
    assert main(["validate", str(path), "--schema-out", str(schema_path)]) == EXIT_OK
    assert "is valid" in capsys.readouterr().out
    assert "properties" in json.loads(schema_path.read_text())


def test_cli_schema_error_exit_code(tmp_path, capsys):
    path = write_scenario(tmp_path / "bad.json", steps=-1)
    assert main(["validate", str(path)]) == EXIT_SCHEMA
    assert "$.steps" in capsys.readouterr().err
    (tmp_path / "broken.json").write_text("{")
    assert main(["run", str(tmp_path / "broken.json"), "--out", str(tmp_path / "out")]) == EXIT_SCHEMA


def test_cli_runtime_error_exit_code(tmp_path):
    path = write_scenario(tmp_path / "missing.json", traces={"embb-0": str(tmp_path / "nope.csv")})
    assert main(["run", str(path), "--out", str(tmp_path / "out"), "--no-progress"]) == EXIT_RUNTIME


def test_cli_run_then_plots(tmp_path):
    path = write_scenario(tmp_path / "tiny.json", steps=5)
    out = tmp_path / "out"
    assert main(["run", str(path), "--out", str(out), "--no-progress", "--allocator", "netshare", "fl-only",
                 "--seeds", "7", "8"]) == EXIT_OK
    metrics = MetricsFrame.read_csv(out / "metrics.csv")
    assert set(metrics["allocator_id"]) == {"netshare", "fl-only"}
    assert set(metrics["seed"]) == {7, 8}
    assert main(["plots", str(out)]) == EXIT_OK
    assert (out / "plots" / "reward_by_step.csv").exists()
    assert "missing series 'dt-mafl'" in (out / "plots" / "warnings.txt").read_text()


def test_cli_validate_defaults_to_the_configured_scenario(capsys):
    assert main(["validate"]) == EXIT_OK
    assert "reference.json is valid" in capsys.readouterr().out


def test_greedy_episodes_are_exported_and_plotted(tmp_path):
    path = write_scenario(tmp_path / "tiny.json", steps=5, eval_steps=4)
    out = tmp_path / "out"
    assert main(["run", str(path), "--out", str(out), "--no-progress", "--allocator", "netshare", "fl-only"]) \
        == EXIT_OK
    evaluation = MetricsFrame.read_csv(out / "evaluation.csv")
    assert len(evaluation) == 2 * 4 * 2
    assert evaluation["critic_loss"].isna().all()
    summary = json.loads((out / "evaluation_summary.json").read_text())
    assert summary["final_window_fraction"] == 1.0
    assert summary["allocators"]["netshare"]["4"]["omega"]["mean"] == pytest.approx(
        evaluation[evaluation["allocator_id"] == "netshare"]["omega"].mean())
    assert main(["plots", str(out)]) == EXIT_OK
    qos = pd.read_csv(out / "plots" / "qos_by_devices.csv")
    expected = evaluation.groupby("allocator_id")["u_mean"].mean()
    for allocator, value in expected.items():
        assert qos[qos["series_id"] == allocator]["y"].iloc[0] == pytest.approx(value)


def test_no_greedy_episode_writes_no_evaluation_file(tmp_path, tiny_scenario):
    result = run_experiment(tiny_scenario, tmp_path, allocators=[AllocatorId.NETSHARE])
    assert result.evaluation.empty
    assert not (tmp_path / "evaluation.csv").exists()
