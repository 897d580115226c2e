"""
One seeded episode per (seed, device count, allocator).

Traffic is generated (or imported) once per seed and shared by every allocator so the
comparisons are paired. The twins are pre-trained on the warm-up prefix and then track
the episode online; their forecasts only depend on the traces, so one twin pass serves
the DT-MAFL agents. Each allocator gets a fresh environment with the same radio seed.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from tqdm import tqdm

from baselines import AllocatorId, DQNAgent, madqn_allocate, netshare_allocate
from config import get_logger
from digital_twin import ForecastRecord, TwinModel, pretrain, rmse, running_rmse, train_step
from federation import (CommLedger, Orchestrator, SliceEnvironmentView, comm_cost, federated_round,
                        federated_twin_round, global_loss, local_round, should_aggregate)
from forecasters import ArimaForecaster, forecast_persistence, rolling_forecasts
from marl import ActorCritic
from nn_core import ParamVector
from radio_env import AllocationState, SliceOutcome, SliceSpec, SlicingEnvironment, apply_allocation, place_devices
from schemas import Scenario, MetricsFrame
from traffic_gen import DemandTensor, import_traces, slice_traces

logger = get_logger(__name__)

TWIN_MODEL_ID = "dt-gat"

# stream purposes for seed derivation
TRAFFIC, POSITIONS, TWIN, AGENT_INIT, EXPLORE, RADIO, EVAL = range(7)


def stream_seed(seed: int, device_count: int | None, index: int, purpose: int) -> int:
    return int(np.random.SeedSequence([seed, device_count or 0, index, purpose]).generate_state(1)[0])


@dataclass
class SeedTraces:
    specs: list[SliceSpec]
    tensors: dict[str, DemandTensor]
    positions: dict[str, np.ndarray]


def build_traces(scenario: Scenario, seed: int, device_count: int | None, steps: int) -> SeedTraces:
    """Per-slice demand of `steps` TTIs; device positions are the traffic graph's node positions."""
    specs, tensors, positions = [], {}, {}
    for m, spec in enumerate(scenario.slices):
        if spec.id in scenario.traces:
            tensor = import_traces(scenario.traces[spec.id], spec.id)
            count = len(tensor.node_ids)
            rng = np.random.default_rng(stream_seed(seed, device_count, m, POSITIONS))
            positions[spec.id] = place_devices(count, scenario.radio.cell_radius_m, rng)
        else:
            count = device_count or spec.device_count
            topology, tensor = slice_traces(spec.traffic, count, steps, stream_seed(seed, device_count, m, TRAFFIC),
                                            spec.id, scenario.radio)
            positions[spec.id] = topology.positions
        specs.append(spec.model_copy(update={"device_count": count}))
        tensors[spec.id] = tensor
    return SeedTraces(specs=specs, tensors=tensors, positions=positions)


@dataclass
class TwinTrack:
    """forecasts[id][t]: forecast of the slice total at offset+t+1, made at episode step t."""

    forecasts: dict[str, np.ndarray]
    rmse_so_far: dict[str, np.ndarray]
    records: dict[str, list[ForecastRecord]]
    twins: dict[str, TwinModel]
    comm_scalars: np.ndarray  # cumulative twin-federation scalars after each step


def run_twins(scenario: Scenario, traces: SeedTraces, offset: int, steps: int, seed: int,
              device_count: int | None) -> TwinTrack:
    cfg = scenario.twin
    L = cfg.window
    twins, totals = {}, {}
    for m, spec in enumerate(traces.specs):
        tensor = traces.tensors[spec.id]
        twin = TwinModel(len(tensor.node_ids), cfg, np.random.default_rng(stream_seed(seed, device_count, m, TWIN)))
        if cfg.pretrain_steps > 0:
            pretrain(twin, tensor, offset)
        else:
            twin.fit_scale(tensor.values[0, :offset].T)
        twins[spec.id] = twin
        totals[spec.id] = tensor.totals()
    forecasts = {sid: np.zeros(steps + 1) for sid in twins}
    records: dict[str, list[ForecastRecord]] = {sid: [] for sid in twins}
    twin_fed = scenario.federation.federate_twins and len(twins) > 1
    orchestrator = Orchestrator(CommLedger()) if twin_fed else None
    comm = np.zeros(steps, dtype=np.int64)
    for t in range(steps + 1):
        for sid, twin in twins.items():
            window = traces.tensors[sid].window(offset + t, L)
            if t == steps:
                forecasts[sid][t] = twin.forecast(window)
                continue
            actual = float(totals[sid][offset + t + 1])
            predicted = train_step(twin, window, actual).prediction
            forecasts[sid][t] = predicted
            records[sid].append(ForecastRecord(t=offset + t + 1, actual=actual, predicted=predicted,
                                               model_id=TWIN_MODEL_ID))
        if t < steps:
            if orchestrator is not None and should_aggregate(t + 1, scenario.federation.aggregation_period):
                federated_twin_round(orchestrator, twins, {sid: offset + t + 1 for sid in twins})
            comm[t] = comm_cost(orchestrator.ledger).scalars if orchestrator is not None else 0
    rmse_so_far = {sid: running_rmse(records[sid]) if records[sid] else np.zeros(0) for sid in twins}
    for sid, slice_records in records.items():
        if slice_records:
            logger.info("twin %s seed %d: online RMSE %.4f Mb/s over %d TTIs", sid, seed, rmse(slice_records),
                        len(slice_records))
    return TwinTrack(forecasts, rmse_so_far, records, twins, comm)


@dataclass
class AllocatorRun:
    allocator: AllocatorId
    metrics: MetricsFrame
    evaluation: MetricsFrame = field(default_factory=MetricsFrame)
    tti_rows: list[dict] = field(default_factory=list)
    training_rows: list[dict] = field(default_factory=list)
    round_rows: list[dict] = field(default_factory=list)
    checkpoints: dict[str, ParamVector] = field(default_factory=dict)
    ledger: CommLedger = field(default_factory=CommLedger)


def run_allocator(scenario: Scenario, allocator: AllocatorId, traces: SeedTraces, offset: int, steps: int,
                  seed: int, device_count: int | None, twin_track: TwinTrack | None = None,
                  progress: bool = False, eval_steps: int = 0) -> AllocatorRun:
    """
    `steps` TTIs from the scenario's initial allocation, learning as the allocator does. With
    `eval_steps`, a further greedy episode from the equal split with every agent frozen fills
    `run.evaluation`.
    """
    radio = scenario.radio
    specs = traces.specs
    ids = [s.id for s in specs]
    total, cap = radio.total_rbs, radio.kappa
    env = SlicingEnvironment(radio, specs, traces.positions, seed=stream_seed(seed, device_count, 0, RADIO))
    ledger = CommLedger()
    run = AllocatorRun(allocator=allocator, metrics=MetricsFrame(), ledger=ledger)
    learned_dc = device_count if device_count is not None else specs[0].device_count
    is_dt = allocator == AllocatorId.DT_MAFL

    federated = allocator in (AllocatorId.DT_MAFL, AllocatorId.FL_ONLY)
    if is_dt and twin_track is None:
        raise ValueError("dt-mafl needs the twins' forecasts")
    if is_dt and len(twin_track.comm_scalars) < steps + eval_steps:
        raise ValueError(f"twin track covers {len(twin_track.comm_scalars)} steps, the run needs {steps + eval_steps}")
    agents: dict[str, ActorCritic] = {}
    dqn: dict[str, DQNAgent] = {}
    orchestrator = Orchestrator(ledger)
    if federated:
        for m, sid in enumerate(ids):
            explore = np.random.default_rng(stream_seed(seed, device_count, m, EXPLORE))
            agents[sid] = ActorCritic(scenario.agent, rng=explore, slice_id=sid,
                                      init_rng=np.random.default_rng(stream_seed(seed, device_count, 0, AGENT_INIT)))
        first = next(iter(agents.values()))
        ledger.model_size = len(first.parameters())
        ledger.layers = scenario.agent.hidden_layers
        ledger.neurons = scenario.agent.hidden_units
    elif allocator == AllocatorId.MADQN:
        for m, sid in enumerate(ids):
            dqn[sid] = DQNAgent(scenario.dqn, rng=np.random.default_rng(stream_seed(seed, device_count, m, EXPLORE)),
                                slice_id=sid,
                                init_rng=np.random.default_rng(stream_seed(seed, device_count, 0, AGENT_INIT)))

    def twin_forecast(sid: str, tt: int) -> float:
        return float(twin_track.forecasts[sid][tt - offset])

    state_mode = scenario.dqn.state_mode if allocator == AllocatorId.MADQN else scenario.agent.state_mode

    def new_view(start: int, allocation: AllocationState) -> SliceEnvironmentView:
        return SliceEnvironmentView(env, traces.tensors, start, twin_forecast if is_dt else None, state_mode,
                                    scenario.agent.max_delta_fraction, allocation)

    def record(frame: MetricsFrame, tt: int, outcomes: list[SliceOutcome], losses: list[float],
               scalars: int) -> None:
        """Rows for the TTI `tt` just scored; `scalars` is the ledger total at that TTI."""
        run.tti_rows += [o.metrics_row(tt) for o in outcomes]
        t = tt - offset - 1
        if is_dt:
            scalars += int(twin_track.comm_scalars[t])
        for m, (sid, outcome) in enumerate(zip(ids, outcomes)):
            frame.append({
                "t": tt,
                "slice_id": sid,
                "allocator_id": allocator.value,
                "seed": seed,
                "device_count": learned_dc,
                "reward": outcome.reward,
                "critic_loss": losses[m],
                "omega": outcome.utilization.clipped,
                "u_mean": outcome.utility.mean,
                "rmse_so_far": twin_track.rmse_so_far[sid][t] if is_dt else np.nan,
                "comm_scalars": scalars,
            })

    no_losses = [np.nan] * len(ids)
    view = new_view(offset, AllocationState.initial(scenario.initial_allocation, len(ids), total, cap))
    bar = tqdm(total=steps, desc=f"{allocator.value} seed {seed}", disable=not progress, leave=False)

    if federated:
        period = scenario.federation.aggregation_period
        round_losses: dict[str, list[float]] = {sid: [] for sid in ids}
        pending: list[tuple[int, list[SliceOutcome], list[float], int]] = []

        def on_train_step(_: int, learned: dict[str, tuple[float, float] | None]) -> None:
            losses = []
            for sid in ids:
                loss, grad_norm = learned[sid] if learned[sid] is not None else (np.nan, np.nan)
                if learned[sid] is not None:
                    round_losses[sid].append(loss)
                losses.append(loss)
                run.training_rows.append({"t": view.t, "slice_id": sid, "critic_loss": loss,
                                          "actor_grad_norm": grad_norm, "epsilon": agents[sid].epsilon})
            pending.append((view.t, view.last_outcomes, losses, comm_cost(ledger).scalars))
            bar.update(1)

        t = 0
        while t < steps:
            chunk = min(period - t % period, steps - t)
            local_round(agents, view, chunk, on_step=on_train_step)
            t += chunk
            if should_aggregate(t, period):
                sizes = [max(len(agents[sid].buffer), 1) for sid in ids]
                model = federated_round(orchestrator, agents)
                slice_losses = [float(np.mean(round_losses[sid])) if round_losses[sid] else np.nan for sid in ids]
                overall = global_loss(slice_losses, sizes) if not np.any(np.isnan(slice_losses)) else np.nan
                scalars = comm_cost(ledger).scalars
                for sid, loss in zip(ids, slice_losses):
                    run.round_rows.append({"round": model.round, "t": view.t, "slice_id": sid, "loss": loss,
                                           "global_loss": overall, "cumulative_scalars": scalars})
                    round_losses[sid] = []
                tt, outcomes, losses, _ = pending[-1]
                pending[-1] = (tt, outcomes, losses, scalars)
            for tt, outcomes, losses, scalars in pending:
                record(run.metrics, tt, outcomes, losses, scalars)
            pending.clear()
    else:
        for _ in range(steps):
            if allocator == AllocatorId.MADQN:
                states = view.observe()
                indices, deltas = madqn_allocate([dqn[sid] for sid in ids], [states[sid] for sid in ids], total,
                                                 ledger)
                view.advance(apply_allocation(deltas, view.allocation))
                next_states = view.observe()
                losses = []
                for m, sid in enumerate(ids):
                    agent = dqn[sid]
                    loss = agent.observe(states[sid], indices[m], view.last_outcomes[m].reward, next_states[sid])
                    losses.append(np.nan if loss is None else loss)
                    run.training_rows.append({"t": view.t, "slice_id": sid, "critic_loss": losses[m],
                                              "actor_grad_norm": np.nan, "epsilon": agent.epsilon})
            else:
                demanded = [env.demanded_rbs(traces.tensors[sid].at(view.t)) for sid in ids]
                view.advance(netshare_allocate(demanded, total, cap))
                losses = no_losses
            record(run.metrics, view.t, view.last_outcomes, losses, comm_cost(ledger).scalars)
            bar.update(1)
    bar.close()

    if eval_steps:
        view = new_view(offset + steps, AllocationState.equal_split(len(ids), total, cap))
        if federated:
            local_round(agents, view, eval_steps, learn=False,
                        on_step=lambda _, __: record(run.evaluation, view.t, view.last_outcomes, no_losses,
                                                     comm_cost(ledger).scalars))
        else:
            for _ in range(eval_steps):
                if allocator == AllocatorId.MADQN:
                    states = view.observe()
                    _, deltas = madqn_allocate([dqn[sid] for sid in ids], [states[sid] for sid in ids], total,
                                               ledger, epsilon=0.0)
                    view.advance(apply_allocation(deltas, view.allocation))
                else:
                    demanded = [env.demanded_rbs(traces.tensors[sid].at(view.t)) for sid in ids]
                    view.advance(netshare_allocate(demanded, total, cap))
                record(run.evaluation, view.t, view.last_outcomes, no_losses, comm_cost(ledger).scalars)

    for sid, agent in agents.items():
        run.checkpoints[f"{sid}.main.params"] = agent.parameters()
        run.checkpoints[f"{sid}.target.params"] = agent.targets()
    for sid, agent in dqn.items():
        run.checkpoints[f"{sid}.q.params"] = agent.q_net.params.copy()
    if orchestrator.model is not None:
        run.checkpoints["global.params"] = orchestrator.model.params
    if is_dt:
        for sid, twin in twin_track.twins.items():
            run.checkpoints[f"{sid}.twin.params"] = twin.parameters()
    if steps:
        frame = run.metrics.to_frame()
        logger.info("%s seed %d (%d devices): mean reward %.4f, comm scalars %d", allocator.value, seed,
                    learned_dc, frame["reward"].mean(), comm_cost(ledger).scalars)
    if eval_steps:
        frame = run.evaluation.to_frame()
        logger.info("%s seed %d (%d devices): greedy omega %.4f, u_mean %.4f", allocator.value, seed,
                    learned_dc, frame["omega"].mean(), frame["u_mean"].mean())
    return run


def evaluate_forecasters(scenario: Scenario, seed: int, device_count: int | None = None) -> list[dict]:
    """Twin vs persistence vs ARIMA on a long trace: pre-train on the head, forecast the tail online."""
    cfg = scenario.forecast_eval
    order = (cfg.arima.p, cfg.arima.d, cfg.arima.q)
    slice_ids = cfg.slice_ids or [scenario.slices[0].id]
    split = int(round(cfg.steps * (1.0 - cfg.holdout_fraction)))
    L = scenario.twin.window
    if split < L + 1 or split >= cfg.steps:
        raise ValueError(f"forecast evaluation split {split} leaves no usable head or tail")
    rows = []
    for m, spec in enumerate(scenario.slices):
        if spec.id not in slice_ids:
            continue
        count = device_count or spec.device_count
        traffic = cfg.traffic or spec.traffic
        _, tensor = slice_traces(traffic, count, cfg.steps, stream_seed(seed, device_count, m, EVAL), spec.id,
                                 scenario.radio)
        totals = tensor.totals()
        twin = TwinModel(count, scenario.twin, np.random.default_rng(stream_seed(seed, device_count, m, TWIN)))
        pretrain(twin, tensor, split, epochs=max(scenario.twin.pretrain_epochs, 1))
        records = [ForecastRecord(t=t, actual=float(totals[t]),
                                  predicted=train_step(twin, tensor.window(t - 1, L), float(totals[t])).prediction,
                                  model_id=TWIN_MODEL_ID)
                   for t in range(split, cfg.steps)]
        records += rolling_forecasts(totals, split, forecast_persistence, "persistence")
        arima = ArimaForecaster(*order)
        arima.train(totals[:split])
        records += rolling_forecasts(totals, split, arima, arima.model_id)
        for model_id in dict.fromkeys(r.model_id for r in records):
            logger.info("%s seed %d forecaster %s: RMSE %.4f", spec.id, seed, model_id,
                        rmse([r for r in records if r.model_id == model_id]))
        rows += [{"t": r.t, "slice_id": spec.id, "actual": r.actual, "predicted": r.predicted,
                  "model_id": r.model_id, "seed": seed} for r in records]
    return rows


@dataclass
class SeedResult:
    seed: int
    device_count: int | None
    runs: list[AllocatorRun]
    forecasts: list[dict]

    @property
    def metrics(self) -> MetricsFrame:
        frame = MetricsFrame()
        for run in self.runs:
            frame.extend(run.metrics)
        return frame

    @property
    def evaluation(self) -> MetricsFrame:
        """The greedy episodes after training; empty without `eval_steps`."""
        frame = MetricsFrame()
        for run in self.runs:
            frame.extend(run.evaluation)
        return frame


def run_seed(scenario: Scenario, seed: int, device_count: int | None = None,
             allocators: list[AllocatorId] | None = None, progress: bool = False) -> SeedResult:
    allocators = allocators or list(scenario.allocators)
    offset = scenario.warmup_steps()
    steps = scenario.steps
    horizon = steps + scenario.eval_steps
    traces = build_traces(scenario, seed, device_count, offset + horizon + 2)
    twin_track = None
    if AllocatorId.DT_MAFL in allocators:
        twin_track = run_twins(scenario, traces, offset, horizon, seed, device_count)
    runs = [run_allocator(scenario, allocator, traces, offset, steps, seed, device_count, twin_track, progress,
                          scenario.eval_steps)
            for allocator in allocators]
    forecasts = evaluate_forecasters(scenario, seed, device_count) if scenario.forecast_eval.enabled else []
    return SeedResult(seed=seed, device_count=device_count, runs=runs, forecasts=forecasts)


def checkpoint_dir(root: str | Path, allocator: AllocatorId, seed: int, device_count: int | None) -> Path:
    suffix = f"seed{seed}" if device_count is None else f"seed{seed}_dev{device_count}"
    return Path(root) / allocator.value / suffix
