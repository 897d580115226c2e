"""
Federated averaging over slice agents.

The orchestrator only ever sees ParamVectors and dataset sizes |D_m|; raw experiences,
demands and device state stay inside each slice. Every exchanged scalar and message is
charged to a CommLedger.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from baselines import fl_only_state
from config import get_logger
from digital_twin import TwinModel
from marl import ActorCritic, Experience, action_to_delta, build_state, observe_transition, select_action
from nn_core import ParamVector, blend, save_params, weighted_average
from radio_env import AllocationState, SliceOutcome, SlicingEnvironment, apply_allocation
from traffic_gen import DemandTensor

logger = get_logger(__name__)

ROUND_LOG_COLUMNS = ["round", "t", "slice_id", "loss", "global_loss", "cumulative_scalars"]


class FederationConfig(BaseModel):
    aggregation_period: int = Field(50, ge=1)  # agg-τ, in TTIs
    federate_twins: bool = False


@dataclass
class CommLedger:
    """Counters are monotone; `charge_*` is the only way to change them."""

    model_size: int = 0
    layers: int = 0
    neurons: int = 0
    rounds: int = 0
    uploaded_scalars: int = 0
    downloaded_scalars: int = 0
    messages: int = 0
    reported_scalars: int = 0  # per-step monitoring traffic of non-federated allocators
    reported_messages: int = 0

    def _check(self, *amounts: int) -> None:
        if any(a < 0 for a in amounts):
            raise ValueError(f"ledger charges must be non-negative, got {amounts}")

    def charge_upload(self, scalars: int, messages: int = 1) -> None:
        self._check(scalars, messages)
        self.uploaded_scalars += scalars
        self.messages += messages

    def charge_download(self, scalars: int, messages: int = 1) -> None:
        self._check(scalars, messages)
        self.downloaded_scalars += scalars
        self.messages += messages

    def charge_report(self, scalars: int, messages: int) -> None:
        self._check(scalars, messages)
        self.reported_scalars += scalars
        self.reported_messages += messages


@dataclass(frozen=True)
class CommCost:
    scalars: int
    messages: int
    rounds: int


def comm_cost(ledger: CommLedger) -> CommCost:
    return CommCost(
        scalars=ledger.uploaded_scalars + ledger.downloaded_scalars + ledger.reported_scalars,
        messages=ledger.messages + ledger.reported_messages,
        rounds=ledger.rounds,
    )


@dataclass
class GlobalModel:
    params: ParamVector
    sizes: dict[str, int] = field(default_factory=dict)
    round: int = 0

    @property
    def total_size(self) -> int:
        return sum(self.sizes.values())


def should_aggregate(t: int, period: int) -> bool:
    if period < 1:
        raise ValueError(f"aggregation period must be >= 1, got {period}")
    return t % period == 0


def _weights(sizes: Sequence[float]) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.size == 0 or np.any(sizes <= 0):
        raise ValueError(f"dataset sizes must be positive, got {sizes.tolist()}")
    return sizes / sizes.sum()


def aggregate(local_params: Sequence[ParamVector], sizes: Sequence[float]) -> ParamVector:
    """θ = Σ (|D_m|/|D|) θ_m."""
    if len(local_params) != len(sizes):
        raise ValueError(f"{len(local_params)} local models but {len(sizes)} sizes")
    return weighted_average(local_params, _weights(sizes))


def global_loss(losses: Sequence[float], sizes: Sequence[float]) -> float:
    """F(θ) = Σ (|D_m|/|D|) F_m(θ)."""
    if len(losses) != len(sizes):
        raise ValueError(f"{len(losses)} losses but {len(sizes)} sizes")
    return float(np.dot(_weights(sizes), np.asarray(losses, dtype=np.float64)))


class Orchestrator:
    """Collects local models for a round, averages them and hands back the global θ."""

    def __init__(self, ledger: CommLedger | None = None):
        self.ledger = ledger if ledger is not None else CommLedger()
        self.model: GlobalModel | None = None
        self._pending: dict[str, tuple[ParamVector, int]] = {}

    def submit(self, slice_id: str, params: ParamVector, size: int) -> None:
        if not isinstance(params, ParamVector):
            raise TypeError(f"orchestrator accepts ParamVectors only, got {type(params).__name__}")
        if isinstance(size, bool) or not isinstance(size, (int, np.integer)) or size <= 0:
            raise TypeError(f"dataset size must be a positive integer, got {size!r}")
        if self._pending:
            next(iter(self._pending.values()))[0].check_layout(params)
        self._pending[str(slice_id)] = (params.copy(), int(size))
        self.ledger.charge_upload(len(params))

    def aggregate_round(self) -> GlobalModel:
        if not self._pending:
            raise ValueError("no local models submitted for this round")
        ids = sorted(self._pending)
        params = aggregate([self._pending[i][0] for i in ids], [self._pending[i][1] for i in ids])
        sizes = {i: self._pending[i][1] for i in ids}
        round_index = self.model.round + 1 if self.model else 1
        self.model = GlobalModel(params=params, sizes=sizes, round=round_index)
        self.ledger.rounds += 1
        self._pending.clear()
        return self.model

    def save_checkpoint(self, path: str | Path) -> Path:
        if self.model is None:
            raise ValueError("no global model to checkpoint yet")
        return save_params(self.model.params, path)


def broadcast(params: ParamVector, agents: Sequence[ActorCritic], ledger: CommLedger,
              target_rate: float | None = None) -> None:
    """Set every agent's mains to θ and soft-blend its targets one ν-step toward them."""
    for agent in agents:
        agent.load_parameters(params.copy())
        rate = agent.cfg.soft_update_rate if target_rate is None else target_rate
        agent.load_targets(blend(agent.targets(), params, rate))
        ledger.charge_download(len(params))


def broadcast_twins(params: ParamVector, twins: Sequence[TwinModel], ledger: CommLedger) -> None:
    for twin in twins:
        twin.load_parameters(params.copy())
        ledger.charge_download(len(params))


def federated_round(orchestrator: Orchestrator, agents: Mapping[str, ActorCritic]) -> GlobalModel:
    """One FedAvg barrier over the agents' mains, weighted by replay-buffer fill."""
    for slice_id, agent in agents.items():
        orchestrator.submit(slice_id, agent.parameters(), max(len(agent.buffer), 1))
    model = orchestrator.aggregate_round()
    broadcast(model.params, list(agents.values()), orchestrator.ledger)
    return model


def federated_twin_round(orchestrator: Orchestrator, twins: Mapping[str, TwinModel],
                         sizes: Mapping[str, int]) -> GlobalModel:
    for slice_id, twin in twins.items():
        orchestrator.submit(slice_id, twin.parameters(), sizes[slice_id])
    model = orchestrator.aggregate_round()
    broadcast_twins(model.params, list(twins.values()), orchestrator.ledger)
    return model


Forecast = Callable[[str, int], float]
StepCallback = Callable[[int, dict[str, tuple[float, float] | None]], None]


class LocalEnvironment(Protocol):
    """Slice-keyed lockstep environment: every slice acts once per step."""

    def observe(self) -> dict[str, np.ndarray]: ...

    def step(self, actions: Mapping[str, float]) -> tuple[dict[str, float], dict[str, np.ndarray]]: ...


class SliceEnvironmentView:
    """
    The slices' local environments on one shared cell.

    Each slice observes only its own demand, forecast and grant; the grants couple through the
    pool projection. `forecast(slice_id, t)` predicts the slice total at t+1; without one the
    state carries the lagged actual instead.
    """

    def __init__(self, env: SlicingEnvironment, tensors: Mapping[str, DemandTensor], start_t: int,
                 forecast: Forecast | None = None, state_mode: str = "augmented", max_delta_fraction: float = 0.1,
                 allocation: AllocationState | None = None):
        self.ids = [s.id for s in env.slices]
        missing = [sid for sid in self.ids if sid not in tensors]
        if missing:
            raise ValueError(f"no demand trace for slices {missing}")
        self.env = env
        self.tensors = {sid: tensors[sid] for sid in self.ids}
        self._totals = {sid: t.totals() for sid, t in self.tensors.items()}
        self.t = start_t
        self.forecast = forecast
        self.state_mode = state_mode
        self.max_delta_fraction = max_delta_fraction
        cfg = env.cfg
        if allocation is None:
            allocation = AllocationState.equal_split(len(self.ids), cfg.total_rbs, cfg.kappa)
        if len(allocation.grants) != len(self.ids):
            raise ValueError(f"allocation covers {len(allocation.grants)} slices, view has {len(self.ids)}")
        self.allocation = allocation
        self.last_outcomes: list[SliceOutcome] = []

    def demand(self, slice_id: str, t: int) -> float:
        return float(np.sum(self.tensors[slice_id].at(t)))

    def observe(self) -> dict[str, np.ndarray]:
        cfg = self.env.cfg
        states = {}
        for m, sid in enumerate(self.ids):
            grant = self.allocation.grants[m]
            if self.forecast is None:
                states[sid] = fl_only_state(self._totals[sid], self.t, grant, cfg.pool_capacity_mbps,
                                            cfg.total_rbs, self.state_mode)
                continue
            states[sid] = build_state(self.demand(sid, self.t), float(self.forecast(sid, self.t)), grant,
                                      cfg.pool_capacity_mbps, cfg.total_rbs, self.state_mode)
        return states

    def advance(self, allocation: AllocationState) -> dict[str, float]:
        """Hold `allocation` over the next TTI and score it against that TTI's demand."""
        demands = {sid: self.tensors[sid].at(self.t + 1) for sid in self.ids}
        self.last_outcomes = self.env.step(self.t + 1, allocation, demands)
        self.allocation = allocation
        self.t += 1
        return {o.slice_id: o.reward for o in self.last_outcomes}

    def step(self, actions: Mapping[str, float]) -> tuple[dict[str, float], dict[str, np.ndarray]]:
        total = self.env.cfg.total_rbs
        deltas = [action_to_delta(actions[sid], total, self.max_delta_fraction) for sid in self.ids]
        rewards = self.advance(apply_allocation(deltas, self.allocation))
        return rewards, self.observe()


@dataclass(frozen=True)
class LocalRoundResult:
    params: ParamVector
    experiences: list[Experience]
    critic_losses: list[float]


def local_round(agents: Mapping[str, ActorCritic], env: LocalEnvironment, steps: int, learn: bool = True,
                on_step: StepCallback | None = None) -> dict[str, LocalRoundResult]:
    """
    `steps` lockstep interactions of every slice's agent. With `learn` the agents explore and
    run a DDPG update per transition; without it they act greedily and stay fixed.
    Returns each slice's θ_m and the experiences it gathered.
    """
    if steps < 0:
        raise ValueError(f"steps must be non-negative, got {steps}")
    experiences: dict[str, list[Experience]] = {sid: [] for sid in agents}
    losses: dict[str, list[float]] = {sid: [] for sid in agents}
    states = env.observe()
    for k in range(steps):
        if learn:
            actions = {sid: select_action(agent, states[sid]) for sid, agent in agents.items()}
        else:
            actions = {sid: select_action(agent, states[sid], epsilon=0.0, noise_std=0.0)
                       for sid, agent in agents.items()}
        rewards, next_states = env.step(actions)
        learned: dict[str, tuple[float, float] | None] = {}
        for sid, agent in agents.items():
            experiences[sid].append(Experience(states[sid], actions[sid], rewards[sid], next_states[sid]))
            learned[sid] = None
            if learn:
                learned[sid] = observe_transition(agent, states[sid], actions[sid], rewards[sid], next_states[sid])
            if learned[sid] is not None:
                losses[sid].append(learned[sid][0])
        if on_step is not None:
            on_step(k, learned)
        states = next_states
    return {sid: LocalRoundResult(params=agent.parameters(), experiences=experiences[sid],
                                  critic_losses=losses[sid])
            for sid, agent in agents.items()}


def write_round_log(rows: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(list(rows), columns=ROUND_LOG_COLUMNS).to_csv(path, index=False)
    return path
