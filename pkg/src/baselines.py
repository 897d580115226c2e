"""
Comparison allocators: NetShare-style proportional sharing, independent per-slice DQN
agents (MADQN) and the federated agents without a twin (FL-only state).
"""

from enum import Enum
from typing import TYPE_CHECKING, Literal, Sequence

import numpy as np
from pydantic import BaseModel, Field

from config import get_logger
from marl import Batch, Experience, ReplayBuffer, build_state
from nn_core import Network, make_optimizer, mlp
from radio_env import AllocationState

if TYPE_CHECKING:
    from federation import CommLedger

logger = get_logger(__name__)

DQN_DELTAS = (-0.10, -0.05, 0.0, 0.05, 0.10)  # fractions of the pool


class AllocatorId(str, Enum):
    DT_MAFL = "dt-mafl"
    FL_ONLY = "fl-only"
    MADQN = "madqn"
    NETSHARE = "netshare"


def netshare_allocate(demands: Sequence[float], total_rbs: int, cap: int | None = None) -> AllocationState:
    """
    w_m = max(1, floor(total·φ_m/Σφ)); spare RBs go one by one to the largest fractional
    remainders (ties to the lowest index). All-zero demand splits the pool equally.
    """
    demands = np.asarray(demands, dtype=np.float64)
    if demands.size == 0:
        raise ValueError("netshare needs at least one slice")
    if np.any(demands < 0) or not np.all(np.isfinite(demands)):
        raise ValueError(f"demands must be finite and non-negative, got {demands.tolist()}")
    cap = cap if cap is not None else total_rbs
    n = len(demands)
    if total_rbs < n:
        raise ValueError(f"pool of {total_rbs} RBs cannot give {n} slices one RB each")
    if demands.sum() == 0:
        return AllocationState.equal_split(n, total_rbs, cap)
    quotas = total_rbs * demands / demands.sum()
    grants = np.clip(np.maximum(1, np.floor(quotas)).astype(np.int64), 1, cap)
    order = np.argsort(-(quotas - np.floor(quotas)), kind="stable")
    leftover = total_rbs - int(grants.sum())
    while leftover > 0:
        open_slots = [m for m in order if grants[m] < cap]
        if not open_slots:
            break
        for m in open_slots[:leftover]:
            grants[m] += 1
        leftover = total_rbs - int(grants.sum())
    while leftover < 0:
        m = int(np.argmax(grants))
        grants[m] -= 1
        leftover += 1
    return AllocationState(tuple(int(w) for w in grants), tuple([cap] * n), total_rbs)


class DQNConfig(BaseModel):
    hidden_units: int = Field(64, ge=1)
    hidden_layers: int = Field(2, ge=1)
    gamma: float = Field(0.95, ge=0, lt=1)
    learning_rate: float = Field(0.01, ge=0)
    optimizer: Literal["sgd", "adam"] = "sgd"
    epsilon: float = Field(0.5, ge=0, le=1)
    epsilon_decay: float = Field(0.995, gt=0, le=1)
    epsilon_floor: float = Field(0.01, ge=0, le=1)
    buffer_capacity: int = Field(1000, ge=1)
    batch_size: int = Field(64, ge=1)
    learn_start: int = Field(32, ge=1)
    target_sync_steps: int = Field(100, ge=1)  # hard target copy period
    state_mode: Literal["augmented", "demand-only"] = "augmented"

    @property
    def state_dim(self) -> int:
        return 3 if self.state_mode == "augmented" else 2


def delta_rbs(action_index: int, total_rbs: int) -> int:
    """RB change of a discrete action, rounded half away from zero."""
    x = DQN_DELTAS[action_index] * total_rbs
    return int(np.sign(x) * np.floor(abs(x) + 0.5))


class DQNAgent:
    """ε-greedy Q-network over the five pool-fraction deltas, with a periodically synced target."""

    def __init__(self, cfg: DQNConfig | None = None, rng: np.random.Generator | None = None,
                 slice_id: str = "slice", init_rng: np.random.Generator | None = None):
        self.cfg = cfg if cfg is not None else DQNConfig()
        self.slice_id = slice_id
        self.rng = rng if rng is not None else np.random.default_rng(0)
        c = self.cfg
        layers = mlp(c.state_dim, c.hidden_units, c.hidden_layers, len(DQN_DELTAS))
        self.q_net = Network(layers, rng=init_rng if init_rng is not None else self.rng)
        self.target = Network(layers, params=self.q_net.params.copy())
        self.optimizer = make_optimizer(c.optimizer, c.learning_rate)
        self.buffer = ReplayBuffer(c.buffer_capacity, c.batch_size, self.rng)
        self.epsilon = c.epsilon
        self.updates = 0

    def q_values(self, state: np.ndarray) -> np.ndarray:
        return self.q_net.forward(np.asarray(state, dtype=np.float64))

    def select(self, state: np.ndarray, epsilon: float | None = None) -> int:
        epsilon = self.epsilon if epsilon is None else epsilon
        if epsilon > 0 and self.rng.random() < epsilon:
            return int(self.rng.integers(len(DQN_DELTAS)))
        return int(np.argmax(self.q_values(state)))

    def update(self, batch: Batch) -> float:
        """One step on (y - Q(s, a))² with y = R + γ max_a' Q_target(s', a')."""
        y = batch.rewards + self.cfg.gamma * self.target.forward(batch.next_states).max(axis=1)
        q = self.q_net.forward(batch.states)
        chosen = batch.actions[:, 0].astype(np.int64)
        rows = np.arange(len(batch))
        error = y - q[rows, chosen]
        upstream = np.zeros_like(q)
        upstream[rows, chosen] = -2.0 * error / len(batch)
        self.q_net.params = self.optimizer.step(self.q_net.params, self.q_net.backward(upstream))
        self.updates += 1
        if self.updates % self.cfg.target_sync_steps == 0:
            self.target.params = self.q_net.params.copy()
        return float(np.mean(error ** 2))

    def observe(self, state: np.ndarray, action_index: int, reward: float, next_state: np.ndarray) -> float | None:
        self.buffer.push(Experience(np.asarray(state, dtype=np.float64), float(action_index), float(reward),
                                    np.asarray(next_state, dtype=np.float64)))
        loss = None
        if len(self.buffer) >= min(self.cfg.learn_start, self.buffer.capacity):
            loss = self.update(self.buffer.sample())
        self.epsilon = max(self.cfg.epsilon_floor, self.epsilon * self.cfg.epsilon_decay)
        return loss


def madqn_allocate(agents: Sequence[DQNAgent], states: Sequence[np.ndarray], total_rbs: int,
                   ledger: "CommLedger | None" = None, epsilon: float | None = None) -> tuple[list[int], list[int]]:
    """
    Each agent picks a discrete delta independently. Returns (action indices, RB deltas);
    with a ledger, every agent's state and reward report to the central monitor is charged.
    """
    if len(agents) != len(states):
        raise ValueError(f"{len(agents)} agents but {len(states)} states")
    actions = [agent.select(state, epsilon) for agent, state in zip(agents, states)]
    if ledger is not None:
        for state in states:
            ledger.charge_report(scalars=len(state) + 1, messages=2)
    return actions, [delta_rbs(a, total_rbs) for a in actions]


def fl_only_state(demand_history: Sequence[float], t: int, grant_rbs: int, pool_capacity_mbps: float,
                  total_rbs: int, mode: str = "augmented") -> np.ndarray:
    """[d(t), d(t-1), w/total]: the twin's forecast replaced by the lagged actual (d(0) at t=0)."""
    if not 0 <= t < len(demand_history):
        raise ValueError(f"t={t} outside a demand history of {len(demand_history)} steps")
    lagged = demand_history[max(t - 1, 0)]
    return build_state(float(demand_history[t]), float(lagged), grant_rbs, pool_capacity_mbps, total_rbs, mode)
