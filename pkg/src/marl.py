"""
Per-slice DDPG agent: actor/critic with target copies, replay buffer and ε-uniform plus
Gaussian exploration. The action a ∈ [-1, 1] is a fraction of the maximum RB change.
"""

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal

import numpy as np
from pydantic import BaseModel, Field, model_validator

from config import get_logger
from nn_core import Network, ParamVector, blend, load_params, make_optimizer, mlp, save_params, scale_output_layer

logger = get_logger(__name__)

TRAINING_LOG_COLUMNS = ["t", "slice_id", "critic_loss", "actor_grad_norm", "epsilon"]
GAMMA_PRESETS = {"text": 0.95, "table": 0.5}


class AgentConfig(BaseModel):
    hidden_units: int = Field(64, ge=1)
    hidden_layers: int = Field(2, ge=1)  # 6 reproduces the full-size networks
    gamma: float = Field(0.95, ge=0, lt=1)
    gamma_preset: Literal["text", "table"] | None = None
    soft_update_rate: float = Field(0.01, gt=0, le=1)  # ν
    learning_rate: float = Field(0.1, ge=0)  # η
    optimizer: Literal["sgd", "adam"] = "sgd"
    epsilon: float = Field(0.5, ge=0, le=1)
    epsilon_decay: float = Field(0.995, gt=0, le=1)
    epsilon_floor: float = Field(0.01, ge=0, le=1)
    noise_std: float = Field(0.1, ge=0)
    noise_decay: float = Field(0.999, gt=0, le=1)
    max_delta_fraction: float = Field(0.1, gt=0, le=1)
    output_init_scale: float = Field(1.0, gt=0, le=1)  # actor output layer, shrunk for a near-zero start
    buffer_capacity: int = Field(1000, ge=1)
    batch_size: int = Field(64, ge=1)
    learn_start: int = Field(32, ge=1)
    state_mode: Literal["augmented", "demand-only"] = "augmented"

    @model_validator(mode="after")
    def apply_gamma_preset(self):
        if self.gamma_preset is not None:
            self.gamma = GAMMA_PRESETS[self.gamma_preset]
        return self

    @property
    def state_dim(self) -> int:
        return 3 if self.state_mode == "augmented" else 2


@dataclass(frozen=True)
class Experience:
    state: np.ndarray = field(repr=False)
    action: float
    reward: float
    next_state: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.concatenate([np.ravel(self.state), [self.action, self.reward], np.ravel(self.next_state)])
        if not np.all(np.isfinite(values)):
            raise ValueError(f"experience has non-finite entries: {self}")


@dataclass(frozen=True)
class Batch:
    states: np.ndarray
    actions: np.ndarray  # (n, 1)
    rewards: np.ndarray  # (n,)
    next_states: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)


class ReplayBuffer:
    """Ring buffer; minibatches are drawn uniformly without replacement."""

    def __init__(self, capacity: int = 1000, batch_size: int = 64, rng: np.random.Generator | None = None):
        if capacity < 1 or batch_size < 1:
            raise ValueError(f"capacity and batch size must be positive, got {capacity}, {batch_size}")
        self.capacity = capacity
        self.batch_size = batch_size
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._items: deque[Experience] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def push(self, experience: Experience) -> None:
        self._items.append(experience)

    def sample(self, n: int | None = None) -> Batch:
        if not self._items:
            raise ValueError("cannot sample from an empty replay buffer")
        n = min(n if n is not None else self.batch_size, len(self._items))
        picks = [self._items[i] for i in self.rng.choice(len(self._items), size=n, replace=False)]
        return Batch(
            states=np.stack([e.state for e in picks]),
            actions=np.array([[e.action] for e in picks]),
            rewards=np.array([e.reward for e in picks]),
            next_states=np.stack([e.next_state for e in picks]),
        )


def store_and_sample(buffer: ReplayBuffer, experience: Experience) -> Batch:
    buffer.push(experience)
    return buffer.sample()


class ActorCritic:
    """θ^π, θ^Q and their targets for one slice, plus exploration state."""

    def __init__(self, cfg: AgentConfig | None = None, rng: np.random.Generator | None = None,
                 slice_id: str = "slice", init_rng: np.random.Generator | None = None):
        """`init_rng` draws the initial weights (shared across slices for a common start); `rng` explores."""
        self.cfg = cfg if cfg is not None else AgentConfig()
        self.slice_id = slice_id
        self.rng = rng if rng is not None else np.random.default_rng(0)
        init_rng = init_rng if init_rng is not None else self.rng
        c = self.cfg
        actor_layers = mlp(c.state_dim, c.hidden_units, c.hidden_layers, 1, output_activation="tanh")
        critic_layers = mlp(c.state_dim + 1, c.hidden_units, c.hidden_layers, 1)
        self.actor = Network(actor_layers, rng=init_rng)
        self.critic = Network(critic_layers, rng=init_rng)
        if c.output_init_scale != 1.0:
            scale_output_layer(self.actor, c.output_init_scale)
        self.actor_target = Network(actor_layers, params=self.actor.params.copy())
        self.critic_target = Network(critic_layers, params=self.critic.params.copy())
        self.actor_optimizer = make_optimizer(c.optimizer, c.learning_rate)
        self.critic_optimizer = make_optimizer(c.optimizer, c.learning_rate)
        self.buffer = ReplayBuffer(c.buffer_capacity, c.batch_size, self.rng)
        self.epsilon = c.epsilon
        self.noise_std = c.noise_std

    @property
    def gamma(self) -> float:
        return self.cfg.gamma

    def parameters(self) -> ParamVector:
        """The federated model θ: actor and critic mains."""
        return ParamVector.concat([("actor", self.actor.params), ("critic", self.critic.params)])

    def targets(self) -> ParamVector:
        return ParamVector.concat([("actor", self.actor_target.params), ("critic", self.critic_target.params)])

    def load_parameters(self, params: ParamVector) -> None:
        self.parameters().check_layout(params)
        parts = params.split(["actor", "critic"])
        self.actor.params = parts["actor"]
        self.critic.params = parts["critic"]

    def load_targets(self, params: ParamVector) -> None:
        self.targets().check_layout(params)
        parts = params.split(["actor", "critic"])
        self.actor_target.params = parts["actor"]
        self.critic_target.params = parts["critic"]

    def policy(self, state: np.ndarray) -> float:
        return float(self.actor.forward(np.asarray(state, dtype=np.float64))[0])

    def decay_exploration(self) -> None:
        self.epsilon = max(self.cfg.epsilon_floor, self.epsilon * self.cfg.epsilon_decay)
        self.noise_std *= self.cfg.noise_decay

    def learn(self) -> tuple[float, float] | None:
        """One critic step, one actor step and a soft target update, once the buffer is warm."""
        if len(self.buffer) < min(self.cfg.learn_start, self.buffer.capacity):
            return None
        batch = self.buffer.sample()
        loss = critic_update(self, batch)
        grad_norm = actor_update(self, batch)
        soft_update(self)
        return loss, grad_norm

    def save_checkpoint(self, directory: str | Path) -> Path:
        directory = Path(directory)
        save_params(self.parameters(), directory / f"{self.slice_id}.main.params")
        save_params(self.targets(), directory / f"{self.slice_id}.target.params")
        return directory

    def load_checkpoint(self, directory: str | Path) -> None:
        directory = Path(directory)
        self.load_parameters(load_params(directory / f"{self.slice_id}.main.params"))
        self.load_targets(load_params(directory / f"{self.slice_id}.target.params"))


def select_action(agent: ActorCritic, state: np.ndarray, epsilon: float | None = None,
                  noise_std: float | None = None) -> float:
    """ε-uniform on [-1, 1], otherwise π(s) plus Gaussian noise, clipped to [-1, 1]."""
    epsilon = agent.epsilon if epsilon is None else epsilon
    noise_std = agent.noise_std if noise_std is None else noise_std
    if not 0 <= epsilon <= 1:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    if epsilon > 0 and agent.rng.random() < epsilon:
        return float(agent.rng.uniform(-1.0, 1.0))
    action = agent.policy(state)
    if noise_std > 0:
        action += float(agent.rng.normal(0.0, noise_std))
    return float(np.clip(action, -1.0, 1.0))


def action_to_delta(action: float, total_rbs: int, max_delta_fraction: float = 0.1) -> int:
    """Δw = a·Δmax RBs, rounded half away from zero."""
    x = float(np.clip(action, -1.0, 1.0)) * max_delta_fraction * total_rbs
    return int(np.sign(x) * np.floor(abs(x) + 0.5))


def build_state(demand_mbps: float, forecast_mbps: float, grant_rbs: int, pool_capacity_mbps: float,
                total_rbs: int, mode: str = "augmented") -> np.ndarray:
    """[d/C, d̂/C, w/total] with C the pool capacity; "demand-only" drops the allocation share."""
    state = [demand_mbps / pool_capacity_mbps, forecast_mbps / pool_capacity_mbps]
    if mode == "augmented":
        state.append(grant_rbs / total_rbs)
    elif mode != "demand-only":
        raise ValueError(f"Unknown state mode '{mode}'")
    return np.asarray(state, dtype=np.float64)


def _critic_input(states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return np.concatenate([states, actions], axis=1)


def td_targets(agent: ActorCritic, batch: Batch) -> np.ndarray:
    """y = R + γ Q'(s', π'(s'))."""
    next_actions = agent.actor_target.forward(batch.next_states)
    next_q = agent.critic_target.forward(_critic_input(batch.next_states, next_actions))[:, 0]
    return batch.rewards + agent.gamma * next_q


def critic_update(agent: ActorCritic, batch: Batch) -> float:
    if len(batch) == 0:
        raise ValueError("critic update needs a non-empty batch")
    y = td_targets(agent, batch)
    q = agent.critic.forward(_critic_input(batch.states, batch.actions))[:, 0]
    error = y - q
    loss = float(np.mean(error ** 2))
    grad = agent.critic.backward((-2.0 * error / len(batch))[:, None])
    agent.critic.params = agent.critic_optimizer.step(agent.critic.params, grad)
    return loss


ActionGradient = Callable[[np.ndarray, np.ndarray], np.ndarray]


def policy_gradient(agent: ActorCritic, states: np.ndarray,
                    action_gradient: ActionGradient | None = None) -> ParamVector:
    """∇_θπ of (1/n) Σ Q(s, π(s)); `action_gradient(states, actions)` replaces ∂Q/∂a when given."""
    n = len(states)
    actions = agent.actor.forward(states)
    if action_gradient is None:
        agent.critic.forward(_critic_input(states, actions))
        agent.critic.backward(np.ones((n, 1)))
        dq_da = agent.critic.input_grad[:, -1:]
    else:
        dq_da = np.asarray(action_gradient(states, actions), dtype=np.float64).reshape(n, 1)
    return agent.actor.backward(dq_da / n)


def actor_update(agent: ActorCritic, batch: Batch, action_gradient: ActionGradient | None = None) -> float:
    """Gradient ascent on the critic's value of the policy; returns the policy-gradient norm."""
    if len(batch) == 0:
        raise ValueError("actor update needs a non-empty batch")
    ascent = policy_gradient(agent, batch.states, action_gradient)
    descent = ParamVector(-ascent.values, ascent.layout)
    agent.actor.params = agent.actor_optimizer.step(agent.actor.params, descent)
    return ascent.norm()


def soft_update(agent: ActorCritic, rate: float | None = None) -> None:
    """θ' ← ν·θ + (1-ν)·θ' for actor and critic."""
    rate = agent.cfg.soft_update_rate if rate is None else rate
    if not 0 < rate <= 1:
        raise ValueError(f"soft update rate must lie in (0, 1], got {rate}")
    agent.actor_target.params = blend(agent.actor_target.params, agent.actor.params, rate)
    agent.critic_target.params = blend(agent.critic_target.params, agent.critic.params, rate)


def observe_transition(agent: ActorCritic, state: np.ndarray, action: float, reward: float,
                       next_state: np.ndarray) -> tuple[float, float] | None:
    """Store ⟨s, a, R, s'⟩, learn from a minibatch and decay exploration."""
    agent.buffer.push(Experience(np.asarray(state, dtype=np.float64), float(action), float(reward),
                                 np.asarray(next_state, dtype=np.float64)))
    result = agent.learn()
    agent.decay_exploration()
    return result
