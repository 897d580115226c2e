import numpy as np
import pytest

from marl import (ActorCritic, AgentConfig, Batch, Experience, ReplayBuffer, action_to_delta, actor_update,
                  build_state, critic_update, observe_transition, policy_gradient, select_action, soft_update,
                  store_and_sample, td_targets)
from nn_core import ParamVector, finite_difference_gradient, relative_error

TINY = dict(hidden_units=8, hidden_layers=2, batch_size=8, learn_start=4, buffer_capacity=50)


def tiny_agent(seed=0, **overrides) -> ActorCritic:
    return ActorCritic(AgentConfig(**{**TINY, **overrides}), np.random.default_rng(seed))


def constant_params(network, value: float) -> ParamVector:
    """All weights zero, output bias `value`: the network outputs `value` everywhere."""
    params = ParamVector.zeros(network.layout)
    params.arrays()[f"{len(network.layers) - 1}.b"][...] = value
    return params


def experience(i: float, dim: int = 3) -> Experience:
    return Experience(np.full(dim, 0.1 * i), 0.0, float(i), np.full(dim, 0.1 * i + 0.05))


def random_batch(rng, n=8, dim=3) -> Batch:
    return Batch(states=rng.uniform(size=(n, dim)), actions=rng.uniform(-1, 1, size=(n, 1)),
                 rewards=rng.uniform(size=n), next_states=rng.uniform(size=(n, dim)))


def test_gamma_presets():
    assert AgentConfig().gamma == 0.95
    assert AgentConfig(gamma_preset="table").gamma == 0.5
    assert AgentConfig(state_mode="demand-only").state_dim == 2


def test_full_exploration_is_uniform():
    agent = tiny_agent()
    actions = np.array([select_action(agent, np.zeros(3), epsilon=1.0) for _ in range(10_000)])
    assert np.all((actions >= -1) & (actions <= 1))
    assert abs(actions.mean()) < 0.05


def test_greedy_action_is_the_policy():
    agent = tiny_agent(1)
    state = np.array([0.2, 0.3, 0.1])
    first = select_action(agent, state, epsilon=0.0, noise_std=0.0)
    assert first == agent.policy(state)
    assert select_action(agent, state, epsilon=0.0, noise_std=0.0) == first


def test_noisy_actions_stay_in_range():
    agent = tiny_agent(2)
    actions = [select_action(agent, np.ones(3), epsilon=0.0, noise_std=5.0) for _ in range(500)]
    assert all(-1 <= a <= 1 for a in actions)


def test_epsilon_out_of_range():
    with pytest.raises(ValueError):
        select_action(tiny_agent(), np.zeros(3), epsilon=1.5)


@pytest.mark.parametrize("action,expected", [(0.0, 0), (1.0, 5), (-1.0, -5), (0.5, 3), (-0.5, -3), (2.0, 5)])
def test_action_to_delta(action, expected):
    assert action_to_delta(action, 50, 0.1) == expected


def test_build_state_modes():
    np.testing.assert_allclose(build_state(18.0, 9.0, 25, 36.0, 50), [0.5, 0.25, 0.5])
    np.testing.assert_allclose(build_state(18.0, 9.0, 25, 36.0, 50, mode="demand-only"), [0.5, 0.25])
    with pytest.raises(ValueError):
        build_state(1.0, 1.0, 1, 36.0, 50, mode="full")


def test_td_target_arithmetic():
    agent = tiny_agent(gamma=0.5)
    agent.critic_target.params = constant_params(agent.critic_target, 2.0)
    batch = Batch(states=np.zeros((1, 3)), actions=np.zeros((1, 1)), rewards=np.array([1.0]),
                  next_states=np.zeros((1, 3)))
    np.testing.assert_allclose(td_targets(agent, batch), [2.0])


def test_zero_discount_is_a_bandit(rng):
    agent = tiny_agent(gamma=0.0)
    batch = random_batch(rng)
    np.testing.assert_allclose(td_targets(agent, batch), batch.rewards)


def test_perfect_critic_has_zero_loss_and_gradient(rng):
    agent = tiny_agent(gamma=0.5)
    agent.critic.params = constant_params(agent.critic, 1.0)
    agent.critic_target.params = constant_params(agent.critic_target, 1.0)
    batch = random_batch(rng)
    batch = Batch(batch.states, batch.actions, np.full(len(batch), 0.5), batch.next_states)
    before = agent.critic.params.values.copy()
    assert critic_update(agent, batch) == 0.0
    np.testing.assert_array_equal(agent.critic.params.values, before)


def test_critic_loss_is_non_negative(rng):
    agent = tiny_agent(3)
    for _ in range(10):
        assert critic_update(agent, random_batch(rng)) >= 0.0


def test_actor_follows_a_quadratic_critic():
    agent = tiny_agent(4, learning_rate=0.02)
    target_action = 0.3
    states = np.random.default_rng(5).uniform(size=(4, 3))
    batch = Batch(states, np.zeros((4, 1)), np.zeros(4), states)

    def dq_da(_, actions):
        return -2.0 * (actions - target_action)

    for _ in range(500):
        actor_update(agent, batch, action_gradient=dq_da)
    assert np.all(np.abs(agent.actor.forward(states)[:, 0] - target_action) < 0.05)


def test_zero_action_gradient_leaves_actor(rng):
    agent = tiny_agent(6)
    before = agent.actor.params.values.copy()
    actor_update(agent, random_batch(rng), action_gradient=lambda s, a: np.zeros_like(a))
    np.testing.assert_array_equal(agent.actor.params.values, before)


@pytest.mark.parametrize("seed", range(5))
def test_policy_gradient_matches_finite_differences(seed):
    agent = ActorCritic(AgentConfig(hidden_units=4, hidden_layers=1), np.random.default_rng(seed))
    states = np.random.default_rng(50 + seed).uniform(size=(5, 3))
    analytic = policy_gradient(agent, states).values.copy()
    original = agent.actor.params

    def mean_q(values):
        agent.actor.params = ParamVector(values, original.layout)
        actions = agent.actor.forward(states)
        return float(np.mean(agent.critic.forward(np.concatenate([states, actions], axis=1))))

    try:
        numeric = finite_difference_gradient(mean_q, original.values)
    finally:
        agent.actor.params = original
    assert relative_error(analytic, numeric).max() < 1e-4


def test_soft_update_examples():
    agent = tiny_agent(7)
    agent.actor.params = ParamVector(np.ones(len(agent.actor.params)), agent.actor.layout)
    agent.actor_target.params = ParamVector.zeros(agent.actor.layout)
    soft_update(agent, 0.1)
    np.testing.assert_allclose(agent.actor_target.params.values, 0.1)
    soft_update(agent, 1.0)
    np.testing.assert_array_equal(agent.actor_target.params.values, agent.actor.params.values)
    np.testing.assert_array_equal(agent.critic_target.params.values, agent.critic.params.values)
    with pytest.raises(ValueError):
        soft_update(agent, 0.0)


def test_targets_contract_towards_frozen_mains(rng):
    agent = tiny_agent(8, soft_update_rate=0.2)
    agent.load_parameters(ParamVector(rng.normal(size=len(agent.parameters())), agent.parameters().layout))
    gap = np.linalg.norm(agent.targets().values - agent.parameters().values)
    for _ in range(20):
        soft_update(agent)
        new_gap = np.linalg.norm(agent.targets().values - agent.parameters().values)
        assert new_gap <= 0.8 * gap + 1e-12
        gap = new_gap


def test_buffer_evicts_the_oldest():
    buffer = ReplayBuffer(capacity=1000, batch_size=64)
    for i in range(1001):
        buffer.push(experience(i))
    assert len(buffer) == 1000
    assert min(buffer.sample(1000).rewards) == 1.0


def test_small_buffer_gives_a_short_batch():
    buffer = ReplayBuffer(capacity=100, batch_size=64)
    for i in range(9):
        buffer.push(experience(i))
    batch = store_and_sample(buffer, experience(9))
    assert len(batch) == 10
    assert batch.actions.shape == (10, 1)
    assert sorted(batch.rewards) == list(range(10))


def test_buffer_samples_uniformly():
    buffer = ReplayBuffer(capacity=10, batch_size=1, rng=np.random.default_rng(9))
    for i in range(10):
        buffer.push(experience(i))
    counts = np.bincount([int(buffer.sample().rewards[0]) for _ in range(10_000)], minlength=10)
    assert np.all(np.abs(counts - 1000) <= 150)


def test_empty_buffer_cannot_sample():
    with pytest.raises(ValueError):
        ReplayBuffer().sample()


def test_experience_must_be_finite():
    with pytest.raises(ValueError):
        Experience(np.zeros(3), float("nan"), 0.0, np.zeros(3))


def test_observe_transition_waits_for_a_warm_buffer():
    agent = tiny_agent(10)
    results = [observe_transition(agent, np.full(3, 0.1 * i), 0.1, 0.5, np.full(3, 0.1 * i + 0.1))
               for i in range(6)]
    assert results[:3] == [None, None, None]
    loss, grad_norm = results[-1]
    assert loss >= 0 and grad_norm >= 0
    assert agent.epsilon == pytest.approx(0.5 * 0.995 ** 6)


def test_exploration_decay_has_a_floor():
    agent = tiny_agent(epsilon=0.02, epsilon_decay=0.5, epsilon_floor=0.01)
    for _ in range(5):
        agent.decay_exploration()
    assert agent.epsilon == 0.01


def test_shared_initialisation_across_slices():
    init_seed = 11
    a = ActorCritic(AgentConfig(**TINY), np.random.default_rng(1), "a", init_rng=np.random.default_rng(init_seed))
    b = ActorCritic(AgentConfig(**TINY), np.random.default_rng(2), "b", init_rng=np.random.default_rng(init_seed))
    np.testing.assert_array_equal(a.parameters().values, b.parameters().values)
    np.testing.assert_array_equal(a.targets().values, a.parameters().values)


def test_checkpoint_restores_mains_and_targets(tmp_path):
    agent = tiny_agent(12)
    soft_update(agent, 0.5)
    agent.actor.params = ParamVector(agent.actor.params.values + 1.0, agent.actor.layout)
    agent.save_checkpoint(tmp_path)
    other = tiny_agent(13)
    other.slice_id = agent.slice_id
    other.load_checkpoint(tmp_path)
    np.testing.assert_array_equal(other.parameters().values, agent.parameters().values)
    np.testing.assert_array_equal(other.targets().values, agent.targets().values)


def test_small_output_init_starts_near_a_zero_action(rng):
    full = tiny_agent(5)
    small = tiny_agent(5, output_init_scale=0.01)
    states = rng.uniform(size=(20, 3))
    full_actions = np.abs(full.actor.forward(states))
    small_actions = np.abs(small.actor.forward(states))
    assert np.all(small_actions < 0.05)
    assert small_actions.max() < full_actions.max()
    np.testing.assert_array_equal(small.targets().values, small.parameters().values)
