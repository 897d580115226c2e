import numpy as np
import pytest

from nn_core import (Adam, LayoutMismatchError, Network, ParamVector, ShapeMismatchError, activation, blend,
                     conv1d, dense, finite_difference_gradient, grad_check, load_params, make_optimizer, mlp,
                     param_layout, relative_error, save_params, scale_output_layer, sgd_step, softmax_layer,
                     weighted_average)

SEEDS = range(10)


def fixed_network(layers, values) -> Network:
    return Network(layers, params=ParamVector(np.asarray(values, dtype=float), param_layout(layers)))


def test_identity_dense_layer():
    net = fixed_network([dense(2, 2)], [1, 0, 0, 1, 0, 0])
    np.testing.assert_array_equal(net.forward(np.array([3.0, 4.0])), [3.0, 4.0])


def test_relu_and_softmax_examples():
    np.testing.assert_array_equal(Network([activation("relu")]).forward(np.array([-1.0, 2.0])), [0.0, 2.0])
    np.testing.assert_allclose(Network([softmax_layer()]).forward(np.array([0.0, 0.0])), [0.5, 0.5])


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_is_a_distribution(seed):
    x = np.random.default_rng(seed).normal(scale=5.0, size=(6, 7))
    out = Network([softmax_layer()]).forward(x)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
    assert np.all((out > 0) & (out < 1))


def test_shape_mismatch_names_the_layer():
    net = Network([dense(3, 4), activation("tanh"), dense(5, 1)])
    with pytest.raises(ShapeMismatchError, match="layer 2"):
        net.forward(np.ones((2, 3)))


def test_conv_kernel_longer_than_sequence():
    with pytest.raises(ShapeMismatchError, match="kernel width"):
        Network([conv1d(1, 2, 5)]).forward(np.ones((1, 1, 3)))


def test_conv_keeps_sequence_length():
    net = Network([conv1d(2, 3, 3)], rng=np.random.default_rng(0))
    assert net.forward(np.ones((4, 2, 9))).shape == (4, 3, 9)


def test_forward_is_deterministic():
    net = Network(mlp(3, 8, 2, 2), rng=np.random.default_rng(1))
    x = np.random.default_rng(2).normal(size=(5, 3))
    assert net.forward(x).tobytes() == net.forward(x).tobytes()


def test_dense_backward_is_the_input():
    net = fixed_network([dense(1, 1)], [0.7, 0.0])
    net.forward(np.array([[2.0]]))
    grads = net.backward(np.array([[1.0]])).arrays()
    np.testing.assert_array_equal(grads["0.W"], [[2.0]])
    np.testing.assert_array_equal(grads["0.b"], [1.0])


def test_tanh_backward_at_zero():
    net = fixed_network([dense(1, 1), activation("tanh")], [0.0, 0.0])
    net.forward(np.array([[1.0]]))
    assert net.backward(np.array([[1.0]])).arrays()["0.W"][0, 0] == pytest.approx(1.0)


def test_backward_requires_forward():
    with pytest.raises(RuntimeError):
        Network([dense(2, 1)]).backward(np.ones((1, 1)))


def test_backward_checks_upstream_shape():
    net = Network([dense(2, 3)])
    net.forward(np.ones((4, 2)))
    with pytest.raises(ShapeMismatchError):
        net.backward(np.ones((4, 2)))


def test_input_gradient_of_linear_layer():
    net = fixed_network([dense(2, 1)], [2.0, -3.0, 0.5])
    net.forward(np.array([1.0, 1.0]))
    net.backward(np.array([1.0]))
    np.testing.assert_allclose(net.input_grad, [2.0, -3.0])


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("kind", ["tanh", "sigmoid", "leaky_relu", "relu"])
def test_dense_gradients_match_finite_differences(kind, seed):
    rng = np.random.default_rng(seed)
    net = Network([dense(3, 4), activation(kind), dense(4, 2)], rng=rng)
    report = grad_check(net, rng.normal(size=(5, 3)), seed=seed)
    assert report.passed, report.max_error


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = Network([conv1d(2, 3, 3), activation("tanh"), conv1d(3, 1, 3)], rng=rng)
    report = grad_check(net, rng.normal(size=(2, 2, 6)), seed=seed)
    assert report.passed, report.max_error


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = Network([dense(3, 4), softmax_layer()], rng=rng)
    assert grad_check(net, rng.normal(size=(3, 3)), seed=seed).passed


def test_grad_check_twenty_parameter_tanh_network():
    net = Network(mlp(3, 4, 1, 1, hidden_activation="tanh"), rng=np.random.default_rng(3))
    assert len(net.params) == 21
    report = grad_check(net, np.random.default_rng(4).normal(size=(4, 3)))
    assert report.passed and report.max_error < 1e-4


def test_grad_check_catches_a_sign_flip():
    net = Network([dense(3, 4), activation("tanh"), dense(4, 1)], rng=np.random.default_rng(5))
    backward = net.backward

    def flipped(upstream):
        grad = backward(upstream)
        return ParamVector(-grad.values, grad.layout)

    net.backward = flipped
    assert not grad_check(net, np.random.default_rng(6).normal(size=(4, 3))).passed


def test_finite_difference_of_quadratic():
    values = np.array([1.0, -2.0, 0.5])
    numeric = finite_difference_gradient(lambda v: float(np.sum(v ** 2)), values)
    np.testing.assert_allclose(numeric, 2 * values, rtol=1e-8)


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([0.0]))[0] == 0.0
    assert relative_error(np.array([1.0]), np.array([1.0]))[0] == 0.0


@pytest.mark.parametrize("params,grad,rate,expected", [
    ([1.0], [2.0], 0.1, [0.8]),
    ([1.0, 2.0], [0.0, 0.0], 0.1, [1.0, 2.0]),
    ([0.0, 0.0], [1.0, -1.0], 0.1, [-0.1, 0.1]),
    ([3.0, -4.0], [5.0, 6.0], 0.0, [3.0, -4.0]),
])
def test_sgd_step(params, grad, rate, expected):
    layout = (("0.W", (len(params),)),)
    out = sgd_step(ParamVector(np.array(params), layout), ParamVector(np.array(grad), layout), rate)
    np.testing.assert_allclose(out.values, expected)


def test_sgd_step_rejects_layout_mismatch():
    a = ParamVector(np.zeros(2), (("0.W", (2,)),))
    b = ParamVector(np.zeros(2), (("0.b", (2,)),))
    with pytest.raises(LayoutMismatchError):
        sgd_step(a, b, 0.1)


def test_param_vector_length_must_match_layout():
    with pytest.raises(LayoutMismatchError):
        ParamVector(np.zeros(3), (("0.W", (2,)),))


def test_adam_minimises_a_quadratic():
    layout = (("x", (1,)),)
    params = ParamVector(np.array([1.0]), layout)
    optimizer = make_optimizer("adam", 0.05)
    assert isinstance(optimizer, Adam)
    for _ in range(500):
        params = optimizer.step(params, ParamVector(2 * params.values, layout))
    assert abs(params.values[0]) < 0.1


def test_unknown_optimizer():
    with pytest.raises(ValueError):
        make_optimizer("rmsprop", 0.1)


def test_blend_and_weighted_average():
    layout = (("w", (2,)),)
    zeros, ones = ParamVector(np.zeros(2), layout), ParamVector(np.ones(2), layout)
    np.testing.assert_allclose(blend(zeros, ones, 0.1).values, [0.1, 0.1])
    np.testing.assert_allclose(weighted_average([zeros, ones], [0.25, 0.75]).values, [0.75, 0.75])
    with pytest.raises(ValueError):
        weighted_average([], [])


def test_concat_then_split():
    actor = Network(mlp(3, 4, 1, 1), rng=np.random.default_rng(0)).params
    critic = Network(mlp(4, 4, 1, 1), rng=np.random.default_rng(1)).params
    joined = ParamVector.concat([("actor", actor), ("critic", critic)])
    parts = joined.split(["actor", "critic"])
    assert parts["actor"].layout == actor.layout
    np.testing.assert_array_equal(parts["critic"].values, critic.values)


def test_checkpoint_keeps_layout_and_bits(tmp_path):
    params = Network(mlp(3, 5, 2, 1), rng=np.random.default_rng(9)).params
    restored = load_params(save_params(params, tmp_path / "ckpt" / "actor.params"))
    assert restored.layout == params.layout
    assert restored.values.tobytes() == params.values.tobytes()


def test_scale_output_layer_only_touches_the_last_dense():
    net = Network(mlp(3, 8, 2, 1, output_activation="tanh"), rng=np.random.default_rng(0))
    before = {name: view.copy() for name, view in net.params.arrays().items()}
    scale_output_layer(net, 0.01)
    after = net.params.arrays()
    for name, view in before.items():
        expected = view * 0.01 if name.startswith("4.") else view
        np.testing.assert_allclose(after[name], expected)
    with pytest.raises(ValueError):
        scale_output_layer(net, 0.0)
