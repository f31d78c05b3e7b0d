import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lungnet.nn import (
    SGD,
    Adam,
    Concat,
    Conv1D,
    Conv2D,
    Dense,
    Flatten,
    MaxPool1D,
    MaxPool2D,
    ModelFileError,
    ModelGraph,
    NumericError,
    ReLU,
    Reshape,
    ShapeError,
    Softmax,
    adam_step,
    count_cost,
    cross_entropy,
    load_model,
    save_model,
    sgd_step,
    softmax,
)

import oracles

# one tiny graph per layer kind: (layers, input shape, aux ports)
KIND_CASES = {
    "Conv1D": ([Conv1D(3, 3, stride=2)], (2, 9), None),
    "Conv2D": ([Conv2D(3, (2, 3), stride=(1, 2))], (2, 5, 6), None),
    "MaxPool1D": ([MaxPool1D(2)], (2, 8), None),
    "MaxPool1D-overlap": ([MaxPool1D(3, stride=1)], (2, 7), None),
    "MaxPool2D": ([MaxPool2D((2, 2))], (2, 4, 6), None),
    "MaxPool2D-overlap": ([MaxPool2D((2, 2), stride=(1, 1))], (1, 4, 5), None),
    "Dense": ([Dense(4)], (7,), None),
    "ReLU": ([ReLU()], (6,), None),
    "Softmax": ([Softmax()], (5,), None),
    "Flatten": ([Flatten()], (2, 3, 2), None),
    "Reshape": ([Reshape((1, 2, -1))], (2, 6), None),
    "Concat": ([Concat("d", 3)], (4,), {"d": 3}),
}


def toy_model(dtype=np.float64):
    layers = [
        Conv1D(3, 5),
        ReLU(),
        Conv1D(3, 3),
        ReLU(),
        MaxPool1D(4),
        Reshape((1, 3, -1)),
        Conv2D(2, (2, 3)),
        ReLU(),
        MaxPool2D((1, 2)),
        Flatten(),
        Concat("d", 4),
        Dense(6),
        ReLU(),
        Dense(3),
        Softmax(),
    ]
    return ModelGraph(layers, (1, 64), {"d": 4}, dtype)


def randomize_biases(g, rng):
    # zero biases put all-zero receptive fields exactly on a ReLU kink
    for p in g.params:
        if "b" in p:
            p["b"][:] = rng.standard_normal(p["b"].shape) * 0.1
    return g


def random_inputs(g, rng, batch=2):
    x = rng.standard_normal((batch,) + g.input_shape)
    aux = {k: rng.standard_normal((batch, w)) for k, w in g.aux_ports.items()}
    return x, aux


def test_conv1d_scalar_weight():
    g = ModelGraph([Conv1D(1, 1)], (1, 3), dtype=np.float64)
    g.params[0]["W"][:] = 2.0
    y = g.forward(np.array([[[1.0, 2.0, 3.0]]]))
    np.testing.assert_array_equal(y, [[[2.0, 4.0, 6.0]]])


def test_softmax_uniform():
    g = ModelGraph([Softmax()], (5,), dtype=np.float64)
    np.testing.assert_allclose(g.forward(np.zeros((1, 5))), np.full((1, 5), 0.2), atol=1e-15)


def test_three_layer_graph_matches_naive_loops():
    rng = np.random.default_rng(42)
    g = ModelGraph([Conv1D(3, 4, stride=2), ReLU(), MaxPool1D(2), Flatten(), Dense(5)], (2, 21), dtype=np.float64)
    g.initialize(seed=3)
    for p in g.params:
        if "b" in p:
            p["b"][:] = rng.standard_normal(p["b"].shape)
    x = rng.standard_normal((3, 2, 21))
    ref = oracles.naive_conv1d(x, g.params[0]["W"], g.params[0]["b"], stride=2)
    ref = oracles.naive_relu(ref)
    ref = oracles.naive_maxpool1d(ref, 2)
    ref = oracles.naive_dense(ref.reshape(3, -1), g.params[4]["W"], g.params[4]["b"])
    np.testing.assert_allclose(g.forward(x), ref, rtol=0, atol=1e-10)


def test_conv2d_and_pool2d_match_naive_loops():
    rng = np.random.default_rng(1)
    g = ModelGraph([Conv2D(3, (2, 3), stride=(1, 2)), MaxPool2D((2, 2))], (2, 7, 9), dtype=np.float64).initialize(5)
    g.params[0]["b"][:] = rng.standard_normal(3)
    x = rng.standard_normal((2, 2, 7, 9))
    ref = oracles.naive_conv2d(x, g.params[0]["W"], g.params[0]["b"], (1, 2))
    ref = oracles.naive_maxpool2d(ref, (2, 2))
    np.testing.assert_allclose(g.forward(x), ref, rtol=0, atol=1e-10)


def test_overlapping_pool_matches_naive():
    x = np.random.default_rng(2).standard_normal((2, 3, 11))
    g = ModelGraph([MaxPool1D(3, stride=2)], (3, 11), dtype=np.float64)
    np.testing.assert_array_equal(g.forward(x), oracles.naive_maxpool1d(x, 3, 2))


def test_maxpool_kernel_one_is_identity():
    x = np.random.default_rng(3).standard_normal((2, 3, 4, 5))
    g = ModelGraph([MaxPool2D((1, 1))], (3, 4, 5), dtype=np.float64)
    np.testing.assert_array_equal(g.forward(x), x)
    g1 = ModelGraph([MaxPool1D(1)], (3, 5), dtype=np.float64)
    np.testing.assert_array_equal(g1.forward(x[:, :, 0, :]), x[:, :, 0, :])
    np.testing.assert_array_equal(g1.backward(np.ones((2, 3, 5))).input, np.ones((2, 3, 5)))


def test_softmax_matches_naive():
    z = np.random.default_rng(4).standard_normal((4, 6)) * 30
    np.testing.assert_allclose(softmax(z), oracles.naive_softmax(z), rtol=1e-12)


@pytest.mark.parametrize("kind", sorted(KIND_CASES))
def test_gradient_per_layer_kind(kind):
    layers, shape, aux_ports = KIND_CASES[kind]
    for seed in range(5):
        rng = np.random.default_rng(seed)
        g = randomize_biases(ModelGraph(layers, shape, aux_ports, np.float64).initialize(seed), rng)
        x, aux = random_inputs(g, rng)
        errs = oracles.gradcheck(g, x, aux, seed=seed)
        assert max(errs.values()) < 1e-4, errs


def test_gradient_composed_model():
    rng = np.random.default_rng(0)
    g = randomize_biases(toy_model().initialize(0), rng)
    x, aux = random_inputs(g, rng)
    errs = oracles.gradcheck(g, x, aux)
    assert max(errs.values()) < 1e-4, errs
    assert {"input", "aux.d"} <= set(errs)


def test_dense_gradient_closed_form():
    # quadratic loss 0.5 * ||XW + b - T||^2: dW = X^T (XW + b - T), db = column sums
    rng = np.random.default_rng(9)
    X, T = rng.standard_normal((6, 4)), rng.standard_normal((6, 3))
    g = ModelGraph([Dense(3)], (4,), dtype=np.float64).initialize(1)
    W, b = g.params[0]["W"], g.params[0]["b"]
    delta = g.forward(X) - T
    grads = g.backward(delta)
    np.testing.assert_allclose(grads.params[0]["W"], X.T @ (X @ W + b - T), atol=1e-12)
    np.testing.assert_allclose(grads.params[0]["b"], (X @ W + b - T).sum(axis=0), atol=1e-12)
    np.testing.assert_allclose(grads.input, delta @ W.T, atol=1e-12)


def test_zero_loss_grad_gives_zero_gradients():
    g = toy_model().initialize(1)
    x, aux = random_inputs(g, np.random.default_rng(1))
    out = g.forward(x, aux)
    grads = g.backward(np.zeros_like(out))
    for p in grads.params:
        for v in p.values():
            assert not np.any(v)
    assert not np.any(grads.input) and not np.any(grads.aux["d"])


def test_backward_without_forward():
    with pytest.raises(RuntimeError, match="cached forward"):
        toy_model().backward(np.zeros((1, 3)))


def test_shape_mismatch_names_layer():
    with pytest.raises(ShapeError, match="layer 1 .Conv1D."):
        ModelGraph([Conv1D(2, 3), Conv1D(2, 50)], (1, 20))
    g = ModelGraph([Dense(2)], (4,))
    with pytest.raises(ShapeError, match="graph expects"):
        g.forward(np.zeros((1, 5)))


def test_non_finite_names_layer():
    g = ModelGraph([Dense(2), ReLU()], (2,), dtype=np.float64)
    g.params[0]["W"][:] = np.inf
    with pytest.raises(NumericError, match="layer 0 .Dense."):
        g.forward(np.ones((1, 2)))


def test_forward_deterministic():
    g = toy_model(np.float32).initialize(2)
    x, aux = random_inputs(g, np.random.default_rng(2), batch=4)
    a = g.forward(x, aux)
    b = g.forward(x, aux)
    assert a.tobytes() == b.tobytes()


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 12)), elements=st.floats(-1e4, 1e4)))
def test_softmax_sums_to_one(z):
    p = softmax(z)
    assert np.all(p >= 0) and np.all(p <= 1)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


# -- optimizers and loss


def test_sgd_step():
    params = [{"w": np.array([1.0])}]
    sgd_step(params, [{"w": np.array([2.0])}], lr=0.1)
    assert params[0]["w"][0] == pytest.approx(0.8)
    sgd_step(params, [{"w": np.array([0.0])}], lr=0.1)
    assert params[0]["w"][0] == pytest.approx(0.8)


@pytest.mark.parametrize("g", [1e-6, -0.3, 5.0, -2e3])
def test_adam_first_step_has_magnitude_lr(g):
    # t=1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
    lr = 1e-3
    params = [{"w": np.array([0.5])}]
    adam_step(params, [{"w": np.array([g])}], lr=lr)
    expected = 0.5 - lr * g / (abs(g) + 1e-8)
    assert params[0]["w"][0] == pytest.approx(expected, rel=1e-12)
    assert abs(params[0]["w"][0] - 0.5) == pytest.approx(lr, rel=1e-2)


def test_adam_deterministic_and_continues():
    def run():
        opt = Adam(lr=0.01)
        p = [{"w": np.array([1.0, -1.0])}]
        for t in range(5):
            opt.step(p, [{"w": np.array([0.1 * t, 1.0])}])
        return p[0]["w"]

    np.testing.assert_array_equal(run(), run())


def test_optimizer_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        SGD(0.1).step([{"w": np.zeros(2)}], [{"w": np.zeros(3)}])
    with pytest.raises(ValueError, match="names"):
        Adam().step([{"w": np.zeros(2)}], [{"v": np.zeros(2)}])


def test_cross_entropy_gradient_fd():
    rng = np.random.default_rng(5)
    z = rng.standard_normal((4, 3))
    y = np.array([0, 2, 1, 2])
    w = np.array([1.0, 2.0, 0.5])
    _, grad = cross_entropy(z, y, w)
    num = oracles.central_diff(lambda: cross_entropy(z, y, w)[0], z)
    assert oracles.max_rel_error(grad, num) < 1e-6


def test_cross_entropy_value():
    z = np.log(np.array([[0.5, 0.25, 0.25]]))
    loss, _ = cross_entropy(z, [0])
    assert loss == pytest.approx(np.log(2))


# -- cost accounting


def test_cost_dense_hand_count():
    c = count_cost([Dense(5)], (10,))
    assert (c.total_params, c.total_flops) == (55, 105)


def test_cost_relu_hand_count():
    c = count_cost([ReLU()], (1, 220500))
    assert (c.total_params, c.total_flops) == (0, 220500)


def test_cost_conv1d_hand_count():
    # k=3, Cin=2, Cout=4, Lout=8: params 3*2*4+4 = 28; FLOPs 2*3*2*4*8 + 4*8 = 416
    c = count_cost([Conv1D(4, 3)], (2, 10))
    assert (c.total_params, c.total_flops) == (28, 416)


def test_cost_conv2d_and_pool_hand_count():
    # Conv2D 2->3, k 2x2 on 4x5: out 3x3x4, params 2*2*2*3+3 = 27, FLOPs 2*4*2*3*12 + 36 = 612
    c = count_cost([Conv2D(3, (2, 2)), MaxPool2D((1, 2))], (2, 4, 5))
    assert [r.params for r in c.layers] == [27, 0]
    assert [r.flops for r in c.layers] == [612, 3 * 3 * 2]


def test_cost_matches_graph_parameter_count():
    g = toy_model()
    assert count_cost(g).total_params == g.n_params()


def test_cost_additive_over_concatenation():
    a = [Conv1D(4, 5), ReLU(), MaxPool1D(2)]
    b = [Flatten(), Dense(7), ReLU(), Dense(3)]
    ca = count_cost(a, (1, 100))
    cb = count_cost(b, ca.layers[-1].out_shape)
    whole = count_cost(a + b, (1, 100))
    assert whole.total_params == ca.total_params + cb.total_params
    assert whole.total_flops == ca.total_flops + cb.total_flops
    assert "2 FLOPs" in whole.convention


# -- serialization


def test_model_round_trip(tmp_path):
    g = toy_model(np.float32).initialize(11)
    x, aux = random_inputs(g, np.random.default_rng(11))
    save_model(g, tmp_path / "m.lngm")
    h = load_model(tmp_path / "m.lngm")
    assert h.same_architecture(g) and h.dtype == g.dtype
    assert g.forward(x, aux).tobytes() == h.forward(x, aux).tobytes()


def test_model_corruption_detected(tmp_path):
    g = toy_model().initialize(0)
    p = tmp_path / "m.lngm"
    save_model(g, p)
    data = bytearray(p.read_bytes())
    data[len(data) // 2] ^= 0x01
    p.write_bytes(bytes(data))
    with pytest.raises(ModelFileError, match="checksum"):
        load_model(p)


def test_model_version_and_architecture_mismatch(tmp_path):
    import hashlib
    import struct

    g = toy_model().initialize(0)
    p = tmp_path / "m.lngm"
    save_model(g, p)
    other = ModelGraph([Flatten(), Dense(3)], (1, 64))
    with pytest.raises(ModelFileError, match="architecture"):
        load_model(p, expect=other)

    body = bytearray(p.read_bytes()[:-32])
    struct.pack_into("<H", body, 4, 99)
    p.write_bytes(bytes(body) + hashlib.sha256(bytes(body)).digest())
    with pytest.raises(ModelFileError, match="version 99"):
        load_model(p)


def test_kink_margin_oracle():
    g = ModelGraph([ReLU()], (3,), dtype=np.float64)
    assert oracles.kink_margin(g, np.array([[0.5, -0.2, 1e-6]])) == pytest.approx(1e-6)
    p = ModelGraph([MaxPool1D(2)], (1, 4), dtype=np.float64)
    assert oracles.kink_margin(p, np.array([[[1.0, 1.0 + 1e-7, 3.0, 0.0]]])) == pytest.approx(1e-7)
    # exact ties are structural, not kinks
    assert oracles.kink_margin(p, np.array([[[2.0, 2.0, 3.0, 1.0]]])) == pytest.approx(2.0)
