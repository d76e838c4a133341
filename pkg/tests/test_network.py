import json
import math
import struct

import numpy as np
import pytest
from scipy.special import softmax
from sklearn.datasets import make_moons
from sklearn.neural_network import MLPClassifier, MLPRegressor

from src.core.errors import CorruptFile, DimensionMismatch, NetworkValidationError, SchemaVersionUnsupported
from src.core.network import (
    MAGIC,
    Activation,
    ActivationTag,
    Linear,
    NetworkSpec,
    ResidualAdd,
    RMSNorm,
    SelfAttention,
    SoftmaxHead,
    Task,
    forward_deterministic,
    forward_trace,
    load_network,
    network_fingerprint,
    network_from_sklearn,
    pre_activation,
    read_container,
    save_network,
)


@pytest.mark.parametrize("tag", ["tanh", "silu", "relu", "identity"])
def test_activation_derivative_matches_finite_difference(tag):
    z = np.array([-1.3, -0.2, 0.4, 2.1])
    h = 1e-6
    fd = (ActivationTag(tag).evaluate(z + h) - ActivationTag(tag).evaluate(z - h)) / (2 * h)
    assert np.allclose(ActivationTag(tag).derivative(z), fd, atol=1e-6)


def test_relu_derivative_is_zero_at_kink():
    assert ActivationTag.RELU.derivative(np.array([0.0]))[0] == 0.0


def test_forward_trace_and_pre_activation(rng, mlp_factory):
    net = mlp_factory(rng, [3, 5, 2])
    x = rng.normal(size=3)
    trace = forward_trace(net, x)
    assert len(trace) == len(net.layers) + 1
    assert np.array_equal(pre_activation(net, x, 1), net.layers[0].forward(x))
    assert np.array_equal(forward_deterministic(net, x), trace[-1])


def test_input_width_checked(rng, mlp_factory):
    net = mlp_factory(rng, [3, 4, 2])
    with pytest.raises(DimensionMismatch):
        forward_deterministic(net, np.ones(5))


def test_gapa_point_must_be_activation(rng, mlp_factory):
    net = mlp_factory(rng, [3, 4, 2], gapa=False)
    with pytest.raises(NetworkValidationError):
        net.with_gapa_points([0])


def test_softmax_head_must_be_last():
    with pytest.raises(NetworkValidationError):
        NetworkSpec((Linear(np.eye(2), np.zeros(2)), SoftmaxHead(), Activation("tanh")))


def test_residual_adds_earlier_state(rng):
    W = rng.normal(size=(3, 3))
    net = NetworkSpec((Linear(W, np.zeros(3)), Activation("tanh"), ResidualAdd(-1)), task=Task.REGRESSION)
    x = rng.normal(size=3)
    assert np.allclose(forward_deterministic(net, x), np.tanh(W @ x) + x)


def test_attention_single_token_returns_projected_value(rng):
    d = 4
    layer = SelfAttention(*(rng.normal(size=(d, d)) for _ in range(4)), heads=2)
    x = rng.normal(size=(1, d))
    assert np.allclose(layer.forward(x), x @ layer.Wv.T @ layer.Wo.T)


def test_attention_causal_weights_are_lower_triangular(rng):
    layer = SelfAttention(*(rng.normal(size=(4, 4)) for _ in range(4)), heads=1)
    x = rng.normal(size=(3, 4))
    a = layer.weights(*layer.project(x)[:2])
    assert np.allclose(np.triu(a[0], k=1), 0.0)
    assert np.allclose(a.sum(axis=-1), 1.0)


def test_rmsnorm_forward():
    layer = RMSNorm(np.array([1.0, 2.0]), eps=1e-6)
    x = np.array([3.0, 4.0])
    rms = np.sqrt((9 + 16) / 2 + 1e-6)
    assert np.allclose(layer.forward(x), x / rms * np.array([1.0, 2.0]))


def test_container_round_trip_with_aux_sections(tmp_path, rng, mlp_factory):
    net = mlp_factory(rng, [2, 6, 3])
    path = save_network(net, tmp_path / "net.gapanet", meta={"note": "x"}, arrays={"extra": np.arange(3.0)})
    container = read_container(path)
    assert container.meta == {"note": "x"}
    assert np.array_equal(container.arrays["extra"], np.arange(3.0))
    assert container.net.gapa_points == net.gapa_points
    x = rng.normal(size=2)
    assert np.array_equal(forward_deterministic(container.net, x), forward_deterministic(net, x))


def test_container_rejects_flipped_byte(tmp_path, rng, mlp_factory):
    path = save_network(mlp_factory(rng, [2, 4, 2]), tmp_path / "net.gapanet")
    data = bytearray(path.read_bytes())
    data[-10] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CorruptFile):
        load_network(path)


def test_container_rejects_unknown_schema(tmp_path, rng, mlp_factory):
    import zlib

    path = save_network(mlp_factory(rng, [2, 4, 2]), tmp_path / "net.gapanet")
    data = path.read_bytes()[:-4]
    (head_len,) = struct.unpack("<I", data[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    header = json.loads(data[start:start + head_len])
    header["schema_version"] = 99
    head = json.dumps(header, sort_keys=True).encode()
    body = MAGIC + struct.pack("<I", len(head)) + head + data[start + head_len:]
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
    with pytest.raises(SchemaVersionUnsupported):
        load_network(path)


def test_fingerprint_ignores_gapa_placement(rng, mlp_factory):
    net = mlp_factory(rng, [2, 4, 4, 2])
    assert network_fingerprint(net) == network_fingerprint(net.with_gapa_points([]))
    other = mlp_factory(np.random.default_rng(99), [2, 4, 4, 2])
    assert network_fingerprint(net) != network_fingerprint(other)


def test_sklearn_binary_classifier_conversion():
    X, y = make_moons(200, noise=0.1, random_state=0)
    model = MLPClassifier(hidden_layer_sizes=(8,), activation="tanh", max_iter=300, random_state=0).fit(X, y)
    net = network_from_sklearn(model, gapa_points=[1])
    assert net.task is Task.CLASSIFICATION and net.gapa_points == frozenset({1})
    probs = np.stack([softmax(forward_deterministic(net, x)) for x in X[:20]])
    assert np.allclose(probs, model.predict_proba(X[:20]), atol=1e-10)


def test_sklearn_regressor_conversion(rng):
    X = rng.normal(size=(100, 1))
    y = np.sin(X[:, 0])
    model = MLPRegressor(hidden_layer_sizes=(8,), activation="tanh", max_iter=200, random_state=0).fit(X, y)
    net = network_from_sklearn(model)
    assert net.task is Task.REGRESSION
    out = np.array([forward_deterministic(net, x)[0] for x in X[:10]])
    assert np.allclose(out, model.predict(X[:10]), atol=1e-10)


def _loop_forward(layers, x):
    out = list(x)
    for W, b in layers[:-1]:
        out = [math.tanh(b[i] + sum(W[i, j] * out[j] for j in range(len(out)))) for i in range(W.shape[0])]
    W, b = layers[-1]
    return [b[i] + sum(W[i, j] * out[j] for j in range(len(out))) for i in range(W.shape[0])]


def test_tanh_mlp_matches_neuron_loop(rng):
    params = [(rng.normal(size=(5, 3)), rng.normal(size=5)), (rng.normal(size=(4, 5)), rng.normal(size=4)),
              (rng.normal(size=(2, 4)), rng.normal(size=2))]
    layers = (Linear(*params[0]), Activation("tanh"), Linear(*params[1]), Activation("tanh"), Linear(*params[2]))
    net = NetworkSpec(layers, task=Task.REGRESSION)
    refactored = NetworkSpec(layers[:2] + (Activation("identity"),) + layers[2:] + (Activation("identity"),),
                             task=Task.REGRESSION)
    for _ in range(5):
        x = rng.normal(size=3)
        out = forward_deterministic(net, x)
        assert np.allclose(out, _loop_forward(params, x), rtol=1e-12, atol=1e-12)
        assert np.array_equal(out, forward_deterministic(net, x))
        assert np.array_equal(out, forward_deterministic(refactored, x))


def test_truncated_container_is_corrupt(tmp_path, rng, mlp_factory):
    path = save_network(mlp_factory(rng, [2, 4, 2]), tmp_path / "net.gapanet")
    data = path.read_bytes()
    for size in (0, 5, len(MAGIC) + 6, len(data) // 2, len(data) - 1):
        path.write_bytes(data[:size])
        with pytest.raises(CorruptFile):
            load_network(path)
