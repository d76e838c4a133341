import logging
import threading

import numpy as np
import pytest
from scipy.spatial.distance import pdist

import src.core.gp_activation as gp
from src.core.errors import DimensionMismatch, NetworkValidationError, TooFewRows
from src.core.gp_activation import (
    GapaNetwork,
    attach_gapa,
    conditional_variance,
    explained_fraction,
    gapa_forward,
    gapa_forward_sequence,
    local_variance,
    make_gapa_layer,
    rbf_correlation,
)
from src.core.inducing import InducingSet, KernelParams
from src.core.neighbor_index import build_index
from src.core.network import ActivationTag
from src.core.tensor import GaussianVector


def dense_gp_variance(Z, z, lengthscale, c2, jitter):
    """k** - k^T (K + jitter c2 I)^{-1} k with an explicit inverse."""
    K = c2 * np.exp(-((Z[:, None, :] - Z[None, :, :]) ** 2).sum(-1) / (2 * lengthscale ** 2))
    k = c2 * np.exp(-((Z - z) ** 2).sum(-1) / (2 * lengthscale ** 2))
    return c2 - k @ np.linalg.inv(K + jitter * c2 * np.eye(len(Z))) @ k


def titsias_variance(Z, X, z, lengthscale, c2, noise):
    """Latent predictive variance of the optimal sparse variational posterior."""
    kern = lambda A, B: c2 * rbf_correlation(A, B, lengthscale)  # noqa: E731
    Kuu, Kuf, ku = kern(Z, Z), kern(Z, X), kern(Z, z)[:, 0]
    Sigma = np.linalg.inv(Kuu + Kuf @ Kuf.T / noise)
    return c2 - ku @ np.linalg.solve(Kuu, ku) + ku @ Sigma @ ku


def test_conditional_variance_matches_dense_oracle(rng):
    Z = rng.normal(size=(10, 3))
    z = rng.normal(size=3)
    params = KernelParams(1.3, np.array([0.5, 1.0, 2.0]), 1e-4)
    got = conditional_variance(Z, z, params)
    want = [dense_gp_variance(Z, z, 1.3, c2, 1e-4) for c2 in (0.5, 1.0, 2.0)]
    assert np.allclose(got, want, atol=1e-10)


def test_explained_fraction_is_the_quadratic_form(rng):
    Z, z = rng.normal(size=(6, 2)), rng.normal(size=2)
    R = rbf_correlation(Z, Z, 0.8) + 1e-3 * np.eye(6)
    r = rbf_correlation(Z, z, 0.8)[:, 0]
    assert explained_fraction(Z, z, 0.8, 1e-3) == pytest.approx(r @ np.linalg.solve(R, r), rel=1e-10)


def test_interpolates_at_inducing_points(small_inducing):
    layer = make_gapa_layer(small_inducing, "tanh", K=5)
    assert np.all(local_variance(layer, small_inducing.Z[3]) < 1e-5)


def test_reverts_to_prior_far_away(small_inducing):
    layer = make_gapa_layer(small_inducing, "tanh", K=5)
    var = local_variance(layer, np.full(3, 1e3))
    assert np.allclose(var, small_inducing.params.signal_var)


def test_variance_grows_with_distance_for_single_neighbour():
    Z = np.zeros((1, 2))
    layer = make_gapa_layer(InducingSet(0, Z, KernelParams(1.0, np.ones(2))), "tanh", K=1)
    distances = [0.1, 0.5, 1.0, 2.0, 4.0]
    var = [local_variance(layer, np.array([d, 0.0]))[0] for d in distances]
    assert all(a < b for a, b in zip(var, var[1:]))


def test_local_variance_uses_the_k_nearest_rows(rng, small_inducing):
    layer = make_gapa_layer(small_inducing, "tanh", K=4)
    z = rng.normal(size=3)
    nearest = np.argsort(((small_inducing.Z - z) ** 2).sum(1))[:4]
    want = conditional_variance(small_inducing.Z[nearest], z, small_inducing.params)
    assert np.allclose(local_variance(layer, z), want)


@pytest.mark.slow
def test_fewer_neighbours_never_reduce_variance():
    rng = np.random.default_rng(0)
    jitter = 1e-3
    for _ in range(200):
        M, d = int(rng.integers(3, 31)), int(rng.integers(1, 9))
        Z = rng.normal(size=(M, d))
        lengthscale = float(np.median(pdist(Z)))
        signal_var = rng.uniform(0.1, 3.0, size=3)
        z = rng.normal(size=d)
        for c2 in signal_var:
            # prefixes[j] conditions on the first j + 1 rows, so every i < j is a nested pair
            prefixes = np.array([dense_gp_variance(Z[:n], z, lengthscale, c2, jitter) for n in range(1, M + 1)])
            gaps = prefixes[:, None] - prefixes[None, :]
            assert np.all(np.triu(gaps, k=1) >= -1e-8 * c2)
        params = KernelParams(lengthscale, signal_var, jitter)
        want = [dense_gp_variance(Z, z, lengthscale, c2, jitter) for c2 in signal_var]
        assert np.allclose(conditional_variance(Z, z, params), want, rtol=1e-6, atol=1e-9)


@pytest.mark.slow
def test_zero_noise_limit_matches_sparse_variational_form():
    rng = np.random.default_rng(1)
    c2 = 0.25
    for _ in range(50):
        Z = rng.normal(scale=3.0, size=(5, 3))
        X = np.repeat(Z, 20, axis=0) + 0.1 * rng.normal(size=(100, 3))
        z = Z[0] + 0.5 * rng.normal(size=3)
        gaps = []
        for jitter in (1e-2, 1e-4, 1e-6):
            local = conditional_variance(Z, z, KernelParams(1.0, np.array([c2]), jitter))[0]
            gaps.append(abs(titsias_variance(Z, X, z[None, :], 1.0, c2, jitter * c2) - local))
        assert gaps[0] > gaps[1] > gaps[2]
        assert gaps[2] < 1e-6


def test_gapa_forward_keeps_mean_and_adds_input_term(small_inducing, rng):
    ale = np.array([0.1, 0.0, 0.2])
    layer = make_gapa_layer(small_inducing, "tanh", K=3, aleatoric_var=ale)
    mu, v = rng.normal(size=3), np.array([0.3, 0.0, 1.0])
    out = gapa_forward(layer, GaussianVector(mu, v))
    assert np.array_equal(out.mean, np.tanh(mu))
    slope = 1 - np.tanh(mu) ** 2
    assert np.allclose(out.var, local_variance(layer, mu) + slope ** 2 * v + ale)


def test_gapa_forward_width_mismatch(small_inducing):
    layer = make_gapa_layer(small_inducing, "relu", K=2)
    with pytest.raises(DimensionMismatch):
        gapa_forward(layer, GaussianVector.deterministic(np.zeros(4)))


def test_sequence_gapa_is_position_wise(small_inducing, rng):
    layer = make_gapa_layer(small_inducing, "silu", K=3)
    mean, var = rng.normal(size=(4, 3)), np.abs(rng.normal(size=(4, 3)))
    out_mean, out_var = gapa_forward_sequence(layer, mean, var)
    assert np.array_equal(out_mean, ActivationTag.SILU.evaluate(mean))
    assert np.allclose(out_var[2], gapa_forward(layer, GaussianVector(mean[2], var[2])).var)


def test_k_out_of_range(small_inducing):
    with pytest.raises(TooFewRows):
        gp.GapaLayer(1, ActivationTag.TANH, small_inducing, build_index(small_inducing), K=13)


def test_negative_variance_is_clamped_and_counted(small_inducing, monkeypatch, caplog):
    layer = make_gapa_layer(small_inducing, "tanh", K=3)
    monkeypatch.setattr(gp, "conditional_variance", lambda Z, z, params: np.array([-1e-9, 0.5, -2e-9]))
    with caplog.at_level(logging.WARNING, logger="src.core.gp_activation"):
        var = local_variance(layer, np.zeros(3))
        local_variance(layer, np.zeros(3))
    assert var.tolist() == [0.0, 0.5, 0.0]
    assert layer.clamp_events[layer.layer_index] == 2
    assert "Clamped 2 negative variances" in caplog.text


def test_attach_gapa_validates_layers(rng, mlp_factory, small_inducing):
    net = mlp_factory(rng, [2, 3, 2])
    gnet = attach_gapa(net, {1: (small_inducing, None)}, K=4)
    assert set(gnet.layers) == {1} and gnet.layers[1].K == 4
    with pytest.raises(NetworkValidationError):
        attach_gapa(net, {0: (small_inducing, None)})
    with pytest.raises(NetworkValidationError):
        GapaNetwork(net, {})


def test_clamp_counter_is_exact_across_threads(small_inducing, monkeypatch):
    layer = make_gapa_layer(small_inducing, "tanh", K=3)
    monkeypatch.setattr(gp, "conditional_variance", lambda Z, z, params: np.array([-1e-9, 0.5, 0.1]))

    def worker():
        for _ in range(50):
            local_variance(layer, np.zeros(3))

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert layer.clamp_events[layer.layer_index] == 400
