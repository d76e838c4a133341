"""
Moment propagation of (mean, diagonal variance) states through frozen layers.

Means always follow the deterministic forward pass, computed with the same
layer functions the backbone uses; only variances are approximated:
linear layers exactly under the diagonal model, element-wise nonlinearities
and softmax by the delta method, RMSNorm with a deterministic expected RMS,
self-attention either with deterministic weights (variant A, default) or with
delta-method attention weights (variant B). Residual additions add means and
variances (independence assumption of the diagonal model).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Union

import numpy as np

from .errors import ConfigError, DimensionMismatch, NegativeVariance, NetworkValidationError
from .gp_activation import GapaNetwork, gapa_forward, gapa_forward_sequence
from .network import (
    Activation,
    ActivationTag,
    Linear,
    NetworkSpec,
    ResidualAdd,
    RMSNorm,
    SelfAttention,
    SoftmaxHead,
    affine,
    forward_trace,
    rms_normalize,
)
from .tensor import GaussianVector, ensure_finite, squared

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GaussianSequence:
    """Token-wise Gaussian states, both arrays shaped [T, d]."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = ensure_finite(np.array(self.mean, dtype=np.float64), "mean")
        var = ensure_finite(np.array(self.var, dtype=np.float64), "var")
        if mean.ndim != 2 or mean.shape != var.shape:
            raise DimensionMismatch(f"sequence mean {mean.shape} and var {var.shape} must be equal [T, d]")
        if np.any(var < 0):
            raise NegativeVariance("sequence variances must be >= 0")
        mean.setflags(write=False)
        var.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @classmethod
    def deterministic(cls, mean: np.ndarray) -> "GaussianSequence":
        mean = np.asarray(mean, dtype=np.float64)
        return cls(mean, np.zeros_like(mean))

    def positions(self) -> List[GaussianVector]:
        return [GaussianVector(m, v) for m, v in zip(self.mean, self.var)]


State = Union[GaussianVector, GaussianSequence]


def _like(state: State, mean: np.ndarray, var: np.ndarray) -> State:
    return type(state)(mean, var)


def _linear(W: np.ndarray, b, state: State) -> State:
    if state.mean.shape[-1] != W.shape[1]:
        raise DimensionMismatch(f"linear layer expects width {W.shape[1]}, got {state.mean.shape[-1]}")
    return _like(state, affine(W, b, state.mean), state.var @ squared(W).T)


def propagate_linear(W: np.ndarray, b: np.ndarray, state: State) -> State:
    """mean = W mu + b, var = (W * W) v."""
    return _linear(np.asarray(W, dtype=np.float64), np.asarray(b, dtype=np.float64), state)


def propagate_elementwise(tag: ActivationTag, state: State) -> State:
    tag = ActivationTag(tag)
    slope = tag.derivative(state.mean)
    return _like(state, tag.evaluate(state.mean), slope * slope * state.var)


def propagate_rmsnorm(gamma: np.ndarray, eps: float, state: State) -> State:
    """Expected RMS^2 treated as deterministic: var = gamma^2 v / s^2."""
    gamma = np.asarray(gamma, dtype=np.float64)
    mu, v = state.mean, state.var
    s2 = np.mean(mu * mu, axis=-1, keepdims=True) + np.mean(v, axis=-1, keepdims=True) + eps
    return _like(state, rms_normalize(mu, gamma, eps), v / s2 * gamma * gamma)


def propagate_softmax_var(s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Delta-method variance of softmax outputs s given logit variances v (last axis)."""
    s = np.asarray(s, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    weighted = s * s * v
    others = weighted.sum(axis=-1, keepdims=True) - weighted
    return np.maximum(s * s * ((1.0 - s) ** 2 * v + others), 0.0)


def _attention_inputs(layer: SelfAttention, seq: GaussianSequence):
    if seq.mean.shape[1] != layer.in_width:
        raise DimensionMismatch(f"attention expects width {layer.in_width}, got {seq.mean.shape[1]}")
    q, k, v = layer.project(seq.mean)
    a = layer.weights(q, k)
    return q, k, v, a


def _output(layer: SelfAttention, a: np.ndarray, v: np.ndarray, y_var_heads: np.ndarray) -> GaussianSequence:
    mean = affine(layer.Wo, None, layer.combine(a, v))
    var = layer.merge_heads(y_var_heads) @ squared(layer.Wo).T
    return GaussianSequence(mean, var)


def propagate_attention_a(layer: SelfAttention, seq: GaussianSequence) -> GaussianSequence:
    """Deterministic attention weights: Var(y_t) = sum_s a_ts^2 Var(v_s)."""
    _, _, v, a = _attention_inputs(layer, seq)
    v_var = layer.split_heads(seq.var @ squared(layer.Wv).T)
    return _output(layer, a, v, (a * a) @ v_var)


def propagate_attention_b(layer: SelfAttention, seq: GaussianSequence) -> GaussianSequence:
    """Delta-method attention weights on top of the value variance."""
    q, k, v, a = _attention_inputs(layer, seq)
    q_var = layer.split_heads(seq.var @ squared(layer.Wq).T)
    k_var = layer.split_heads(seq.var @ squared(layer.Wk).T)
    v_var = layer.split_heads(seq.var @ squared(layer.Wv).T)
    qh, kh, vh = layer.split_heads(q), layer.split_heads(k), layer.split_heads(v)

    kT = lambda x: x.transpose(0, 2, 1)  # noqa: E731
    e_var = ((qh * qh) @ kT(k_var) + q_var @ kT(kh * kh) + q_var @ kT(k_var)) / layer.head_dim
    e_var = np.where(layer.mask(seq.mean.shape[0]), e_var, 0.0)
    a_var = propagate_softmax_var(a, e_var)

    y_var = a_var @ (vh * vh) + (a * a) @ v_var + a_var @ v_var
    return _output(layer, a, v, y_var)


def propagate_residual(main: State, skip: State) -> State:
    return _like(main, main.mean + skip.mean, main.var + skip.var)


def _initial_state(x: np.ndarray) -> State:
    if x.ndim == 2:
        return GaussianSequence.deterministic(x)
    return GaussianVector.deterministic(x)


def propagate_network(model: Union[GapaNetwork, NetworkSpec], x: np.ndarray, variant: str = "a") -> State:
    """Single-pass propagation of the input (zero variance) to the output."""
    if isinstance(model, GapaNetwork):
        net, gapa = model.net, model.layers
    else:
        net, gapa = model, {}
    missing = set(net.gapa_points) - set(gapa)
    if missing:
        raise NetworkValidationError(f"GAPA points {sorted(missing)} have no attached GAPA layer")
    if variant not in ("a", "b"):
        raise ConfigError(f"variant must be 'a' or 'b', got {variant!r}")

    x = forward_trace(net, x, stop=0)[0]
    states: List[State] = [_initial_state(x)]
    for idx, layer in enumerate(net.layers):
        state = states[-1]
        if idx in gapa:
            if isinstance(state, GaussianSequence):
                state = GaussianSequence(*gapa_forward_sequence(gapa[idx], state.mean, state.var))
            else:
                state = gapa_forward(gapa[idx], state)
        elif isinstance(layer, Linear):
            state = _linear(layer.W, layer.b, state)
        elif isinstance(layer, Activation):
            state = propagate_elementwise(layer.tag, state)
        elif isinstance(layer, RMSNorm):
            state = propagate_rmsnorm(layer.gamma, layer.eps, state)
        elif isinstance(layer, SelfAttention):
            if not isinstance(state, GaussianSequence):
                raise DimensionMismatch("SelfAttention needs a token sequence")
            rule = propagate_attention_a if variant == "a" else propagate_attention_b
            state = rule(layer, state)
        elif isinstance(layer, ResidualAdd):
            state = propagate_residual(state, states[layer.source + 1])
        elif isinstance(layer, SoftmaxHead):
            pass
        else:
            raise NetworkValidationError(f"no propagation rule for layer {idx} ({type(layer).__name__})")
        states.append(state)
    return states[-1]
