"""
The GAPA layer: a GP activation whose posterior mean is the original
nonlinearity and whose variance comes from local K-NN conditioning.

All neurons of a layer share the kernel input (the full pre-activation
vector) and the lengthscale; they differ only in amplitude c_i^2. With the
relative jitter convention K_i + jitter * c_i^2 I = c_i^2 (R + jitter I),
a single correlation solve serves every neuron:

    var_i = c_i^2 * (1 - r^T (R + jitter I)^{-1} r)
"""

from __future__ import annotations

import logging
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from .config import DEFAULT_K
from .errors import DimensionMismatch, NetworkValidationError, TooFewRows
from .inducing import InducingSet, KernelParams
from .neighbor_index import NeighborIndex, build_index, search
from .network import Activation, ActivationTag, NetworkSpec
from .tensor import GaussianVector, as_vector, cholesky_factor, triangular_solve

logger = logging.getLogger(__name__)


def rbf_correlation(A: np.ndarray, B: np.ndarray, lengthscale: float) -> np.ndarray:
    """exp(-|a - b|^2 / (2 l^2)) for every row pair."""
    return np.exp(-cdist(np.atleast_2d(A), np.atleast_2d(B), "sqeuclidean") / (2.0 * lengthscale ** 2))


def explained_fraction(Z_local: np.ndarray, z: np.ndarray, lengthscale: float, jitter: float) -> float:
    """r^T (R + jitter I)^{-1} r = |L^{-1} r|^2 for the local inducing rows."""
    R = rbf_correlation(Z_local, Z_local, lengthscale)
    R[np.diag_indices_from(R)] += jitter
    w = triangular_solve(cholesky_factor(R), rbf_correlation(Z_local, z, lengthscale)[:, 0])
    return float(w @ w)


def conditional_variance(Z_local: np.ndarray, z: np.ndarray, params: KernelParams) -> np.ndarray:
    """Per-neuron GP variance at z conditioned on the rows of Z_local (unclamped)."""
    q = explained_fraction(Z_local, z, params.lengthscale, params.jitter)
    return params.signal_var * (1.0 - q)


@dataclass(frozen=True)
class GapaLayer:
    layer_index: int
    activation: ActivationTag
    inducing: InducingSet
    index: NeighborIndex
    K: int = DEFAULT_K
    aleatoric_var: Optional[np.ndarray] = None
    clamp_events: Counter = field(default_factory=Counter, compare=False, repr=False)
    clamp_lock: threading.Lock = field(default_factory=threading.Lock, init=False, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "activation", ActivationTag(self.activation))
        if not 1 <= self.K <= self.inducing.M:
            raise TooFewRows(f"K={self.K} must lie in [1, M={self.inducing.M}]")
        if self.aleatoric_var is not None:
            ale = as_vector(self.aleatoric_var, "aleatoric_var")
            if ale.shape[0] != self.width or np.any(ale < 0):
                raise DimensionMismatch("aleatoric_var must be a non-negative vector of the layer width")
            object.__setattr__(self, "aleatoric_var", ale)

    @property
    def width(self) -> int:
        return self.inducing.width


def make_gapa_layer(inducing: InducingSet, activation: ActivationTag, K: int = DEFAULT_K,
                    index: Optional[NeighborIndex] = None, layer_index: Optional[int] = None,
                    aleatoric_var: Optional[np.ndarray] = None) -> GapaLayer:
    K = min(K, inducing.M)
    return GapaLayer(inducing.layer_index if layer_index is None else layer_index, activation, inducing,
                     index if index is not None else build_index(inducing), K, aleatoric_var)


def local_variance(layer: GapaLayer, z: np.ndarray) -> np.ndarray:
    """Epistemic variance of every neuron at pre-activation z."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (layer.width,):
        raise DimensionMismatch(f"pre-activation has shape {z.shape}, layer width is {layer.width}")
    ids, d2 = search(layer.index, z, layer.K)
    logger.debug("Layer %d: %d neighbours, nearest squared distance %.4g", layer.layer_index, layer.K, d2[0])
    var = conditional_variance(layer.inducing.Z[ids], z, layer.inducing.params)
    negative = var < 0
    if negative.any():
        with layer.clamp_lock:
            layer.clamp_events[layer.layer_index] += 1
            event = layer.clamp_events[layer.layer_index]
        logger.warning("Clamped %d negative variances at layer %d (event %d)",
                       int(negative.sum()), layer.layer_index, event)
        var = np.where(negative, 0.0, var)
    return var


def gapa_forward(layer: GapaLayer, state: GaussianVector) -> GaussianVector:
    """epistemic + propagated input uncertainty + aleatoric, mean = phi(mean)."""
    mu, v = state.mean, state.var
    if mu.shape[0] != layer.width:
        raise DimensionMismatch(f"input width {mu.shape[0]} != layer width {layer.width}")
    slope = layer.activation.derivative(mu)
    var = local_variance(layer, mu) + slope * slope * v
    if layer.aleatoric_var is not None:
        var = var + layer.aleatoric_var
    return GaussianVector(layer.activation.evaluate(mu), var)


def gapa_forward_sequence(layer: GapaLayer, mean: np.ndarray, var: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Position-wise GAPA on a [T, d] token sequence."""
    out = [gapa_forward(layer, GaussianVector(m, v)) for m, v in zip(mean, var)]
    return layer.activation.evaluate(mean), np.stack([g.var for g in out])


@dataclass(frozen=True)
class GapaNetwork:
    """A frozen backbone with GAPA layers attached at its GAPA points."""

    net: NetworkSpec
    layers: Mapping[int, GapaLayer]

    def __post_init__(self):
        layers = dict(self.layers)
        if set(layers) != set(self.net.gapa_points):
            raise NetworkValidationError(
                f"attached layers {sorted(layers)} != GAPA points {sorted(self.net.gapa_points)}")
        widths = self.net.layer_widths()
        for idx, gl in layers.items():
            spec = self.net.layers[idx]
            if not isinstance(spec, Activation) or spec.tag is not gl.activation:
                raise NetworkValidationError(f"GAPA layer {idx} does not match the backbone activation")
            if widths[idx] is not None and widths[idx] != gl.width:
                raise DimensionMismatch(f"GAPA layer {idx} has width {gl.width}, backbone has {widths[idx]}")
        object.__setattr__(self, "layers", layers)


def attach_gapa(net: NetworkSpec, attachments: Mapping[int, Tuple[InducingSet, Optional[NeighborIndex]]],
                K: int = DEFAULT_K, aleatoric: Optional[Dict[int, np.ndarray]] = None) -> GapaNetwork:
    aleatoric = aleatoric or {}
    layers = {}
    for idx, (ind, index) in attachments.items():
        tag = net.layers[idx].tag if isinstance(net.layers[idx], Activation) else None
        if tag is None:
            raise NetworkValidationError(f"layer {idx} is not an Activation layer")
        layers[idx] = make_gapa_layer(ind, tag, K, index, idx, aleatoric.get(idx))
    return GapaNetwork(net.with_gapa_points(layers), layers)
