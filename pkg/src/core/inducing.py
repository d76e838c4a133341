"""
Inducing-point construction and empirical kernel hyperparameters.

Compresses an activation cache into M inducing inputs (k-means++ / Lloyd,
greedy farthest-point traversal, or a uniform random subset) and fixes the RBF
hyperparameters from cache statistics: one median-heuristic lengthscale per
layer, one signal variance per neuron. Nothing here is optimised by gradient.

Inducing-set file (little endian):
    b"GAPAINDC" | u16 version | u32 layer | u32 M | u32 d | u8 method |
    f64 lengthscale | f64 jitter | 32-byte fingerprint |
    d x f64 signal_var | M x d x f64 Z
An optional b"GAPAINDX" neighbour-index section may follow.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .activation_cache import ActivationCache, load_rows
from .config import DEFAULT_JITTER, DEFAULT_PAIR_BUDGET
from .errors import (
    ConfigError,
    CorruptFile,
    DegenerateScale,
    DimensionMismatch,
    EmptyCache,
    FingerprintMismatch,
    GapaValidationError,
    NonPositiveVariance,
    TooFewRows,
)
from .tensor import as_matrix, as_vector

logger = logging.getLogger(__name__)

MAGIC = b"GAPAINDC"
VERSION = 1
_HEADER = struct.Struct("<8sHIIIBdd32s")
SIGNAL_STD_FLOOR = 1e-6

CacheLike = Union[ActivationCache, np.ndarray]


class InducingMethod(str, Enum):
    KMEANS_PP = "kmeans++"
    FARTHEST_POINT = "fps"
    RANDOM = "random"


_METHOD_TAGS = {InducingMethod.KMEANS_PP: 0, InducingMethod.FARTHEST_POINT: 1, InducingMethod.RANDOM: 2}


@dataclass(frozen=True)
class KernelParams:
    lengthscale: float
    signal_var: np.ndarray
    jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        object.__setattr__(self, "signal_var", as_vector(self.signal_var, "signal_var"))
        if not self.lengthscale > 0:
            raise DegenerateScale(f"lengthscale must be > 0, got {self.lengthscale}")
        if np.any(self.signal_var < SIGNAL_STD_FLOOR ** 2):
            raise NonPositiveVariance(f"signal variances must be >= {SIGNAL_STD_FLOOR ** 2:g}")
        if not self.jitter > 0:
            raise ConfigError(f"jitter must be > 0, got {self.jitter}")


@dataclass(frozen=True)
class InducingSet:
    layer_index: int
    Z: np.ndarray
    params: KernelParams
    method: InducingMethod = InducingMethod.KMEANS_PP
    fingerprint: bytes = b"\x00" * 32

    def __post_init__(self):
        Z = as_matrix(self.Z, "Z")
        if Z.shape[0] < 1:
            raise EmptyCache("an inducing set needs at least one row")
        if Z.shape[1] != self.params.signal_var.shape[0]:
            raise DimensionMismatch(f"Z has width {Z.shape[1]}, signal_var has {self.params.signal_var.shape[0]}")
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "method", InducingMethod(self.method))

    @property
    def M(self) -> int:
        return int(self.Z.shape[0])

    @property
    def width(self) -> int:
        return int(self.Z.shape[1])


def kmeans_objective(rows: np.ndarray, centroids: np.ndarray) -> float:
    return float(cdist(rows, centroids, "sqeuclidean").min(axis=1).sum())


def _kmeanspp_seed(X: np.ndarray, M: int, rng: np.random.Generator) -> np.ndarray:
    N = X.shape[0]
    chosen = [int(rng.integers(N))]
    closest = cdist(X, X[chosen], "sqeuclidean")[:, 0]
    for _ in range(1, M):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(N, p=closest / total))
        else:
            # every row coincides with a chosen centre; pick any unused row
            unused = np.setdiff1d(np.arange(N), chosen)
            idx = int(rng.choice(unused))
        chosen.append(idx)
        closest = np.minimum(closest, cdist(X, X[idx:idx + 1], "sqeuclidean")[:, 0])
    return X[chosen].copy()


def kmeans_pp(cache: CacheLike, M: int, max_iters: int = 100, seed: int = 0) -> np.ndarray:
    """k-means++ seeding followed by Lloyd iterations to a fixpoint."""
    X = load_rows(cache)
    N = X.shape[0]
    if not 1 <= M <= N:
        raise TooFewRows(f"cannot pick {M} centroids from {N} rows")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_seed(X, M, rng)

    labels = None
    for it in range(max_iters):
        d2 = cdist(X, centroids, "sqeuclidean")
        new_labels = d2.argmin(axis=1)  # first minimum wins ties
        if labels is not None and np.array_equal(new_labels, labels):
            logger.debug("k-means converged after %d iterations", it)
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=M)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, X)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not nonempty.all():
            own = d2[np.arange(N), labels]
            for empty in np.flatnonzero(~nonempty):
                far = int(own.argmax())
                centroids[empty] = X[far]
                own[far] = -1.0
    return centroids


def farthest_point(cache: CacheLike, M: int, seed: int = 0, start: Optional[int] = None) -> np.ndarray:
    """Greedy farthest-first traversal; returned rows are exact cache rows."""
    X = load_rows(cache)
    N = X.shape[0]
    if not 1 <= M <= N:
        raise TooFewRows(f"cannot pick {M} points from {N} rows")
    first = int(np.random.default_rng(seed).integers(N)) if start is None else int(start)
    chosen = [first]
    min_d2 = cdist(X, X[first:first + 1], "sqeuclidean")[:, 0]
    for _ in range(1, M):
        idx = int(min_d2.argmax())
        chosen.append(idx)
        min_d2 = np.minimum(min_d2, cdist(X, X[idx:idx + 1], "sqeuclidean")[:, 0])
    return X[chosen].copy()


def random_subset(cache: CacheLike, M: int, seed: int = 0) -> np.ndarray:
    """M distinct cache rows drawn uniformly; the cheap option for very large caches."""
    X = load_rows(cache)
    if not 1 <= M <= X.shape[0]:
        raise TooFewRows(f"cannot pick {M} rows from {X.shape[0]}")
    idx = np.sort(np.random.default_rng(seed).choice(X.shape[0], size=M, replace=False))
    return X[idx].copy()


def estimate_lengthscale(cache: CacheLike, pair_budget: int = DEFAULT_PAIR_BUDGET, seed: int = 0) -> float:
    """Median pairwise distance, exact when the budget covers all pairs."""
    X = load_rows(cache)
    N = X.shape[0]
    if N < 2:
        raise EmptyCache("need at least two rows to estimate a lengthscale")
    n_pairs = N * (N - 1) // 2
    if pair_budget >= n_pairs:
        dists = pdist(X)
    else:
        # sampled with replacement, i != j
        rng = np.random.default_rng(seed)
        i = rng.integers(N, size=pair_budget)
        j = rng.integers(N - 1, size=pair_budget)
        j = j + (j >= i)
        dists = np.sqrt(np.sum((X[i] - X[j]) ** 2, axis=1))
    median = float(np.median(dists))
    if median <= 0:
        raise DegenerateScale("median pairwise distance is zero; all sampled rows coincide")
    return median


def estimate_signal_var(cache: CacheLike) -> np.ndarray:
    X = load_rows(cache)
    if X.shape[0] < 2:
        raise EmptyCache("need at least two rows to estimate signal variances")
    std = np.maximum(X.std(axis=0, ddof=1), SIGNAL_STD_FLOOR)
    return std ** 2


def build_inducing_set(cache: CacheLike, M: int, method: Union[str, InducingMethod] = InducingMethod.KMEANS_PP,
                       seed: int = 0, jitter: float = DEFAULT_JITTER, max_iters: int = 100,
                       pair_budget: int = DEFAULT_PAIR_BUDGET,
                       expected_fingerprint: Optional[bytes] = None,
                       out_path: Optional[Union[str, Path]] = None) -> InducingSet:
    method = InducingMethod(method)
    if isinstance(cache, ActivationCache):
        if expected_fingerprint is not None and cache.source_fingerprint != expected_fingerprint:
            raise FingerprintMismatch(f"{cache.path} does not belong to this network/dataset")
        layer, fingerprint = cache.layer_index, cache.source_fingerprint
    else:
        layer, fingerprint = -1, b"\x00" * 32
    X = load_rows(cache)
    if M > X.shape[0]:
        raise TooFewRows(f"M={M} exceeds the {X.shape[0]} cached rows")

    if method is InducingMethod.KMEANS_PP:
        Z = kmeans_pp(X, M, max_iters=max_iters, seed=seed)
    elif method is InducingMethod.FARTHEST_POINT:
        Z = farthest_point(X, M, seed=seed)
    else:
        Z = random_subset(X, M, seed=seed)
    params = KernelParams(estimate_lengthscale(X, pair_budget, seed), estimate_signal_var(X), jitter)
    ind = InducingSet(max(layer, 0), Z, params, method, fingerprint)
    logger.info("Built %d inducing points (%s) for layer %d, lengthscale %.4g",
                M, method.value, ind.layer_index, params.lengthscale)
    if out_path is not None:
        save_inducing_set(ind, out_path)
    return ind


def save_inducing_set(ind: InducingSet, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    head = _HEADER.pack(MAGIC, VERSION, ind.layer_index, ind.M, ind.width, _METHOD_TAGS[ind.method],
                        ind.params.lengthscale, ind.params.jitter, ind.fingerprint)
    body = (np.ascontiguousarray(ind.params.signal_var, dtype="<f8").tobytes()
            + np.ascontiguousarray(ind.Z, dtype="<f8").tobytes())
    path.write_bytes(head + body)
    return path


def inducing_section_size(M: int, d: int) -> int:
    return _HEADER.size + 8 * d + 8 * M * d


def load_inducing_set(path: Union[str, Path]) -> InducingSet:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CorruptFile(f"{path}: truncated inducing-set header")
    magic, version, layer, M, d, tag, lengthscale, jitter, fingerprint = _HEADER.unpack_from(data)
    if magic != MAGIC or version != VERSION:
        raise CorruptFile(f"{path} is not a supported inducing-set file")
    if len(data) < inducing_section_size(M, d):
        raise CorruptFile(f"{path}: inducing blocks are truncated")
    offset = _HEADER.size
    signal_var = np.frombuffer(data, dtype="<f8", count=d, offset=offset).astype(np.float64)
    Z = np.frombuffer(data, dtype="<f8", count=M * d, offset=offset + 8 * d).astype(np.float64).reshape(M, d)
    method = {v: k for k, v in _METHOD_TAGS.items()}.get(tag)
    if method is None:
        raise CorruptFile(f"{path}: unknown method tag {tag}")
    try:
        return InducingSet(layer, Z, KernelParams(lengthscale, signal_var, jitter), method, fingerprint)
    except (GapaValidationError, DegenerateScale) as exc:
        raise CorruptFile(f"{path}: {exc}") from exc
