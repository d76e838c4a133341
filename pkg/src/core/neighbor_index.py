"""
K-nearest-neighbour retrieval over an inducing set.

ExactFlat scans every inducing row. CoarseIVF partitions the rows with a
k-means coarse quantizer and only scans the posting lists of the n_probe
closest centroids, which keeps per-query cost around O(sqrt(M)) for the
default n_lists = ceil(sqrt(M)).

Distances are squared Euclidean internally and square-rooted on return.
Ties are broken by row id.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist

from .config import DEFAULT_N_PROBE
from .errors import CorruptFile, DimensionMismatch, TooFewRows
from .inducing import InducingSet, inducing_section_size, kmeans_pp

logger = logging.getLogger(__name__)

MAGIC = b"GAPAINDX"
_HEADER = struct.Struct("<8sBIII")


class IndexKind(str, Enum):
    EXACT_FLAT = "exact"
    COARSE_IVF = "ivf"


@dataclass(frozen=True)
class NeighborIndex:
    kind: IndexKind
    inducing: InducingSet
    n_lists: int = 1
    n_probe: int = 1
    centroids: Optional[np.ndarray] = None
    posting_lists: Tuple[np.ndarray, ...] = ()

    @property
    def M(self) -> int:
        return self.inducing.M


def _nearest(d2: np.ndarray, ids: np.ndarray, K: int) -> Tuple[np.ndarray, np.ndarray]:
    """K smallest squared distances, ties broken by id."""
    if K < d2.shape[0]:
        threshold = np.partition(d2, K - 1)[K - 1]
        keep = d2 <= threshold
        d2, ids = d2[keep], ids[keep]
    order = np.lexsort((ids, d2))[:K]
    return ids[order], d2[order]


def build_index(ind: InducingSet, kind: Union[str, IndexKind] = IndexKind.EXACT_FLAT,
                n_lists: Optional[int] = None, n_probe: int = DEFAULT_N_PROBE,
                seed: int = 0, max_iters: int = 25) -> NeighborIndex:
    kind = IndexKind(kind)
    if kind is IndexKind.EXACT_FLAT:
        return NeighborIndex(kind, ind)

    n_lists = int(math.ceil(math.sqrt(ind.M))) if n_lists is None else int(n_lists)
    if not 1 <= n_lists <= ind.M:
        raise TooFewRows(f"n_lists={n_lists} needs at least as many inducing rows (M={ind.M})")
    centroids = kmeans_pp(ind.Z, n_lists, max_iters=max_iters, seed=seed)
    labels = cdist(ind.Z, centroids, "sqeuclidean").argmin(axis=1)
    lists = tuple(np.flatnonzero(labels == j) for j in range(n_lists))
    logger.info("Built IVF index: %d lists over %d rows (largest list %d)",
                n_lists, ind.M, max(len(lst) for lst in lists))
    return NeighborIndex(kind, ind, n_lists, min(n_probe, n_lists), centroids, lists)


def search(idx: NeighborIndex, z: np.ndarray, K: int) -> Tuple[np.ndarray, np.ndarray]:
    """Row ids and squared distances of the K nearest inducing rows."""
    z = np.asarray(z, dtype=np.float64)
    Z = idx.inducing.Z
    if z.ndim != 1 or z.shape[0] != Z.shape[1]:
        raise DimensionMismatch(f"query has shape {z.shape}, inducing rows have width {Z.shape[1]}")
    if not 1 <= K <= idx.M:
        raise TooFewRows(f"K={K} must lie in [1, M={idx.M}]")

    if idx.kind is IndexKind.EXACT_FLAT:
        diff = Z - z
        return _nearest(np.einsum("ij,ij->i", diff, diff), np.arange(idx.M), K)

    cd = idx.centroids - z
    list_order = np.lexsort((np.arange(idx.n_lists), np.einsum("ij,ij->i", cd, cd)))
    # widen the probe until the candidate pool can hold K rows
    n_probe, pool = idx.n_probe, 0
    while True:
        probed = list_order[:n_probe]
        pool = sum(len(idx.posting_lists[j]) for j in probed)
        if pool >= K or n_probe >= idx.n_lists:
            break
        n_probe += 1
    candidates = np.concatenate([idx.posting_lists[j] for j in probed])
    diff = Z[candidates] - z
    return _nearest(np.einsum("ij,ij->i", diff, diff), candidates, K)


def query_knn(idx: NeighborIndex, z: np.ndarray, K: int) -> List[Tuple[int, float]]:
    ids, d2 = search(idx, z, K)
    return [(int(i), float(np.sqrt(d))) for i, d in zip(ids, d2)]


def append_index(path: Union[str, Path], idx: NeighborIndex) -> Path:
    """Append (or replace) the GAPAINDX section after an inducing-set file."""
    path = Path(path)
    data = path.read_bytes()[:inducing_section_size(idx.M, idx.inducing.width)]
    kind_tag = 0 if idx.kind is IndexKind.EXACT_FLAT else 1
    d = idx.inducing.width
    parts = [_HEADER.pack(MAGIC, kind_tag, idx.n_lists, idx.n_probe, d)]
    if idx.kind is IndexKind.COARSE_IVF:
        parts.append(np.ascontiguousarray(idx.centroids, dtype="<f8").tobytes())
        for lst in idx.posting_lists:
            parts.append(struct.pack("<I", len(lst)))
            parts.append(np.ascontiguousarray(lst, dtype="<u4").tobytes())
    path.write_bytes(data + b"".join(parts))
    return path


def load_index(path: Union[str, Path], ind: InducingSet) -> Optional[NeighborIndex]:
    """Read the index section stored after `ind`; None when absent."""
    data = Path(path).read_bytes()
    offset = inducing_section_size(ind.M, ind.width)
    if len(data) == offset:
        return None
    if len(data) < offset + _HEADER.size:
        raise CorruptFile(f"{path}: truncated index section")
    magic, kind_tag, n_lists, n_probe, d = _HEADER.unpack_from(data, offset)
    if magic != MAGIC or d != ind.width:
        raise CorruptFile(f"{path}: bad index section")
    offset += _HEADER.size
    if kind_tag == 0:
        return NeighborIndex(IndexKind.EXACT_FLAT, ind)
    try:
        centroids = np.frombuffer(data, dtype="<f8", count=n_lists * d, offset=offset)
        offset += 8 * n_lists * d
        lists = []
        for _ in range(n_lists):
            (size,) = struct.unpack_from("<I", data, offset)
            offset += 4
            lists.append(np.frombuffer(data, dtype="<u4", count=size, offset=offset).astype(np.int64))
            offset += 4 * size
    except (ValueError, struct.error) as exc:
        raise CorruptFile(f"{path}: truncated posting lists") from exc
    if sum(len(lst) for lst in lists) != ind.M:
        raise CorruptFile(f"{path}: posting lists do not cover the inducing set")
    return NeighborIndex(IndexKind.COARSE_IVF, ind, n_lists, n_probe,
                         centroids.astype(np.float64).reshape(n_lists, d), tuple(lists))
