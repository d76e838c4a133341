"""
Offline activation cache: pre-activations at one GAPA point over a reference
dataset, stored as float32 rows behind a small fixed header.

File layout (little endian):
    b"GAPACACH" | u16 version | u32 layer_index | u32 width | u64 rows |
    32-byte fingerprint | rows x width float32
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional, Union

import numpy as np
from tqdm import tqdm

from .errors import ConfigError, CorruptFile, DimensionMismatch, EmptyCache, FingerprintMismatch, NetworkValidationError
from .network import NetworkSpec, network_fingerprint, pre_activation

logger = logging.getLogger(__name__)

MAGIC = b"GAPACACH"
VERSION = 1
_HEADER = struct.Struct("<8sHIIQ32s")


def cache_fingerprint(net: NetworkSpec, dataset_id: str = "") -> bytes:
    return hashlib.sha256(network_fingerprint(net) + dataset_id.encode("utf-8")).digest()


@dataclass(frozen=True)
class ActivationCache:
    path: Path
    layer_index: int
    width: int
    rows: int
    source_fingerprint: bytes

    @property
    def storage(self) -> np.memmap:
        """Read-only float32 view of the rows."""
        if self.rows == 0:
            return np.zeros((0, self.width), dtype="<f4")
        return np.memmap(self.path, dtype="<f4", mode="r", offset=_HEADER.size,
                         shape=(self.rows, self.width))


def _write_header(fh, layer: int, width: int, rows: int, fingerprint: bytes) -> None:
    fh.write(_HEADER.pack(MAGIC, VERSION, layer, width, rows, fingerprint))


def build_cache(net: NetworkSpec, dataset: Iterable[np.ndarray], layer: int,
                out_path: Union[str, Path], dataset_id: str = "",
                progress: bool = False) -> ActivationCache:
    """Run every dataset item through the frozen network and log z at `layer`.

    Token sequences contribute one row per position.
    """
    if layer not in net.gapa_points:
        raise NetworkValidationError(f"layer {layer} is not a GAPA point of this network")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fingerprint = cache_fingerprint(net, dataset_id)
    width = net.layer_widths()[layer]

    rows = 0
    with out_path.open("wb") as fh:
        _write_header(fh, layer, 0, 0, fingerprint)
        for item in tqdm(dataset, desc=f"caching layer {layer}", disable=not progress):
            z = np.atleast_2d(pre_activation(net, item, layer))
            if width is None:
                width = int(z.shape[-1])
            if z.shape[-1] != width:
                raise DimensionMismatch(f"pre-activation width {z.shape[-1]} != {width}")
            fh.write(np.ascontiguousarray(z, dtype="<f4").tobytes())
            rows += z.shape[0]
        if rows == 0:
            raise EmptyCache("dataset is empty")
        fh.seek(0)
        _write_header(fh, layer, width, rows, fingerprint)

    logger.info("Cached %d pre-activations of width %d at layer %d -> %s", rows, width, layer, out_path)
    return ActivationCache(out_path, layer, int(width), rows, fingerprint)


def open_cache(path: Union[str, Path], expected_fingerprint: Optional[bytes] = None) -> ActivationCache:
    path = Path(path)
    with path.open("rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise CorruptFile(f"{path}: truncated cache header")
    magic, version, layer, width, rows, fingerprint = _HEADER.unpack(head)
    if magic != MAGIC:
        raise CorruptFile(f"{path} is not an activation cache")
    if version != VERSION:
        raise CorruptFile(f"{path}: unsupported cache version {version}")
    expected_size = _HEADER.size + 4 * width * rows
    if path.stat().st_size != expected_size:
        raise CorruptFile(f"{path}: expected {expected_size} bytes, found {path.stat().st_size}")
    if expected_fingerprint is not None and expected_fingerprint != fingerprint:
        raise FingerprintMismatch(f"{path} was built from a different network or dataset")
    return ActivationCache(path, layer, width, rows, fingerprint)


def stream_rows(cache: ActivationCache, batch: int) -> Iterator[np.ndarray]:
    """Yield float64 row blocks of at most `batch` rows, in order."""
    if batch < 1:
        raise ConfigError(f"batch must be >= 1, got {batch}")
    expected_size = _HEADER.size + 4 * cache.width * cache.rows
    if cache.path.stat().st_size != expected_size:
        raise CorruptFile(f"{cache.path}: file size changed since the cache was opened")
    storage = cache.storage
    for start in range(0, cache.rows, batch):
        block = np.asarray(storage[start:start + batch], dtype=np.float64)
        if not np.all(np.isfinite(block)):
            raise CorruptFile(f"{cache.path}: non-finite values in rows {start}..{start + len(block)}")
        yield block


def load_rows(cache: Union[ActivationCache, np.ndarray], batch: int = 65536) -> np.ndarray:
    """All rows widened to float64; arrays pass straight through."""
    if isinstance(cache, ActivationCache):
        if cache.rows == 0:
            raise EmptyCache(f"{cache.path} has no rows")
        return np.concatenate(list(stream_rows(cache, batch)), axis=0)
    rows = np.asarray(cache, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise EmptyCache(f"expected a non-empty [N, d] matrix, got shape {rows.shape}")
    return rows
