"""
Frozen backbone description and its exact deterministic forward pass.

A NetworkSpec is an ordered list of layer objects. Every layer knows how to
evaluate itself on a vector (or a token sequence, shape [T, d]); the variance
propagation code reuses the very same functions for its mean path, which is
what keeps GAPA point predictions bit-identical to the backbone.

Container format (little endian):
    b"GAPANET1" | u32 header length | UTF-8 JSON header | float64 blobs | u32 CRC32
The JSON header lists layer kinds, array shapes (blobs follow in declaration
order), task, GAPA points, schema version, a SHA-256 of the blob region, and
optional auxiliary metadata/arrays (GAPA attachments, noise head).
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, softmax

from .errors import (
    CorruptFile,
    DimensionMismatch,
    NetworkValidationError,
    SchemaVersionUnsupported,
)
from .tensor import as_matrix, as_vector

logger = logging.getLogger(__name__)

MAGIC = b"GAPANET1"
SCHEMA_VERSION = 1


class ActivationTag(str, Enum):
    RELU = "relu"
    TANH = "tanh"
    SILU = "silu"
    IDENTITY = "identity"

    def evaluate(self, z: np.ndarray) -> np.ndarray:
        if self is ActivationTag.RELU:
            return np.maximum(z, 0.0)
        if self is ActivationTag.TANH:
            return np.tanh(z)
        if self is ActivationTag.SILU:
            return z * expit(z)
        return np.array(z, dtype=np.float64, copy=True)

    def derivative(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if self is ActivationTag.RELU:
            # subgradient 0 at the kink
            return (z > 0).astype(np.float64)
        if self is ActivationTag.TANH:
            t = np.tanh(z)
            return 1.0 - t * t
        if self is ActivationTag.SILU:
            s = expit(z)
            return s * (1.0 + z * (1.0 - s))
        return np.ones_like(z)


class Task(str, Enum):
    REGRESSION = "regression"
    CLASSIFICATION = "classification"
    TOKEN_LM = "token_lm"


def affine(W: np.ndarray, b: Optional[np.ndarray], x: np.ndarray) -> np.ndarray:
    """x W^T + b along the last axis; shared by forward and propagation."""
    out = x @ W.T
    if b is not None:
        out = out + b
    return out


def rms_normalize(x: np.ndarray, gamma: np.ndarray, eps: float) -> np.ndarray:
    inv_rms = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * inv_rms * gamma


@dataclass(frozen=True)
class Linear:
    W: np.ndarray
    b: np.ndarray
    kind = "linear"

    def __post_init__(self):
        W = as_matrix(self.W, "W")
        b = as_vector(self.b, "b")
        if b.shape[0] != W.shape[0]:
            raise DimensionMismatch(f"bias has {b.shape[0]} entries for W with {W.shape[0]} rows")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def in_width(self) -> int:
        return int(self.W.shape[1])

    def out_width(self, in_width: Optional[int]) -> int:
        if in_width is not None and in_width != self.in_width:
            raise DimensionMismatch(f"Linear expects width {self.in_width}, got {in_width}")
        return int(self.W.shape[0])

    def forward(self, x: np.ndarray) -> np.ndarray:
        return affine(self.W, self.b, x)

    def arrays(self) -> List[Tuple[str, np.ndarray]]:
        return [("W", self.W), ("b", self.b)]


@dataclass(frozen=True)
class Activation:
    tag: ActivationTag
    kind = "activation"

    def __post_init__(self):
        object.__setattr__(self, "tag", ActivationTag(self.tag))

    in_width = None

    def out_width(self, in_width: Optional[int]) -> Optional[int]:
        return in_width

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.tag.evaluate(x)

    def arrays(self) -> List[Tuple[str, np.ndarray]]:
        return []


@dataclass(frozen=True)
class RMSNorm:
    gamma: np.ndarray
    eps: float = 1e-6
    kind = "rmsnorm"

    def __post_init__(self):
        object.__setattr__(self, "gamma", as_vector(self.gamma, "gamma"))
        if not self.eps > 0:
            raise NetworkValidationError("RMSNorm eps must be > 0")

    @property
    def in_width(self) -> int:
        return int(self.gamma.shape[0])

    def out_width(self, in_width: Optional[int]) -> int:
        if in_width is not None and in_width != self.in_width:
            raise DimensionMismatch(f"RMSNorm expects width {self.in_width}, got {in_width}")
        return self.in_width

    def forward(self, x: np.ndarray) -> np.ndarray:
        return rms_normalize(x, self.gamma, self.eps)

    def arrays(self) -> List[Tuple[str, np.ndarray]]:
        return [("gamma", self.gamma)]


@dataclass(frozen=True)
class SelfAttention:
    """Multi-head self-attention over a [T, d] sequence, no projection biases."""

    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    Wo: np.ndarray
    heads: int = 1
    causal: bool = True
    kind = "attention"

    def __post_init__(self):
        for name in ("Wq", "Wk", "Wv", "Wo"):
            object.__setattr__(self, name, as_matrix(getattr(self, name), name))
        d = self.Wq.shape[1]
        if self.Wk.shape != self.Wq.shape or self.Wv.shape[1] != d:
            raise DimensionMismatch("query/key/value projections must share the input width")
        if self.Wo.shape[1] != self.Wv.shape[0]:
            raise DimensionMismatch(f"Wo expects {self.Wo.shape[1]} inputs, values have {self.Wv.shape[0]}")
        if self.heads < 1 or self.Wq.shape[0] % self.heads or self.Wv.shape[0] % self.heads:
            raise NetworkValidationError(f"projection widths not divisible by {self.heads} heads")

    @property
    def in_width(self) -> int:
        return int(self.Wq.shape[1])

    @property
    def head_dim(self) -> int:
        return int(self.Wq.shape[0] // self.heads)

    def out_width(self, in_width: Optional[int]) -> int:
        if in_width is not None and in_width != self.in_width:
            raise DimensionMismatch(f"SelfAttention expects width {self.in_width}, got {in_width}")
        return int(self.Wo.shape[0])

    def split_heads(self, x: np.ndarray) -> np.ndarray:
        T, p = x.shape
        return x.reshape(T, self.heads, p // self.heads).transpose(1, 0, 2)

    def merge_heads(self, x: np.ndarray) -> np.ndarray:
        H, T, dh = x.shape
        return x.transpose(1, 0, 2).reshape(T, H * dh)

    def project(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return affine(self.Wq, None, x), affine(self.Wk, None, x), affine(self.Wv, None, x)

    def mask(self, T: int) -> np.ndarray:
        """True where position t may attend to position s."""
        if self.causal:
            return np.tril(np.ones((T, T), dtype=bool))
        return np.ones((T, T), dtype=bool)

    def weights(self, q: np.ndarray, k: np.ndarray) -> np.ndarray:
        """Attention probabilities, shape [heads, T, T]."""
        qh, kh = self.split_heads(q), self.split_heads(k)
        logits = qh @ kh.transpose(0, 2, 1) / np.sqrt(self.head_dim)
        logits = np.where(self.mask(q.shape[0]), logits, -np.inf)
        return softmax(logits, axis=-1)

    def combine(self, a: np.ndarray, v: np.ndarray) -> np.ndarray:
        return self.merge_heads(a @ self.split_heads(v))

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2:
            raise DimensionMismatch("SelfAttention needs a [T, d] token sequence")
        q, k, v = self.project(x)
        return affine(self.Wo, None, self.combine(self.weights(q, k), v))

    def arrays(self) -> List[Tuple[str, np.ndarray]]:
        return [("Wq", self.Wq), ("Wk", self.Wk), ("Wv", self.Wv), ("Wo", self.Wo)]


@dataclass(frozen=True)
class SoftmaxHead:
    """Marks the logit output; evaluation stops at the logits."""

    kind = "softmax_head"
    in_width = None

    def out_width(self, in_width: Optional[int]) -> Optional[int]:
        return in_width

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x

    def arrays(self) -> List[Tuple[str, np.ndarray]]:
        return []


@dataclass(frozen=True)
class ResidualAdd:
    """Adds the output of layer `source` (-1 is the network input)."""

    source: int
    kind = "residual"
    in_width = None

    def out_width(self, in_width: Optional[int]) -> Optional[int]:
        return in_width

    def forward(self, x: np.ndarray, skip: np.ndarray) -> np.ndarray:
        return x + skip

    def arrays(self) -> List[Tuple[str, np.ndarray]]:
        return []


LayerSpec = Union[Linear, Activation, RMSNorm, SelfAttention, SoftmaxHead, ResidualAdd]


@dataclass(frozen=True)
class NetworkSpec:
    layers: Tuple[LayerSpec, ...]
    gapa_points: FrozenSet[int] = frozenset()
    task: Task = Task.CLASSIFICATION

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "gapa_points", frozenset(int(i) for i in self.gapa_points))
        object.__setattr__(self, "task", Task(self.task))
        if not self.layers:
            raise NetworkValidationError("a network needs at least one layer")
        for idx in self.gapa_points:
            if not 0 <= idx < len(self.layers) or not isinstance(self.layers[idx], Activation):
                raise NetworkValidationError(f"GAPA point {idx} does not index an Activation layer")
        for idx, layer in enumerate(self.layers):
            if isinstance(layer, SoftmaxHead) and idx != len(self.layers) - 1:
                raise NetworkValidationError("SoftmaxHead must be the last layer")
            if isinstance(layer, ResidualAdd) and not -1 <= layer.source < idx:
                raise NetworkValidationError(f"residual at {idx} refers to layer {layer.source}")
        widths = self.layer_widths()
        for idx, layer in enumerate(self.layers):
            if isinstance(layer, ResidualAdd):
                src = widths[layer.source + 1]
                if src is not None and widths[idx] is not None and src != widths[idx]:
                    raise DimensionMismatch(f"residual at {idx} adds width {src} to width {widths[idx]}")

    @property
    def input_width(self) -> Optional[int]:
        for layer in self.layers:
            if layer.in_width is not None:
                return int(layer.in_width)
        return None

    @property
    def is_sequence_model(self) -> bool:
        return any(isinstance(layer, SelfAttention) for layer in self.layers)

    def layer_widths(self) -> List[Optional[int]]:
        """widths[i] is the width entering layer i; widths[-1] is the output width."""
        width = self.input_width
        widths = [width]
        for layer in self.layers:
            width = layer.out_width(width)
            widths.append(width)
        return widths

    def with_gapa_points(self, points: Iterable[int]) -> "NetworkSpec":
        return replace(self, gapa_points=frozenset(points))

    def activation_indices(self) -> List[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, Activation)]


def _check_input(net: NetworkSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2):
        raise DimensionMismatch(f"input must be a vector or a [T, d] sequence, got {x.shape}")
    if net.is_sequence_model and x.ndim != 2:
        raise DimensionMismatch("this network consumes token sequences of shape [T, d]")
    width = net.input_width
    if width is not None and x.shape[-1] != width:
        raise DimensionMismatch(f"input width {x.shape[-1]} does not match network width {width}")
    return x


def forward_trace(net: NetworkSpec, x: np.ndarray, stop: Optional[int] = None) -> List[np.ndarray]:
    """Input followed by the output of every layer up to (excluding) `stop`."""
    states = [_check_input(net, x)]
    end = len(net.layers) if stop is None else stop
    for layer in net.layers[:end]:
        if isinstance(layer, ResidualAdd):
            states.append(layer.forward(states[-1], states[layer.source + 1]))
        else:
            states.append(layer.forward(states[-1]))
    return states


def forward_deterministic(net: NetworkSpec, x: np.ndarray) -> np.ndarray:
    return forward_trace(net, x)[-1]


def pre_activation(net: NetworkSpec, x: np.ndarray, layer: int) -> np.ndarray:
    """The value entering layer `layer` (its pre-activation for an Activation layer)."""
    if not 0 <= layer < len(net.layers):
        raise NetworkValidationError(f"layer {layer} out of range")
    return forward_trace(net, x, stop=layer)[-1]


# ---------------------------------------------------------------------------
# serialization

def _layer_header(layer: LayerSpec) -> Dict[str, Any]:
    entry: Dict[str, Any] = {"kind": layer.kind}
    if isinstance(layer, Activation):
        entry["tag"] = layer.tag.value
    elif isinstance(layer, RMSNorm):
        entry["eps"] = layer.eps
    elif isinstance(layer, SelfAttention):
        entry["heads"] = layer.heads
        entry["causal"] = bool(layer.causal)
    elif isinstance(layer, ResidualAdd):
        entry["source"] = layer.source
    entry["arrays"] = [[name, list(arr.shape)] for name, arr in layer.arrays()]
    return entry


def _layer_from_header(entry: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> LayerSpec:
    kind = entry.get("kind")
    if kind == "linear":
        return Linear(arrays["W"], arrays["b"])
    if kind == "activation":
        return Activation(ActivationTag(entry["tag"]))
    if kind == "rmsnorm":
        return RMSNorm(arrays["gamma"], float(entry["eps"]))
    if kind == "attention":
        return SelfAttention(arrays["Wq"], arrays["Wk"], arrays["Wv"], arrays["Wo"],
                             heads=int(entry["heads"]), causal=bool(entry["causal"]))
    if kind == "softmax_head":
        return SoftmaxHead()
    if kind == "residual":
        return ResidualAdd(int(entry["source"]))
    raise CorruptFile(f"unknown layer kind {kind!r}")


def _blob(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _topology(net: NetworkSpec) -> Dict[str, Any]:
    return {"task": net.task.value, "layers": [_layer_header(layer) for layer in net.layers]}


def network_fingerprint(net: NetworkSpec) -> bytes:
    """SHA-256 over topology and weights (GAPA placement excluded)."""
    digest = hashlib.sha256(json.dumps(_topology(net), sort_keys=True).encode("utf-8"))
    for layer in net.layers:
        for _, arr in layer.arrays():
            digest.update(_blob(arr))
    return digest.digest()


@dataclass
class NetworkContainer:
    net: NetworkSpec
    meta: Dict[str, Any] = field(default_factory=dict)
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)


def save_network(net: NetworkSpec, path: Union[str, Path],
                 meta: Optional[Dict[str, Any]] = None,
                 arrays: Optional[Dict[str, np.ndarray]] = None) -> Path:
    path = Path(path)
    arrays = dict(sorted((arrays or {}).items()))
    blobs = [_blob(arr) for layer in net.layers for _, arr in layer.arrays()]
    blobs += [_blob(arr) for arr in arrays.values()]
    payload = b"".join(blobs)
    header = dict(_topology(net))
    header.update({
        "schema_version": SCHEMA_VERSION,
        "gapa_points": sorted(net.gapa_points),
        "aux_meta": meta or {},
        "aux_arrays": [[name, list(np.shape(arr))] for name, arr in arrays.items()],
        "weights_sha256": hashlib.sha256(payload).hexdigest(),
    })
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<I", len(head)) + head + payload
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
    logger.info("Saved network with %d layers to %s", len(net.layers), path)
    return path


def _take(payload: memoryview, offset: int, shape: Sequence[int]) -> Tuple[np.ndarray, int]:
    count = int(np.prod(shape, dtype=np.int64))
    end = offset + 8 * count
    if end > len(payload):
        raise CorruptFile("weight blob region is shorter than the header declares")
    arr = np.frombuffer(payload[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
    return arr, end


def read_container(path: Union[str, Path]) -> NetworkContainer:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8 or data[:len(MAGIC)] != MAGIC:
        raise CorruptFile(f"{path} is not a GAPA network container")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptFile(f"{path}: CRC32 mismatch (truncated or modified file)")
    (head_len,) = struct.unpack("<I", body[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    try:
        header = json.loads(body[start:start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: unreadable header") from exc
    if header.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionUnsupported(f"schema version {header.get('schema_version')} is not supported")

    payload = memoryview(body)[start + head_len:]
    if hashlib.sha256(payload).hexdigest() != header.get("weights_sha256"):
        raise CorruptFile(f"{path}: weight checksum mismatch")

    offset = 0
    layers = []
    for entry in header["layers"]:
        named = {}
        for name, shape in entry.get("arrays", []):
            named[name], offset = _take(payload, offset, shape)
        layers.append(_layer_from_header(entry, named))
    aux = {}
    for name, shape in header.get("aux_arrays", []):
        aux[name], offset = _take(payload, offset, shape)
    if offset != len(payload):
        raise CorruptFile(f"{path}: {len(payload) - offset} unexpected trailing bytes")

    net = NetworkSpec(tuple(layers), frozenset(header.get("gapa_points", [])), Task(header["task"]))
    return NetworkContainer(net=net, meta=header.get("aux_meta", {}), arrays=aux)


def load_network(path: Union[str, Path]) -> NetworkSpec:
    return read_container(path).net


def network_from_sklearn(model: Any, gapa_points: Iterable[int] = ()) -> NetworkSpec:
    """Convert a fitted scikit-learn MLPClassifier / MLPRegressor.

    A binary classifier's single logistic logit z becomes the logit pair
    [0, z], whose softmax equals the sklearn class probabilities.
    """
    hidden = ActivationTag(model.activation)
    layers: List[LayerSpec] = []
    n = len(model.coefs_)
    for i, (coef, bias) in enumerate(zip(model.coefs_, model.intercepts_)):
        W, b = np.asarray(coef, dtype=np.float64).T, np.asarray(bias, dtype=np.float64)
        last = i == n - 1
        if last and getattr(model, "out_activation_", "identity") == "logistic":
            W = np.vstack([np.zeros_like(W), W])
            b = np.concatenate([[0.0], b])
        layers.append(Linear(W, b))
        if not last:
            layers.append(Activation(hidden))
    if hasattr(model, "classes_"):
        layers.append(SoftmaxHead())
        task = Task.CLASSIFICATION
    else:
        task = Task.REGRESSION
    return NetworkSpec(tuple(layers), frozenset(gapa_points), task)
