"""
Turning an output GaussianVector into predictions and uncertainty scores.

Classification: the Laplace bridge gives closed-form probabilities; the
logit-space Monte-Carlo decomposition gives TU / AU / EU (and BALD = EU).
Regression: a small noise head learns the aleatoric variance on top of the
fixed GAPA epistemic variance by minimising the Gaussian NLL.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import expit, softmax

from ..evaluation.metrics import predictive_entropy
from .config import DEFAULT_MC_SAMPLES, DEFAULT_TOP_K
from .errors import ConfigError, DimensionMismatch, NegativeEntropy, NegativeVariance, NonFiniteLoss
from .tensor import as_matrix, as_vector

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6
HIDDEN_WIDTH = 32


@dataclass(frozen=True)
class UncertaintyDecomposition:
    """Entropy split in nats; epistemic is total minus aleatoric.

    `differential` marks Gaussian (regression) entropies, which may be negative.
    """

    total: float
    aleatoric: float
    epistemic: float
    differential: bool = False

    def __post_init__(self):
        if not self.differential and (self.total < -1e-12 or self.aleatoric < -1e-12):
            raise NegativeEntropy(f"entropies must be >= 0, got TU={self.total}, AU={self.aleatoric}")

    @classmethod
    def from_entropies(cls, total: float, aleatoric: float, differential: bool = False) -> "UncertaintyDecomposition":
        return cls(float(total), float(aleatoric), float(total) - float(aleatoric), differential)


def _check_moments(mu, v) -> Tuple[np.ndarray, np.ndarray]:
    mu = as_vector(mu, "mu")
    v = as_vector(v, "v")
    if mu.shape != v.shape:
        raise DimensionMismatch(f"mu has {mu.shape[0]} entries, v has {v.shape[0]}")
    if np.any(v < 0):
        raise NegativeVariance("logit variances must be >= 0")
    return mu, v


def laplace_bridge(mu, v) -> np.ndarray:
    """softmax(mu / sqrt(1 + pi/8 * v))"""
    mu, v = _check_moments(mu, v)
    return softmax(mu / np.sqrt(1.0 + (math.pi / 8.0) * v))


def mc_entropy_decomposition(mu, v, S: int = DEFAULT_MC_SAMPLES, top_k: int = DEFAULT_TOP_K,
                             seed: int = 0) -> Tuple[UncertaintyDecomposition, np.ndarray]:
    """Sample logits, never weights: l_s = mu + sqrt(v) * eps_s on the top-k logits.

    Returns the decomposition and the averaged probabilities scattered back to
    the full class axis (zero outside the kept logits).
    """
    mu, v = _check_moments(mu, v)
    if S < 1:
        raise ConfigError(f"need at least one sample, got S={S}")
    C = mu.shape[0]
    keep = np.argsort(-mu, kind="stable")[:max(1, min(top_k, C))]
    mu_k, v_k = mu[keep], v[keep]

    if not np.any(v_k > 0):
        p_bar = softmax(mu_k)
        h = predictive_entropy(p_bar)
        decomposition = UncertaintyDecomposition(h, h, 0.0)
    else:
        eps = np.random.default_rng(seed).standard_normal((S, keep.shape[0]))
        probs = softmax(mu_k + np.sqrt(v_k) * eps, axis=1)
        p_bar = probs.mean(axis=0)
        aleatoric = float(np.mean([predictive_entropy(p) for p in probs]))
        decomposition = UncertaintyDecomposition.from_entropies(predictive_entropy(p_bar), aleatoric)

    full = np.zeros(C)
    full[keep] = p_bar
    return decomposition, full


def bald_score(mu, v, S: int = DEFAULT_MC_SAMPLES, seed: int = 0, top_k: int = DEFAULT_TOP_K) -> float:
    """Mutual information between the label and the sampled logits."""
    return mc_entropy_decomposition(mu, v, S=S, top_k=top_k, seed=seed)[0].epistemic


def gaussian_decomposition(epi_var, ale_var) -> UncertaintyDecomposition:
    """Differential entropies: TU = 1/2 log(2 pi e (epi + ale)), AU = 1/2 log(2 pi e ale)."""
    epi = np.atleast_1d(np.asarray(epi_var, dtype=np.float64))
    ale = np.atleast_1d(np.asarray(ale_var, dtype=np.float64))
    if np.any(epi < 0) or np.any(ale <= 0):
        raise NegativeVariance("need epistemic >= 0 and aleatoric > 0")
    c = math.log(2.0 * math.pi * math.e)
    total = 0.5 * float(np.sum(c + np.log(epi + ale)))
    aleatoric = 0.5 * float(np.sum(c + np.log(ale)))
    return UncertaintyDecomposition.from_entropies(total, aleatoric, differential=True)


# ---------------------------------------------------------------------------
# noise head

@dataclass(frozen=True)
class NoiseHead:
    """sigma2_ale(x) = softplus(s(x)) + floor on standardised features.

    s(x) is linear, or tanh-hidden-then-linear when hidden weights are set.
    """

    weights: np.ndarray
    bias: float
    hidden_weights: Optional[np.ndarray] = None
    hidden_bias: Optional[np.ndarray] = None
    feature_mean: Optional[np.ndarray] = None
    feature_scale: Optional[np.ndarray] = None
    floor: float = VARIANCE_FLOOR
    train_losses: Tuple[float, ...] = field(default=(), compare=False, repr=False)

    @property
    def n_features(self) -> int:
        if self.hidden_weights is not None:
            return int(self.hidden_weights.shape[1])
        return int(self.weights.shape[0])

    def params(self) -> Dict[str, np.ndarray]:
        out = {"weights": np.asarray(self.weights), "bias": np.array([self.bias])}
        if self.hidden_weights is not None:
            out["hidden_weights"] = np.asarray(self.hidden_weights)
            out["hidden_bias"] = np.asarray(self.hidden_bias)
        return out

    def to_arrays(self, prefix: str = "noise_head.") -> Dict[str, np.ndarray]:
        """Flat named arrays for the container's auxiliary section."""
        arrays = {prefix + k: v for k, v in self.params().items()}
        arrays[prefix + "floor"] = np.array([self.floor])
        if self.feature_mean is not None:
            arrays[prefix + "feature_mean"] = np.asarray(self.feature_mean)
            arrays[prefix + "feature_scale"] = np.asarray(self.feature_scale)
        return arrays

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], prefix: str = "noise_head.") -> "NoiseHead":
        get = lambda name: arrays.get(prefix + name)  # noqa: E731
        return cls(np.asarray(get("weights"), dtype=np.float64), float(get("bias")[0]),
                   get("hidden_weights"), get("hidden_bias"), get("feature_mean"), get("feature_scale"),
                   float(get("floor")[0]))


def _standardize(head: NoiseHead, features: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if X.shape[1] != head.n_features:
        raise DimensionMismatch(f"noise head expects {head.n_features} features, got {X.shape[1]}")
    if head.feature_mean is not None:
        X = (X - head.feature_mean) / head.feature_scale
    return X


def _score(head: NoiseHead, X: np.ndarray):
    if head.hidden_weights is None:
        return X @ head.weights + head.bias, None
    h = np.tanh(X @ head.hidden_weights.T + head.hidden_bias)
    return h @ head.weights + head.bias, h


def predict_variance(head: NoiseHead, features) -> np.ndarray:
    """Aleatoric variance per row, never below the floor."""
    s, _ = _score(head, _standardize(head, features))
    return np.logaddexp(0.0, s) + head.floor


def noise_head_loss_and_grad(head: NoiseHead, features, targets, means, epi_var) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean Gaussian NLL with sigma2_tot = epi_var + softplus(s) + floor, and its gradient."""
    X = _standardize(head, features)
    y = np.asarray(targets, dtype=np.float64).ravel()
    mu = np.asarray(means, dtype=np.float64).ravel()
    epi = np.asarray(epi_var, dtype=np.float64).ravel()
    N = X.shape[0]
    if not y.shape[0] == mu.shape[0] == epi.shape[0] == N:
        raise DimensionMismatch("features, targets, means and epi_var need the same row count")

    s, h = _score(head, X)
    sigma2 = epi + np.logaddexp(0.0, s) + head.floor
    r2 = (y - mu) ** 2
    loss = float(np.mean(r2 / (2.0 * sigma2) + 0.5 * np.log(2.0 * math.pi * sigma2)))

    # d loss / d s through sigma2 and softplus' = sigmoid
    g_s = (0.5 / sigma2 - r2 / (2.0 * sigma2 * sigma2)) * expit(s) / N
    grads = {"bias": np.array([g_s.sum()])}
    if h is None:
        grads["weights"] = X.T @ g_s
    else:
        grads["weights"] = h.T @ g_s
        g_h = np.outer(g_s, head.weights) * (1.0 - h * h)
        grads["hidden_weights"] = g_h.T @ X
        grads["hidden_bias"] = g_h.sum(axis=0)
    return loss, grads


def _step(head: NoiseHead, grads: Dict[str, np.ndarray], lr: float) -> NoiseHead:
    updates = {"weights": head.weights - lr * grads["weights"],
               "bias": float(head.bias - lr * grads["bias"][0])}
    if head.hidden_weights is not None:
        updates["hidden_weights"] = head.hidden_weights - lr * grads["hidden_weights"]
        updates["hidden_bias"] = head.hidden_bias - lr * grads["hidden_bias"]
    return replace(head, **updates)


def _inverse_softplus(x: float) -> float:
    return float(x + np.log(-np.expm1(-x)))


def init_noise_head(features, targets, means, epi_var, hidden: int = 0, seed: int = 0,
                    floor: float = VARIANCE_FLOOR) -> NoiseHead:
    """Standardisation from the data, bias at the homoscedastic solution, small random weights."""
    X = as_matrix(np.atleast_2d(np.asarray(features, dtype=np.float64)), "features")
    y = np.asarray(targets, dtype=np.float64).ravel()
    mu = np.asarray(means, dtype=np.float64).ravel()
    epi = np.asarray(epi_var, dtype=np.float64).ravel()
    if np.any(epi < 0):
        raise NegativeVariance("epi_var must be >= 0")

    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    target_var = max(float(np.mean((y - mu) ** 2) - np.mean(epi)) - floor, 1e-3)
    bias = _inverse_softplus(target_var)

    rng = np.random.default_rng(seed)
    f = X.shape[1]
    if hidden:
        return NoiseHead(rng.normal(0.0, 0.01, size=hidden), bias,
                         rng.normal(0.0, 1.0 / math.sqrt(f), size=(hidden, f)), np.zeros(hidden),
                         mean, scale, floor)
    return NoiseHead(rng.normal(0.0, 0.01, size=f), bias, None, None, mean, scale, floor)


def fit_noise_head(features, targets, means, epi_var, epochs: int = 2000, lr: float = 0.05,
                   seed: int = 0, hidden: int = 0) -> NoiseHead:
    """Full-batch gradient descent on the Gaussian NLL; means and epi_var stay fixed.

    Returns the lowest-loss parameters seen, so the final loss never exceeds
    the initial one.
    """
    head = init_noise_head(features, targets, means, epi_var, hidden=hidden, seed=seed)
    best, best_loss = head, math.inf
    losses = []
    for epoch in range(epochs + 1):
        loss, grads = noise_head_loss_and_grad(head, features, targets, means, epi_var)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise NonFiniteLoss(f"noise-head loss diverged at epoch {epoch} (lr={lr})")
        losses.append(loss)
        if loss < best_loss:
            best, best_loss = head, loss
        if epoch < epochs:
            head = _step(head, grads, lr)
    logger.info("Noise head trained: NLL %.4f -> %.4f over %d epochs", losses[0], best_loss, epochs)
    return replace(best, train_losses=tuple(losses))
