"""
Desk-scale toy datasets and backbones.

Datasets are written as CSV (feature columns x0..x{d-1}, then `label` or `y`)
with full float precision, so regenerating with the same seed rewrites
byte-identical files. Backbones are scikit-learn MLPs converted into frozen
NetworkSpec containers.
"""

from __future__ import annotations

import logging
import math
from enum import Enum
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.datasets import make_moons
from sklearn.neural_network import MLPClassifier, MLPRegressor

from .errors import MissingArtifact
from .network import NetworkSpec, network_from_sklearn, save_network

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


class ToyKind(str, Enum):
    TWO_MOONS = "two_moons"
    GAP_REGRESSION_1D = "gap_regression"
    ROTATED_SHIFT = "rotated_shift"


def write_dataset(path: Union[str, Path], X: np.ndarray, y: Optional[np.ndarray] = None,
                  target: str = "label") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(np.asarray(X, dtype=np.float64), columns=[f"x{i}" for i in range(X.shape[1])])
    if y is not None:
        frame[target] = y
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def load_dataset(path: Union[str, Path]) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Features and (when present) the `label` or `y` column."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"dataset {path} does not exist")
    frame = pd.read_csv(path, float_precision="round_trip")
    features = [c for c in frame.columns if c.startswith("x")]
    X = frame[features].to_numpy(dtype=np.float64)
    if "label" in frame.columns:
        return X, frame["label"].to_numpy(dtype=np.int64)
    if "y" in frame.columns:
        return X, frame["y"].to_numpy(dtype=np.float64)
    return X, None


def rotate(X: np.ndarray, degrees: float, center: Optional[np.ndarray] = None) -> np.ndarray:
    """Rotate 2-D points counter-clockwise about `center` (default: their mean)."""
    X = np.asarray(X, dtype=np.float64)
    center = X.mean(axis=0) if center is None else np.asarray(center, dtype=np.float64)
    t = math.radians(degrees)
    R = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    return (X - center) @ R.T + center


def far_field(X: np.ndarray, n: int, rng: np.random.Generator, factor: float = 3.0) -> np.ndarray:
    """Points at distance (factor, factor + 1) x data radius from the data centre."""
    center = X.mean(axis=0)
    radius = float(np.max(np.linalg.norm(X - center, axis=1)))
    angles = rng.uniform(0.0, 2.0 * math.pi, size=n)
    dist = radius * rng.uniform(factor, factor + 1.0, size=n)
    return center + dist[:, None] * np.column_stack([np.cos(angles), np.sin(angles)])


def two_moons(n_train: int = 500, n_test: int = 500, n_ood: int = 200, noise: float = 0.1,
              seed: int = 0) -> Dict[str, Tuple[np.ndarray, Optional[np.ndarray]]]:
    rng = np.random.default_rng(seed)
    X, y = make_moons(n_samples=n_train + n_test, noise=noise, random_state=int(rng.integers(2 ** 31)))
    order = rng.permutation(X.shape[0])
    X, y = X[order], y[order]
    train = (X[:n_train], y[:n_train])
    return {
        "train": train,
        "test": (X[n_train:], y[n_train:]),
        "ood": (far_field(train[0], n_ood, rng), None),
    }


def _gap_function(x: np.ndarray) -> np.ndarray:
    return np.sin(x) + 0.1 * x


def _gap_noise(x: np.ndarray) -> np.ndarray:
    return 0.05 + 0.25 * np.abs(x) / 4.0


def gap_regression(n_train: int = 400, n_test: int = 400, n_ood: int = 100,
                   intervals: Sequence[Tuple[float, float]] = ((-4.0, -1.0), (1.0, 4.0)),
                   seed: int = 0) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """y = sin(x) + 0.1 x + heteroscedastic noise on disjoint intervals.

    `test` is drawn like `train`; `ood` covers the gap between the intervals.
    """
    rng = np.random.default_rng(seed)
    (a0, a1), (b0, b1) = intervals

    def sample(n):
        left = rng.random(n) < (a1 - a0) / ((a1 - a0) + (b1 - b0))
        x = np.where(left, rng.uniform(a0, a1, n), rng.uniform(b0, b1, n))
        return x[:, None], _gap_function(x) + _gap_noise(x) * rng.standard_normal(n)

    gap_x = rng.uniform(a1, b0, n_ood)
    return {
        "train": sample(n_train),
        "test": sample(n_test),
        "ood": (gap_x[:, None], _gap_function(gap_x) + _gap_noise(gap_x) * rng.standard_normal(n_ood)),
    }


def rotated_shift(angles: Sequence[float] = (0, 15, 30, 45, 60, 90), n_train: int = 500,
                  n_test: int = 500, noise: float = 0.1, seed: int = 0) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """Two moons whose test copies are rotated about the training centre."""
    base = two_moons(n_train, n_test, n_ood=0, noise=noise, seed=seed)
    center = base["train"][0].mean(axis=0)
    X_test, y_test = base["test"]
    splits = {"train": base["train"], "test": base["test"]}
    for angle in angles:
        splits[f"rotated_{int(angle)}" if float(angle).is_integer() else f"rotated_{angle}"] = (
            rotate(X_test, angle, center), y_test)
    return splits


def fit_toy_backbone(kind: Union[str, ToyKind], X: np.ndarray, y: np.ndarray,
                     hidden: Sequence[int] = (64,), activation: str = "tanh",
                     seed: int = 0, max_iter: int = 3000) -> NetworkSpec:
    """Train a small scikit-learn MLP and freeze it as a NetworkSpec."""
    kind = ToyKind(kind)
    params = dict(hidden_layer_sizes=tuple(hidden), activation=activation, random_state=seed,
                  max_iter=max_iter, tol=1e-6, alpha=1e-4)
    if kind is ToyKind.GAP_REGRESSION_1D:
        model = MLPRegressor(learning_rate_init=1e-2, **params).fit(X, y)
        logger.info("Toy regressor trained, R^2 = %.3f", model.score(X, y))
    else:
        model = MLPClassifier(**params).fit(X, y)
        logger.info("Toy classifier trained, accuracy = %.3f", model.score(X, y))
    return network_from_sklearn(model)


def gen_toy(kind: Union[str, ToyKind], out_dir: Union[str, Path], seed: int = 0,
            backbone: bool = True, hidden: Sequence[int] = (64,), **params) -> Dict[str, Path]:
    """Write the dataset splits (and a frozen backbone) for one toy kind."""
    kind = ToyKind(kind)
    out_dir = Path(out_dir)
    if kind is ToyKind.TWO_MOONS:
        splits = two_moons(seed=seed, **params)
    elif kind is ToyKind.GAP_REGRESSION_1D:
        splits = gap_regression(seed=seed, **params)
    else:
        splits = rotated_shift(seed=seed, **params)

    target = "y" if kind is ToyKind.GAP_REGRESSION_1D else "label"
    paths = {name: write_dataset(out_dir / f"{name}.csv", X, y, target) for name, (X, y) in splits.items()}
    if backbone:
        net = fit_toy_backbone(kind, *splits["train"], hidden=hidden, seed=seed)
        paths["backbone"] = save_network(net, out_dir / "backbone.gapanet", meta={"toy": kind.value, "seed": seed})
    logger.info("Generated %s toy data in %s (%d files)", kind.value, out_dir, len(paths))
    return paths
