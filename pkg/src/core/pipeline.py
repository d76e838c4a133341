"""
Pipeline stages: cache -> induce -> attach -> infer -> eval, plus sweeps.

Every stage reads its inputs from the configuration / output directory and
writes one artifact there. All randomness is derived from the root seed with
`stage_seed`, so re-running a stage on unchanged inputs rewrites the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError
from tqdm import tqdm

from ..evaluation import metrics
from .activation_cache import ActivationCache, build_cache, cache_fingerprint, open_cache
from .config import STAGES, PipelineConfig, stage_seed
from .errors import ConfigError, FingerprintMismatch, GapaError, MissingArtifact
from .gp_activation import GapaNetwork, attach_gapa
from .inducing import InducingSet, build_inducing_set, load_inducing_set
from .neighbor_index import NeighborIndex, append_index, build_index, load_index
from .network import Linear, NetworkSpec, Task, forward_deterministic, load_network, pre_activation, read_container, save_network
from .predictive_heads import (
    VARIANCE_FLOOR,
    NoiseHead,
    fit_noise_head,
    gaussian_decomposition,
    laplace_bridge,
    mc_entropy_decomposition,
    predict_variance,
)
from .propagation import propagate_network
from .toy_data import load_dataset

logger = logging.getLogger(__name__)

AUGMENTED = "augmented.gapanet"
PREDICTIONS = "predictions.jsonl"
METRICS = "metrics.json"
SHIFT = "shift.csv"
SHIFT_COLUMNS = ["split", "n", "nll", "ece", "accuracy", "crps", "rmse", "mean_eu", "mean_tu"]
_PATH_FIELDS = ("network_path", "out_dir", "train_path", "test_path", "ood_path")


def cache_path(out_dir: Path, layer: int) -> Path:
    return Path(out_dir) / f"cache_L{layer}.gapacache"


def inducing_path(out_dir: Path, layer: int) -> Path:
    return Path(out_dir) / f"inducing_L{layer}.gapaind"


def make_config(**fields) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(fields)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: Union[str, Path], **overrides) -> PipelineConfig:
    """Parse a JSON config; relative paths are taken from the config's folder."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"config file {path} does not exist")
    try:
        base = PipelineConfig.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    fields = base.model_dump()
    for name in _PATH_FIELDS:
        value = fields.get(name)
        if value is not None and not Path(value).is_absolute():
            fields[name] = path.parent / value
    fields["shift_paths"] = {name: value if Path(value).is_absolute() else path.parent / value
                             for name, value in fields["shift_paths"].items()}
    fields.update({k: v for k, v in overrides.items() if v is not None})
    return make_config(**fields)


def _require(path: Optional[Path], what: str) -> Path:
    if path is None:
        raise ConfigError(f"no {what} configured")
    if not Path(path).exists():
        raise MissingArtifact(f"{what} {path} does not exist")
    return Path(path)


def _backbone(config: PipelineConfig) -> NetworkSpec:
    return load_network(_require(config.network_path, "network"))


def dataset_id(config: PipelineConfig) -> str:
    if config.dataset_id:
        return config.dataset_id
    data = _require(config.train_path, "training set").read_bytes()
    return hashlib.sha256(data).hexdigest()[:16]


def resolve_gapa_layers(config: PipelineConfig, net: NetworkSpec) -> List[int]:
    """Configured layers, else the network's own GAPA points, else every activation."""
    layers = sorted(set(config.gapa_layers) or net.gapa_points or net.activation_indices())
    net.with_gapa_points(layers)
    return layers


def _train_rows(config: PipelineConfig) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    return load_dataset(_require(config.train_path, "training set"))


# ---------------------------------------------------------------------------
# stages

def cmd_cache(config: PipelineConfig, progress: bool = False) -> Dict[int, ActivationCache]:
    net = _backbone(config)
    layers = resolve_gapa_layers(config, net)
    X, _ = _train_rows(config)
    net = net.with_gapa_points(layers)
    dsid = dataset_id(config)
    return {layer: build_cache(net, X, layer, cache_path(config.out_dir, layer), dsid, progress)
            for layer in layers}


def cmd_induce(config: PipelineConfig) -> Dict[int, Tuple[InducingSet, NeighborIndex]]:
    net = _backbone(config)
    expected = cache_fingerprint(net, dataset_id(config))
    built = {}
    for layer in resolve_gapa_layers(config, net):
        cache = open_cache(_require(cache_path(config.out_dir, layer), "activation cache"), expected)
        M = min(cache.rows, config.m)
        if M < config.k:
            logger.warning("Layer %d: only %d inducing points, K will be clamped from %d", layer, M, config.k)
        seed = stage_seed(config.seed, "induce", layer)
        out = inducing_path(config.out_dir, layer)
        ind = build_inducing_set(cache, M, config.method, seed=seed, jitter=config.jitter,
                                 max_iters=config.max_iters, pair_budget=config.pair_budget,
                                 expected_fingerprint=expected, out_path=out)
        index = build_index(ind, config.index_kind, n_lists=config.n_lists, n_probe=config.n_probe, seed=seed)
        append_index(out, index)
        built[layer] = (ind, index)
    return built


def _load_attachments(out_dir: Path, layers: Iterable[int], expected: bytes):
    attachments = {}
    for layer in layers:
        path = _require(inducing_path(out_dir, layer), "inducing set")
        ind = load_inducing_set(path)
        if ind.fingerprint != expected:
            raise FingerprintMismatch(f"{path} was built from a different network or dataset")
        attachments[layer] = (ind, load_index(path, ind))
    return attachments


def _feature_layer(net: NetworkSpec, config: PipelineConfig) -> int:
    """Input of the last Linear layer (the pre-logit hidden state) unless configured."""
    if config.noise_head_feature_layer is not None:
        return config.noise_head_feature_layer
    return max(i for i, layer in enumerate(net.layers) if isinstance(layer, Linear))


def _features(net: NetworkSpec, X: np.ndarray, layer: int) -> np.ndarray:
    return np.stack([np.atleast_1d(pre_activation(net, x, layer)) for x in X])


def cmd_attach(config: PipelineConfig) -> GapaNetwork:
    net = _backbone(config)
    layers = resolve_gapa_layers(config, net)
    dsid = dataset_id(config)
    gnet = attach_gapa(net, _load_attachments(config.out_dir, layers, cache_fingerprint(net, dsid)), K=config.k)

    meta: Dict[str, Any] = {
        "gapa": {"layers": layers, "K": config.k, "dataset_id": dsid,
                 "inducing": {str(layer): inducing_path(config.out_dir, layer).name for layer in layers}},
        "seeds": {stage: stage_seed(config.seed, stage) for stage in STAGES},
        "root_seed": config.seed,
    }
    arrays: Dict[str, np.ndarray] = {}
    if net.task is Task.REGRESSION and config.head == "noise":
        head, feature_layer = _train_noise_head(gnet, config)
        arrays.update(head.to_arrays())
        meta["noise_head"] = {"feature_layer": feature_layer, "hidden": config.noise_head_hidden}
    save_network(gnet.net, Path(config.out_dir) / AUGMENTED, meta=meta, arrays=arrays)
    return gnet


def _train_noise_head(gnet: GapaNetwork, config: PipelineConfig) -> Tuple[NoiseHead, int]:
    net = gnet.net
    if net.layer_widths()[-1] != 1:
        raise ConfigError("the noise head supports single-output regression only")
    X, y = _train_rows(config)
    if y is None:
        raise ConfigError("the training set has no `y` column")
    states = [propagate_network(gnet, x, config.variant) for x in X]
    means = np.array([s.mean[0] for s in states])
    epi = np.array([s.var[0] for s in states])
    layer = _feature_layer(net, config)
    head = fit_noise_head(_features(net, X, layer), y, means, epi, epochs=config.noise_head_epochs,
                          lr=config.noise_head_lr, seed=stage_seed(config.seed, "attach"),
                          hidden=config.noise_head_hidden)
    return head, layer


@dataclass
class LoadedModel:
    model: Union[GapaNetwork, NetworkSpec]
    noise_head: Optional[NoiseHead] = None
    feature_layer: Optional[int] = None

    @property
    def net(self) -> NetworkSpec:
        return self.model.net if isinstance(self.model, GapaNetwork) else self.model


def load_model(config: PipelineConfig) -> LoadedModel:
    """The attached network from the output folder, else the bare backbone (no GAPA points)."""
    augmented = Path(config.out_dir) / AUGMENTED
    if not augmented.exists():
        net = _backbone(config)
        if net.gapa_points:
            raise MissingArtifact(f"{augmented} is missing; run `attach` first")
        logger.warning("No attached network in %s; predicting with the bare backbone", config.out_dir)
        return LoadedModel(net)

    container = read_container(augmented)
    net = container.net
    gapa_meta = container.meta.get("gapa", {})
    expected = cache_fingerprint(net, gapa_meta.get("dataset_id", ""))
    attachments = _load_attachments(config.out_dir, sorted(net.gapa_points), expected)
    model = attach_gapa(net, attachments, K=int(gapa_meta.get("K", config.k)))
    if "noise_head" in container.meta:
        return LoadedModel(model, NoiseHead.from_arrays(container.arrays),
                           int(container.meta["noise_head"]["feature_layer"]))
    return LoadedModel(model)


def predict_record(loaded: LoadedModel, x: np.ndarray, config: PipelineConfig, seed: int) -> Dict[str, Any]:
    state = propagate_network(loaded.model, x, config.variant)
    mean, var = state.mean, state.var
    if mean.ndim == 2:
        # next-token prediction reads the last position
        mean, var = mean[-1], var[-1]
    record: Dict[str, Any] = {"mean": mean.tolist(), "var": var.tolist()}

    if loaded.net.task is Task.REGRESSION:
        if loaded.noise_head is not None:
            features = pre_activation(loaded.net, x, loaded.feature_layer)
            ale = np.full_like(var, predict_variance(loaded.noise_head, features)[0])
        else:
            ale = np.full_like(var, VARIANCE_FLOOR)
        decomposition = gaussian_decomposition(var, ale)
        record["ale_var"] = ale.tolist()
    else:
        decomposition, p_bar = mc_entropy_decomposition(mean, var, S=config.mc_samples,
                                                        top_k=config.top_k, seed=seed)
        probs = p_bar if config.head == "mc" else laplace_bridge(mean, var)
        record["probs"] = probs.tolist()
        record["bald"] = decomposition.epistemic
    record.update(TU=decomposition.total, AU=decomposition.aleatoric, EU=decomposition.epistemic)
    return record


def _default_inputs(config: PipelineConfig):
    X, y = load_dataset(_require(config.test_path, "test set"))
    yield from (("test", False, x, None if y is None else y[i]) for i, x in enumerate(X))
    if config.ood_path is not None:
        X, y = load_dataset(_require(config.ood_path, "OOD set"))
        yield from (("ood", True, x, None if y is None else y[i]) for i, x in enumerate(X))


def cmd_infer(config: PipelineConfig, inputs: Optional[np.ndarray] = None,
              progress: bool = False) -> List[Dict[str, Any]]:
    """Predict every input and write one JSON line per sample."""
    loaded = load_model(config)
    rows = _default_inputs(config) if inputs is None else (("input", False, x, None) for x in inputs)
    records = []
    for i, (split, ood, x, label) in enumerate(tqdm(list(rows), desc="infer", disable=not progress)):
        record = predict_record(loaded, np.asarray(x, dtype=np.float64), config, stage_seed(config.seed, "infer", i))
        record.update(id=i, split=split, ood=ood)
        if label is not None:
            record["label"] = label.item() if isinstance(label, np.generic) else label
        records.append(record)

    out = Path(config.out_dir) / PREDICTIONS
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    logger.info("Wrote %d predictions to %s", len(records), out)
    return records


def read_predictions(path: Union[str, Path]) -> List[Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"predictions {path} do not exist; run `infer` first")
    with path.open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _ood_scores(records: List[Dict[str, Any]], report: Dict[str, Any]) -> None:
    flags = np.array([bool(r["ood"]) for r in records])
    if flags.all() or not flags.any():
        return
    report["entropy_auroc"] = metrics.auroc([r["TU"] for r in records], flags)
    report["eu_auroc"] = metrics.auroc([r["EU"] for r in records], flags)
    if "bald" in records[0]:
        report["bald_auroc"] = metrics.auroc([r["bald"] for r in records], flags)


def _shift_scores(config: PipelineConfig, loaded: LoadedModel) -> List[Dict[str, Any]]:
    """Score every configured shifted test set with the same heads as the test split."""
    rows = []
    for name, path in config.shift_paths.items():
        X, y = load_dataset(_require(path, f"shifted test set {name!r}"))
        records = [predict_record(loaded, x, config, stage_seed(config.seed, f"shift:{name}", i))
                   for i, x in enumerate(X)]
        row: Dict[str, Any] = {"split": name, "n": len(records),
                               "mean_eu": float(np.mean([r["EU"] for r in records])),
                               "mean_tu": float(np.mean([r["TU"] for r in records]))}
        if y is not None:
            means = np.array([r["mean"] for r in records])
            if loaded.net.task is Task.REGRESSION:
                var = np.array([np.add(r["var"], r["ale_var"]) for r in records])[:, 0]
                row.update(nll=metrics.gaussian_nll(y, means[:, 0], var),
                           crps=metrics.crps_gaussian(y, means[:, 0], np.sqrt(var)),
                           rmse=metrics.rmse(y, means[:, 0]))
            else:
                probs = np.array([r["probs"] for r in records])
                row.update(nll=metrics.classification_nll(probs, y), ece=metrics.ece(probs, y),
                           accuracy=metrics.accuracy(means, y))
        logger.info("Shifted split %s: %s", name, {k: v for k, v in row.items() if k != "split"})
        rows.append(row)
    frame = pd.DataFrame(rows, columns=SHIFT_COLUMNS)
    frame.to_csv(Path(config.out_dir) / SHIFT, index=False, lineterminator="\n")
    return rows


def cmd_eval(config: PipelineConfig, records: Optional[List[Dict[str, Any]]] = None) -> Dict[str, Any]:
    """Score predictions and check that GAPA left the backbone's outputs untouched."""
    if records is None:
        records = read_predictions(Path(config.out_dir) / PREDICTIONS)
    loaded = load_model(config)
    net = loaded.net
    test = [r for r in records if r["split"] == "test"]
    if not test:
        raise MissingArtifact("no test-split predictions to evaluate")
    X, y = load_dataset(_require(config.test_path, "test set"))
    if len(test) != X.shape[0]:
        raise MissingArtifact(f"{len(test)} test predictions for {X.shape[0]} test rows; re-run `infer`")

    backbone = np.stack([np.atleast_1d(forward_deterministic(net, x)) for x in X])
    means = np.array([r["mean"] for r in test])
    if backbone.ndim == 3:
        backbone = backbone[:, -1]
    report: Dict[str, Any] = {
        "n_test": len(test),
        "n_ood": sum(1 for r in records if r["ood"]),
        "mean_preservation": "pass" if np.array_equal(means, backbone) else "fail",
        "variant": config.variant,
        "head": config.head,
        "K": config.k,
        "root_seed": config.seed,
        "seeds": {stage: stage_seed(config.seed, stage) for stage in STAGES},
    }

    if net.task is Task.REGRESSION:
        var = np.array([np.add(r["var"], r["ale_var"]) for r in test])[:, 0]
        report.update(
            nll=metrics.gaussian_nll(y, means[:, 0], var),
            crps=metrics.crps_gaussian(y, means[:, 0], np.sqrt(var)),
            cqm=metrics.cqm(y, means[:, 0], np.sqrt(var)),
            rmse=metrics.rmse(y, means[:, 0]),
        )
        X_train, y_train = _train_rows(config)
        train_pred = np.array([forward_deterministic(net, x)[0] for x in X_train])
        sigma2 = max(float(np.mean((y_train - train_pred) ** 2)), VARIANCE_FLOOR)
        report["homoscedastic_nll"] = metrics.gaussian_nll(y, means[:, 0], np.full(len(y), sigma2))
    else:
        probs = np.array([r["probs"] for r in test])
        report.update(
            accuracy=metrics.accuracy(means, y),
            map_accuracy=metrics.accuracy(backbone, y),
            nll=metrics.classification_nll(probs, y),
            ece=metrics.ece(probs, y),
        )
    _ood_scores(records, report)
    if config.shift_paths:
        report["shift"] = _shift_scores(config, loaded)

    out = Path(config.out_dir) / METRICS
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("Evaluation: %s", {k: v for k, v in report.items() if k != "seeds"})
    return report


def run_pipeline(config: PipelineConfig, progress: bool = False) -> Dict[str, Any]:
    cmd_cache(config, progress)
    cmd_induce(config)
    cmd_attach(config)
    records = cmd_infer(config, progress=progress)
    return cmd_eval(config, records)


# ---------------------------------------------------------------------------
# sweeps

class SweepAxis(str, Enum):
    M = "M"
    K = "K"
    LAYER_PLACEMENT = "layer_placement"


SWEEP_COLUMNS = ["axis", "value", "seed", "nll", "ece", "ood_auroc", "bald_auroc",
                 "setup_seconds", "query_seconds", "query_seconds_per_row", "error"]


def _row_config(config: PipelineConfig, axis: SweepAxis, value: int, seed: int) -> PipelineConfig:
    fields = config.model_dump()
    fields.update(seed=seed, out_dir=Path(config.out_dir) / "sweep" / f"{axis.value}_{value}_seed{seed}")
    if axis is SweepAxis.M:
        fields.update(m=value, k=min(config.k, value))
    elif axis is SweepAxis.K:
        fields.update(k=value, m=max(config.m, value))
    else:
        fields.update(gapa_layers=[value])
    return make_config(**fields)


def _sweep_row(args: Tuple[PipelineConfig, SweepAxis, int, int]) -> Dict[str, Any]:
    config, axis, value, seed = args
    row: Dict[str, Any] = {column: np.nan for column in SWEEP_COLUMNS}
    row.update(axis=axis.value, value=value, seed=seed, error="")
    try:
        cfg = _row_config(config, axis, value, seed)
        start = time.perf_counter()
        cmd_cache(cfg)
        cmd_induce(cfg)
        cmd_attach(cfg)
        setup = time.perf_counter() - start
        start = time.perf_counter()
        records = cmd_infer(cfg)
        query = time.perf_counter() - start
        report = cmd_eval(cfg, records)
        row.update(nll=report["nll"], ece=report.get("ece", np.nan),
                   ood_auroc=report.get("entropy_auroc", np.nan),
                   bald_auroc=report.get("bald_auroc", report.get("eu_auroc", np.nan)),
                   setup_seconds=setup, query_seconds=query, query_seconds_per_row=query / max(1, len(records)))
    except (GapaError, ValueError, ArithmeticError, OSError) as exc:
        logger.error("Sweep row %s=%s seed=%d failed: %s", axis.value, value, seed, exc)
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def cmd_sweep(config: PipelineConfig, axis: Union[str, SweepAxis], values: Sequence[int],
              seeds: Optional[Sequence[int]] = None, workers: int = 1, progress: bool = False) -> Path:
    """One full pipeline run per (value, seed); failures are kept as rows."""
    axis = SweepAxis(axis)
    values = sorted(int(v) for v in values)
    if not values:
        raise ConfigError("a sweep needs at least one value")
    seeds = [config.seed] if not seeds else [int(s) for s in seeds]
    jobs = [(config, axis, value, seed) for value in values for seed in seeds]

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(tqdm(pool.map(_sweep_row, jobs), total=len(jobs), desc=f"sweep {axis.value}",
                             disable=not progress))
    else:
        rows = [_sweep_row(job) for job in tqdm(jobs, desc=f"sweep {axis.value}", disable=not progress)]

    frame = pd.DataFrame(rows, columns=SWEEP_COLUMNS).sort_values(["value", "seed"], kind="stable")
    out = Path(config.out_dir) / f"sweep_{axis.value}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False, lineterminator="\n")
    failed = int((frame["error"] != "").sum())
    logger.info("Sweep over %s finished: %d rows, %d failed -> %s", axis.value, len(frame), failed, out)
    return out
