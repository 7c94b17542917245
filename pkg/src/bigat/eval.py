"""Classification metrics, stratified folds and the repeated cross-validation protocol."""

from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .cluster import SOURCE_UNSET, cluster_nodes
from .data import CLASS_NAMES, EventDataset, fit_transform
from .model import ModelConfig, Variant, forward, init_params, predict
from .train import DivergenceError, TrainConfig, infer_clusters, train_cluster_model, train_model

log = logging.getLogger(__name__)

METRICS = ("accuracy", "macro_f1", "balanced_accuracy")
REPORT_VERSION = 1


class EvaluationError(ValueError):
    pass


# --- metrics --------------------------------------------------------------------

def confusion_matrix(y_true, y_pred, n_classes: int = 3) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.intp)
    y_pred = np.asarray(y_pred, dtype=np.intp)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _check(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise EvaluationError(f"confusion matrix must be square, got shape {cm.shape}")
    if np.any(cm < 0):
        raise EvaluationError("confusion matrix has negative counts")
    if cm.sum() == 0:
        raise EvaluationError("confusion matrix is empty")
    return cm


def accuracy(cm) -> float:
    cm = _check(cm)
    return float(np.trace(cm) / cm.sum())


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    # 0/0 counts as 0
    out = np.zeros(len(num))
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def per_class_f1(cm) -> np.ndarray:
    cm = _check(cm)
    tp = np.diag(cm).astype(np.float64)
    precision = _ratio(tp, cm.sum(axis=0))
    recall = _ratio(tp, cm.sum(axis=1))
    return _ratio(2 * precision * recall, precision + recall)


def macro_f1(cm) -> float:
    """Unweighted mean F1 over all classes; a class never seen nor predicted scores 0."""
    return float(per_class_f1(cm).mean())


def per_class_accuracy(cm) -> np.ndarray:
    """Recall per class; NaN for classes absent from the true labels."""
    cm = _check(cm)
    support = cm.sum(axis=1)
    out = np.full(len(cm), np.nan)
    present = support > 0
    out[present] = np.diag(cm)[present] / support[present]
    return out


def balanced_accuracy(cm) -> float:
    """Mean recall over the classes that occur in the true labels."""
    rec = per_class_accuracy(cm)
    return float(np.nanmean(rec))


# --- folds ------------------------------------------------------------------------

def stratified_kfold(labels, k: int = 5, seed: int = 0, nodes=None) -> list[np.ndarray]:
    """Split ``nodes`` (default: every index with label >= 0) into k stratified test folds.

    Members of each class are shuffled and dealt round-robin, continuing the deal
    across classes, so per-class and total fold sizes differ by at most one.
    """
    if k < 2:
        raise EvaluationError("need at least 2 folds")
    labels = np.asarray(labels)
    nodes = np.flatnonzero(labels >= 0) if nodes is None else np.asarray(nodes, dtype=np.intp)
    if len(nodes) < k:
        raise EvaluationError(f"cannot split {len(nodes)} labeled nodes into {k} folds")
    rng = np.random.default_rng(seed)
    order = []
    for c in np.unique(labels[nodes]):
        members = nodes[labels[nodes] == c]
        if len(members) < k:
            warnings.warn(f"class {c} has {len(members)} members, fewer than {k} folds; stratifying best-effort",
                          stacklevel=2)
        order.append(rng.permutation(members))
    order = np.concatenate(order)
    folds = [np.sort(order[i::k]) for i in range(k)]
    return folds


# --- cross-validation ---------------------------------------------------------------

def derive_seed(base_seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([base_seed, *keys]).generate_state(1)[0])


CLUSTER_MODEL_KEY = 97


@dataclass
class RunResult:
    variant: str
    repeat: int
    fold: int
    ok: bool
    confusion: list[list[int]] | None = None
    metrics: dict[str, float] = field(default_factory=dict)
    per_class: list[float] = field(default_factory=list)
    error: str = ""
    loss_history: list[float] = field(default_factory=list)


@dataclass
class CvConfig:
    folds: int = 5
    repeats: int = 6
    base_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    hidden_dim: int = 3
    leaky_slope: float = 0.2
    kmeans_restarts: int = 10

    def to_dict(self) -> dict:
        return {
            "folds": self.folds,
            "repeats": self.repeats,
            "base_seed": self.base_seed,
            "hidden_dim": self.hidden_dim,
            "leaky_slope": self.leaky_slope,
            "kmeans_restarts": self.kmeans_restarts,
            "learning_rate": self.train.learning_rate,
            "epochs": self.train.epochs,
            "adam": [self.train.adam_beta1, self.train.adam_beta2, self.train.adam_eps],
        }


def _train_config(cfg: CvConfig, seed: int) -> TrainConfig:
    t = cfg.train
    return TrainConfig(t.learning_rate, t.epochs, t.adam_beta1, t.adam_beta2, t.adam_eps, seed)


def run_fold(dataset: EventDataset, variants: Sequence[Variant], cfg: CvConfig, repeat: int, fold: int,
             test_nodes: np.ndarray, keep_history: bool = False) -> list[RunResult]:
    """Train every variant on one split and score it on ``test_nodes``."""
    n = dataset.n
    y = dataset.duration_class
    train_mask = dataset.labeled.copy()
    train_mask[test_nodes] = False
    # standardization statistics come from training nodes only
    X = fit_transform(dataset.features, train_mask).apply(dataset.features)
    g = dataset.graph

    clusters = None
    cluster_error = ""
    if any(v.bimodal for v in variants):
        try:
            train_nodes = np.flatnonzero(train_mask)
            km = cluster_nodes(dataset, train_nodes, restarts=cfg.kmeans_restarts,
                               seed=derive_seed(cfg.base_seed, repeat, fold, CLUSTER_MODEL_KEY))
            cm_model = train_cluster_model(X, g, km, train_mask,
                                           _train_config(cfg, derive_seed(cfg.base_seed, repeat, fold, CLUSTER_MODEL_KEY + 1)),
                                           cfg.hidden_dim, cfg.leaky_slope)
            clusters = infer_clusters(cm_model, X, g, km)
        except DivergenceError as exc:
            cluster_error = f"cluster model: {exc}"

    out = []
    for vi, variant in enumerate(variants):
        seed = derive_seed(cfg.base_seed, repeat, fold, vi_code(variant))
        if variant.bimodal and clusters is None:
            out.append(RunResult(variant.value, repeat, fold, False, error=cluster_error))
            continue
        model = init_params(ModelConfig(X.shape[1], cfg.hidden_dim, len(CLASS_NAMES), variant, cfg.leaky_slope, seed))
        try:
            res = train_model(model, X, g, clusters if variant.bimodal else None, y, train_mask, _train_config(cfg, seed))
        except DivergenceError as exc:
            log.warning("run %s repeat %d fold %d diverged: %s", variant.value, repeat, fold, exc)
            out.append(RunResult(variant.value, repeat, fold, False, error=str(exc)))
            continue
        pred = predict(forward(model, X, g, clusters if variant.bimodal else None))
        cm = confusion_matrix(y[test_nodes], pred[test_nodes], len(CLASS_NAMES))
        out.append(RunResult(
            variant.value, repeat, fold, True, cm.tolist(),
            {"accuracy": accuracy(cm), "macro_f1": macro_f1(cm), "balanced_accuracy": balanced_accuracy(cm)},
            per_class_accuracy(cm).tolist(),
            loss_history=res.loss_history if keep_history else [],
        ))
    return out


def vi_code(variant: Variant) -> int:
    return list(Variant).index(variant)


def _fold_job(args):
    return run_fold(*args)


@dataclass
class CvReport:
    variants: list[str]
    runs: list[RunResult]
    config: dict

    def summary(self) -> dict:
        out: dict = {}
        per_class: dict = {}
        runs: dict = {}
        failed: dict = {}
        for v in self.variants:
            ok = sorted((r for r in self.runs if r.variant == v and r.ok), key=lambda r: (r.repeat, r.fold))
            runs[v] = sum(1 for r in self.runs if r.variant == v)
            failed[v] = runs[v] - len(ok)
            block = {}
            for metric in METRICS:
                vals = np.array([r.metrics[metric] for r in ok])
                block[metric] = {
                    "mean": float(vals.mean()) if len(vals) else None,
                    "std": float(vals.std()) if len(vals) else None,
                }
            out[v] = block
            pcs = np.array([r.per_class for r in ok], dtype=np.float64).reshape(len(ok), len(CLASS_NAMES))
            per_class[v] = {}
            for i, name in enumerate(CLASS_NAMES):
                col = pcs[:, i][~np.isnan(pcs[:, i])]
                per_class[v][name] = float(col.mean()) if len(col) else None
        out["per_class"] = per_class
        out["runs"] = runs
        out["failed_runs"] = failed
        out["config"] = self.config
        return out

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"

    def mean(self, variant: str, metric: str) -> float:
        return self.summary()[variant][metric]["mean"]

    def run_count(self, variant: str) -> int:
        return self.summary()["runs"][variant]


def load_report(text: str) -> dict:
    """Parse and validate a serialized CvReport summary."""
    d = json.loads(text)
    for key in ("per_class", "runs", "failed_runs", "config"):
        if key not in d:
            raise EvaluationError(f"report is missing {key!r}")
    for v in d["runs"]:
        block = d[v]
        for metric in METRICS:
            if set(block[metric]) != {"mean", "std"}:
                raise EvaluationError(f"report block {v}/{metric} malformed")
    return d


def run_cv(dataset: EventDataset, variants: Iterable[Variant | str], cfg: CvConfig | None = None,
           jobs: int = 1, on_fold: Callable[[list[RunResult]], None] | None = None,
           keep_history: bool = False) -> CvReport:
    """Repeated stratified k-fold over labeled nodes; every variant sees identical splits."""
    cfg = cfg or CvConfig()
    variants = [v if isinstance(v, Variant) else Variant.parse(v) for v in variants]
    if not variants:
        raise EvaluationError("no model variants requested")
    y = dataset.duration_class
    labeled = dataset.labeled_nodes
    present = np.unique(y[labeled])
    if len(present) < 2:
        raise EvaluationError(f"labeled nodes cover {len(present)} duration class; stratified CV needs at least two")
    tasks = []
    for r in range(cfg.repeats):
        folds = stratified_kfold(y, cfg.folds, seed=derive_seed(cfg.base_seed, r), nodes=labeled)
        for f, test in enumerate(folds):
            tasks.append((dataset, variants, cfg, r, f, test, keep_history))

    results: list[RunResult] = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for chunk in pool.map(_fold_job, tasks):
                results.extend(chunk)
                if on_fold:
                    on_fold(chunk)
    else:
        for t in tasks:
            chunk = run_fold(*t)
            results.extend(chunk)
            if on_fold:
                on_fold(chunk)
    order = {v.value: i for i, v in enumerate(variants)}
    results.sort(key=lambda r: (order[r.variant], r.repeat, r.fold))
    config = cfg.to_dict()
    config["variants"] = [v.value for v in variants]
    config["dataset"] = dataset.name
    config["labeled_nodes"] = int(len(labeled))
    return CvReport([v.value for v in variants], results, config)


def format_table(summary: dict) -> str:
    """Aligned text table: metrics (mean ± std) and per-class accuracy per variant."""
    variants = list(summary["runs"])
    head = ["model", "runs", "failed", "accuracy", "macro_f1", "balanced_acc"] + list(CLASS_NAMES)
    rows = []
    for v in variants:
        row = [Variant.parse(v).display, str(summary["runs"][v]), str(summary["failed_runs"][v])]
        for metric in METRICS:
            m = summary[v][metric]
            row.append("n/a" if m["mean"] is None else f"{m['mean']:.3f} ± {m['std']:.3f}")
        for name in CLASS_NAMES:
            val = summary["per_class"][v][name]
            row.append("n/a" if val is None else f"{val:.2f}")
        rows.append(row)
    widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [head] + rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
