"""Masked cross-entropy, Adam, full-batch transductive training and cluster inference."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffkernel as dk
from .cluster import LESS, SIGNIFICANT, SOURCE_INFERRED, SOURCE_KMEANS, SOURCE_UNSET, ClusterAssignment
from .graph import SpatialGraph
from .model import BigatModel, ModelConfig, Variant, backward, forward, forward_with_trace, init_params, predict

log = logging.getLogger(__name__)


class TrainingError(ValueError):
    pass


class DivergenceError(ArithmeticError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


@dataclass
class TrainConfig:
    learning_rate: float = 0.005
    epochs: int = 300
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise TrainingError("learning_rate must be positive")
        if self.epochs < 1:
            raise TrainingError("epochs must be at least 1")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy_with_grad(logits: np.ndarray, labels, mask) -> tuple[float, np.ndarray]:
    """Mean masked cross-entropy and its gradient with respect to ``logits``."""
    mask = np.asarray(mask, dtype=bool)
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        raise TrainingError("training mask is empty")
    labels = np.asarray(labels)
    y = labels[idx].astype(np.intp)
    if np.any(y < 0) or np.any(y >= logits.shape[1]):
        raise TrainingError("masked nodes need labels in [0, n_classes)")
    logp = _log_softmax(logits[idx])
    loss = float(-logp[np.arange(len(idx)), y].mean())
    grad = np.zeros_like(logits)
    probs = np.exp(logp)
    probs[np.arange(len(idx)), y] -= 1.0
    grad[idx] = probs / len(idx)
    return loss, grad


def masked_cross_entropy(logits: np.ndarray, labels, mask) -> float:
    return cross_entropy_with_grad(logits, labels, mask)[0]


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update in place; gradients are zeroed afterwards."""
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p in dk.unique_params(params):
        g = p.grad
        key = id(p)
        if key not in state.m:
            state.m[key] = np.zeros_like(p.value)
            state.v[key] = np.zeros_like(p.value)
        m, v = state.m[key], state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.zero_grad()


def loss_closure(model: BigatModel, X, g: SpatialGraph, clusters, labels, mask):
    """Closure for :func:`diffkernel.grad_check`: zero grads, forward, backward, return loss."""

    def run() -> float:
        model.zero_grad()
        logits, trace = forward_with_trace(model, X, g, clusters)
        loss, dlogits = cross_entropy_with_grad(logits, labels, mask)
        backward(model, trace, dlogits)
        return loss

    return run


@dataclass
class TrainResult:
    model: BigatModel
    loss_history: list[float]


def train_model(model: BigatModel, X, g: SpatialGraph, clusters, labels, mask, config: TrainConfig) -> TrainResult:
    """Full-batch training; only nodes where ``mask`` is true contribute to the loss."""
    mask = np.asarray(mask, dtype=bool)
    labels = np.asarray(labels)
    # unmasked labels are never read: hand the loss a copy with them blanked out
    train_labels = np.where(mask, labels, -1)
    X = np.asarray(X, dtype=np.float64)
    state = AdamState(config.adam_beta1, config.adam_beta2, config.adam_eps)
    step = loss_closure(model, X, g, clusters, train_labels, mask)
    history = []
    for epoch in range(config.epochs):
        loss = step()
        if not np.isfinite(loss):
            raise DivergenceError(epoch, loss)
        history.append(loss)
        adam_step(model.parameters(), state, config.learning_rate)
    return TrainResult(model, history)


def training_accuracy(model: BigatModel, X, g, clusters, labels, mask) -> float:
    mask = np.asarray(mask, dtype=bool)
    pred = predict(forward(model, X, g, clusters))
    return float(np.mean(pred[mask] == np.asarray(labels)[mask]))


@dataclass
class ClusterModel:
    model: BigatModel

    def to_dict(self) -> dict:
        return self.model.to_dict()

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterModel":
        return cls(BigatModel.from_dict(d))


def train_cluster_model(X, g: SpatialGraph, assignment: ClusterAssignment, mask, config: TrainConfig,
                        hidden_dim: int = 3, leaky_slope: float = 0.2) -> ClusterModel:
    """Single-layer GAT predicting the k-means cluster of a node, fit on masked nodes only."""
    mask = np.asarray(mask, dtype=bool)
    if np.any(assignment.source[mask] != SOURCE_KMEANS):
        raise TrainingError("every training node needs a k-means cluster label")
    present = set(assignment.labels[mask].tolist())
    if present != {SIGNIFICANT, LESS}:
        raise TrainingError(f"training nodes cover clusters {sorted(present)}; both clusters are required")
    X = np.asarray(X, dtype=np.float64)
    cfg = ModelConfig(X.shape[1], hidden_dim, 2, Variant.GAT, leaky_slope, config.seed)
    model = init_params(cfg)
    targets = np.where(assignment.labels == SIGNIFICANT, 0, 1)
    train_model(model, X, g, None, targets, mask, config)
    return ClusterModel(model)


def infer_clusters(cluster_model: ClusterModel, X, g: SpatialGraph, assignment: ClusterAssignment) -> ClusterAssignment:
    """Fill unset nodes from the cluster model; k-means labels are kept as they are."""
    out = assignment.copy()
    todo = out.source == SOURCE_UNSET
    if todo.any():
        pred = predict(forward(cluster_model.model, X, g))
        out.labels[todo] = np.where(pred[todo] == 0, SIGNIFICANT, LESS)
        out.source[todo] = SOURCE_INFERRED
    return out
