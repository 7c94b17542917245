"""Single-layer graph models: BiGAT, BiGAT-undirected, GAT and GCN.

Each forward pass can record a trace; :func:`backward` walks it in reverse and
accumulates parameter gradients using the kernel's vector-Jacobian products.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from . import diffkernel as dk
from .cluster import SIGNIFICANT, ClusterAssignment
from .graph import SpatialGraph

CHECKPOINT_FORMAT = "bigat-checkpoint"
CHECKPOINT_VERSION = 1


class Variant(str, Enum):
    GCN = "gcn"
    GAT = "gat"
    BIGAT = "bigat"
    BIGAT_UD = "bigat-ud"

    @property
    def bimodal(self) -> bool:
        return self in (Variant.BIGAT, Variant.BIGAT_UD)

    @property
    def display(self) -> str:
        return {"gcn": "GCN", "gat": "GAT", "bigat": "BiGAT", "bigat-ud": "BiGAT-ud"}[self.value]

    @classmethod
    def parse(cls, name: str) -> "Variant":
        key = name.strip().lower().replace("_", "-")
        key = {"bigat-undirected": "bigat-ud", "bigatud": "bigat-ud"}.get(key, key)
        try:
            return cls(key)
        except ValueError:
            valid = ", ".join(v.value for v in cls)
            raise ValueError(f"unknown model {name!r}; valid variants: {valid}") from None


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_dim: int = 11
    hidden_dim: int = 3
    n_classes: int = 3
    variant: Variant = Variant.BIGAT
    leaky_slope: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.variant, Variant):
            self.variant = Variant.parse(self.variant)
        if self.input_dim < 1 or self.hidden_dim < 1:
            raise ModelError("input_dim and hidden_dim must be positive")
        if self.n_classes < 2:
            raise ModelError("need at least two classes")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ModelError("leaky_slope must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d


PARAM_NAMES = ("beta1", "beta2", "a_src", "a_dst", "readout_w", "readout_b")


class BigatModel:
    """Parameter bundle. Tied parameters are the same :class:`Param` object."""

    def __init__(self, config: ModelConfig, beta1, beta2, a_src, a_dst, readout_w, readout_b):
        self.config = config
        self.beta1 = beta1
        self.beta2 = beta1 if config.variant in (Variant.GAT, Variant.GCN) else beta2
        self.a_src = a_src
        self.a_dst = a_src if config.variant is Variant.BIGAT_UD else a_dst
        self.readout_w = readout_w
        self.readout_b = readout_b

    @property
    def variant(self) -> Variant:
        return self.config.variant

    def named_parameters(self) -> list[tuple[str, dk.Param]]:
        return [(name, getattr(self, name)) for name in PARAM_NAMES]

    def parameters(self) -> list[dk.Param]:
        return dk.unique_params(p for _, p in self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "params": {
                name: {"shape": list(p.value.shape), "values": p.value.ravel().tolist()}
                for name, p in self.named_parameters()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BigatModel":
        if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
            raise ModelError(f"not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} document")
        cfg = ModelConfig(**{**d["config"], "variant": Variant.parse(d["config"]["variant"])})
        params = {}
        for name in PARAM_NAMES:
            entry = d["params"][name]
            params[name] = dk.Param(np.array(entry["values"], dtype=np.float64).reshape(entry["shape"]), name=name)
        model = cls(cfg, **params)
        _check_shapes(model)
        return model


def _check_shapes(model: BigatModel) -> None:
    c = model.config
    want = {
        "beta1": (c.hidden_dim, c.input_dim),
        "beta2": (c.hidden_dim, c.input_dim),
        "a_src": (c.hidden_dim,),
        "a_dst": (c.hidden_dim,),
        "readout_w": (c.n_classes, c.hidden_dim),
        "readout_b": (c.n_classes,),
    }
    for name, p in model.named_parameters():
        if p.shape != want[name]:
            raise ModelError(f"parameter {name} has shape {p.shape}, expected {want[name]}")


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(config: ModelConfig) -> BigatModel:
    """Glorot-uniform weights drawn in the order beta1, beta2, a_src, a_dst, W; zero bias.

    All five are always drawn so that variants sharing a seed share their common
    parameters; tying then discards the redundant copies.
    """
    rng = np.random.default_rng(config.seed)
    h, d, k = config.hidden_dim, config.input_dim, config.n_classes

    def draw(shape, fan_in, fan_out, name):
        b = glorot_bound(fan_in, fan_out)
        return dk.Param(rng.uniform(-b, b, size=shape), name=name)

    beta1 = draw((h, d), d, h, "beta1")
    beta2 = draw((h, d), d, h, "beta2")
    a_src = draw((h,), h, 1, "a_src")
    a_dst = draw((h,), h, 1, "a_dst")
    w = draw((k, h), h, k, "readout_w")
    b = dk.Param(np.zeros(k), name="readout_b")
    return BigatModel(config, beta1, beta2, a_src, a_dst, w, b)


# --- layers -----------------------------------------------------------------------

def _features(model: BigatModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.config.input_dim:
        raise dk.DimensionError(f"expected features of width {model.config.input_dim}, got shape {X.shape}")
    return X


def _cluster_mask(model: BigatModel, clusters: ClusterAssignment | None, n: int) -> np.ndarray | None:
    if not model.variant.bimodal:
        return None
    if clusters is None:
        raise ModelError(f"{model.variant.display} needs a cluster assignment")
    if clusters.n != n:
        raise ModelError(f"cluster assignment covers {clusters.n} nodes, features have {n}")
    if not clusters.is_complete():
        unset = np.flatnonzero(clusters.labels == 0)[:5].tolist()
        raise ModelError(f"nodes without a cluster label: {unset}")
    return clusters.labels == SIGNIFICANT


def embed(model: BigatModel, X, clusters: ClusterAssignment | None = None) -> np.ndarray:
    X = _features(model, X)
    m1 = dk.matmul(X, model.beta1.value.T)
    first = _cluster_mask(model, clusters, len(X))
    if first is None:
        return m1
    m2 = dk.matmul(X, model.beta2.value.T)
    return np.where(first[:, None], m1, m2)


@dataclass
class AttentionCoefficients:
    dst: np.ndarray
    src: np.ndarray
    starts: np.ndarray
    pre: np.ndarray  # a_src.m_u + a_dst.m_v
    scores: np.ndarray  # e_vu after LeakyReLU
    alpha: np.ndarray

    def for_node(self, v: int) -> list[tuple[int, float]]:
        end = self.starts[v + 1] if v + 1 < len(self.starts) else len(self.alpha)
        return [(int(u), float(a)) for u, a in zip(self.src[self.starts[v]:end], self.alpha[self.starts[v]:end])]

    def score(self, v: int, u: int) -> float:
        end = self.starts[v + 1] if v + 1 < len(self.starts) else len(self.alpha)
        seg = self.src[self.starts[v]:end]
        i = int(np.searchsorted(seg, u))
        if i >= len(seg) or seg[i] != u:
            raise KeyError(f"{u} is not in the neighborhood of {v}")
        return float(self.scores[self.starts[v] + i])


def attention(model: BigatModel, m: np.ndarray, g: SpatialGraph) -> AttentionCoefficients:
    if m.shape[0] != g.n:
        raise dk.DimensionError(f"messages have {m.shape[0]} rows, graph has {g.n} nodes")
    dst, src, starts = g.self_loop_index
    src_part = m @ model.a_src.value
    dst_part = m @ model.a_dst.value
    pre = src_part[src] + dst_part[dst]
    scores = dk.leaky_relu(pre, model.config.leaky_slope)
    alpha = dk.masked_softmax_rows(scores, starts)
    return AttentionCoefficients(dst, src, starts, pre, scores, alpha)


def aggregate(alpha: AttentionCoefficients, m: np.ndarray) -> np.ndarray:
    return dk.segment_sum(alpha.alpha[:, None] * m[alpha.src], alpha.starts)


def readout(model: BigatModel, m_agg: np.ndarray) -> np.ndarray:
    if m_agg.shape[1] != model.config.hidden_dim:
        raise dk.DimensionError(f"aggregated messages must have width {model.config.hidden_dim}")
    return dk.matmul(m_agg, model.readout_w.value.T) + model.readout_b.value


def predict(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the lowest class index
    return np.argmax(logits, axis=1)


def gcn_coefficients(g: SpatialGraph) -> np.ndarray:
    """Entries of D^-1/2 (A + I) D^-1/2 aligned with ``g.self_loop_index``."""
    dst, src, _ = g.self_loop_index
    deg = g.degree + 1.0
    return 1.0 / np.sqrt(deg[dst] * deg[src])


def gcn_forward(model: BigatModel, X, g: SpatialGraph) -> np.ndarray:
    return _forward(model, X, g, None)[0]


@dataclass
class ForwardTrace:
    X: np.ndarray
    first: np.ndarray | None
    m: np.ndarray
    m_agg: np.ndarray
    att: AttentionCoefficients | None = None
    gcn_norm: np.ndarray | None = None
    index: tuple = field(default=())


def _forward(model: BigatModel, X, g: SpatialGraph, clusters) -> tuple[np.ndarray, ForwardTrace]:
    X = _features(model, X)
    if X.shape[0] != g.n:
        raise dk.DimensionError(f"features have {X.shape[0]} rows, graph has {g.n} nodes")
    if model.variant is Variant.GCN:
        dst, src, starts = g.self_loop_index
        norm = gcn_coefficients(g)
        m = dk.matmul(X, model.beta1.value.T)
        m_agg = dk.segment_sum(norm[:, None] * m[src], starts)
        trace = ForwardTrace(X, None, m, m_agg, gcn_norm=norm, index=(dst, src, starts))
    else:
        first = _cluster_mask(model, clusters, X.shape[0])
        m = embed(model, X, clusters)
        att = attention(model, m, g)
        m_agg = aggregate(att, m)
        trace = ForwardTrace(X, first, m, m_agg, att=att)
    return readout(model, trace.m_agg), trace


def forward(model: BigatModel, X, g: SpatialGraph, clusters: ClusterAssignment | None = None) -> np.ndarray:
    return _forward(model, X, g, clusters)[0]


def forward_with_trace(model: BigatModel, X, g: SpatialGraph, clusters=None) -> tuple[np.ndarray, ForwardTrace]:
    return _forward(model, X, g, clusters)


def backward(model: BigatModel, trace: ForwardTrace, dlogits: np.ndarray) -> None:
    """Accumulate dL/dparams given dL/dlogits for a traced forward pass."""
    n = trace.m.shape[0]
    dm_agg, dw_t = dk.matmul_backward(trace.m_agg, model.readout_w.value.T, dlogits)
    model.readout_w.accumulate(dw_t.T)
    model.readout_b.accumulate(dlogits.sum(axis=0))

    if trace.att is None:
        _, src, _ = trace.index
        dm = dk.scatter_add_rows(trace.gcn_norm[:, None] * dm_agg[trace.index[0]], src, n)
        _, dbeta_t = dk.matmul_backward(trace.X, model.beta1.value.T, dm)
        model.beta1.accumulate(dbeta_t.T)
        return

    att = trace.att
    up = dm_agg[att.dst]
    dalpha = np.einsum("ij,ij->i", up, trace.m[att.src])
    dm = dk.scatter_add_rows(att.alpha[:, None] * up, att.src, n)

    dscores = dk.masked_softmax_rows_backward(att.alpha, att.starts, dalpha)
    dpre = dk.leaky_relu_backward(att.pre, model.config.leaky_slope, dscores)
    d_src_part = dk.scatter_add_rows(dpre, att.src, n)
    d_dst_part = dk.segment_sum(dpre, att.starts)
    for part, vec in ((d_src_part, model.a_src), (d_dst_part, model.a_dst)):
        dmv, dvec = dk.matmul_backward(trace.m, vec.value[:, None], part[:, None])
        dm += dmv
        vec.accumulate(dvec[:, 0])

    if trace.first is None:
        _, dbeta_t = dk.matmul_backward(trace.X, model.beta1.value.T, dm)
        model.beta1.accumulate(dbeta_t.T)
    else:
        sel = trace.first[:, None]
        _, d1 = dk.matmul_backward(trace.X, model.beta1.value.T, np.where(sel, dm, 0.0))
        _, d2 = dk.matmul_backward(trace.X, model.beta2.value.T, np.where(sel, 0.0, dm))
        model.beta1.accumulate(d1.T)
        model.beta2.accumulate(d2.T)
