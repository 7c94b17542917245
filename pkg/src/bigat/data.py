"""Event datasets: schema, duration classes, CSV ingestion and the synthetic hurricane generator."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .graph import GraphError, SpatialGraph, grid_graph, read_edges, write_edges

FEATURE_NAMES = (
    "peak_customers_out",
    "population",
    "area",
    "svi_theme1",
    "svi_theme2",
    "svi_theme3",
    "svi_theme4",
    "swath_none_frac",
    "swath_34_frac",
    "swath_50_frac",
    "swath_64_frac",
)
N_FEATURES = len(FEATURE_NAMES)
LOG_COLUMNS = (0, 1, 2)
SWATH_COLUMNS = (7, 8, 9, 10)
NODE_COLUMNS = ("node_id", "name", "x", "y") + FEATURE_NAMES + ("duration_days",)
SYNTH_EXTRA_COLUMN = "planted_cluster"


class DurationClass(IntEnum):
    SHORT = 0
    MEDIUM = 1
    LONG = 2

    @property
    def label(self) -> str:
        return self.name.lower()


CLASS_NAMES = tuple(c.label for c in DurationClass)


class DataError(ValueError):
    pass


def label_duration(days: float) -> DurationClass:
    """short < 2 days <= medium <= 6 days < long."""
    if not days >= 0:
        raise DataError(f"duration must be a nonnegative number of days, got {days}")
    if days < 2.0:
        return DurationClass.SHORT
    if days <= 6.0:
        return DurationClass.MEDIUM
    return DurationClass.LONG


def label_durations(days: np.ndarray) -> np.ndarray:
    """Vectorized :func:`label_duration`; NaN (unlabeled) maps to -1."""
    days = np.asarray(days, dtype=np.float64)
    if np.any(days < 0):
        raise DataError("negative duration")
    out = np.full(days.shape, -1, dtype=np.int64)
    ok = ~np.isnan(days)
    out[ok] = np.where(days[ok] < 2.0, 0, np.where(days[ok] <= 6.0, 1, 2))
    return out


@dataclass
class EventDataset:
    name: str
    features: np.ndarray  # n x 11, raw scale
    duration_days: np.ndarray  # NaN where unlabeled
    graph: SpatialGraph
    node_names: list[str] = field(default_factory=list)
    coords: np.ndarray | None = None
    planted_cluster: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.duration_days = np.asarray(self.duration_days, dtype=np.float64)
        n = self.graph.n
        if self.features.shape != (n, N_FEATURES):
            raise DataError(f"features must be {n}x{N_FEATURES}, got {self.features.shape}")
        if self.duration_days.shape != (n,):
            raise DataError("duration_days must have one entry per node")
        if not self.node_names:
            self.node_names = [str(i) for i in range(n)]
        check_swath_simplex(self.features)

    @property
    def n(self) -> int:
        return self.graph.n

    @property
    def labeled(self) -> np.ndarray:
        return ~np.isnan(self.duration_days)

    @property
    def labeled_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.labeled)

    @property
    def duration_class(self) -> np.ndarray:
        return label_durations(self.duration_days)


def check_swath_simplex(features: np.ndarray, rows=None) -> None:
    fr = features[:, list(SWATH_COLUMNS)]
    bad_range = np.any((fr < 0) | (fr > 1), axis=1)
    bad_sum = np.abs(fr.sum(axis=1) - 1.0) > 1e-9
    bad = np.flatnonzero(bad_range | bad_sum)
    if len(bad):
        i = int(bad[0])
        where = f"row {rows[i]}" if rows is not None else f"node {i}"
        raise DataError(f"{where}: swath fractions {fr[i].tolist()} must lie in [0,1] and sum to 1")


# --- CSV I/O ------------------------------------------------------------------

def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def _parse_float(text: str, lineno: int, column: str, path) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"{path}: row {lineno}: column {column!r} is not numeric: {text!r}") from None
    if not math.isfinite(v):
        raise DataError(f"{path}: row {lineno}: column {column!r} is not finite")
    return v


def load_event(nodes_file: str | Path, edges_file: str | Path, name: str | None = None) -> EventDataset:
    nodes_file = Path(nodes_file)
    with open(nodes_file, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in NODE_COLUMNS if c not in header]
        if missing:
            found = [c for c in header if c not in ("node_id", "name", "x", "y", "duration_days", SYNTH_EXTRA_COLUMN)]
            raise DataError(f"{nodes_file}: schema mismatch, missing column(s) {missing}; "
                            f"expected feature columns {list(FEATURE_NAMES)}, found {found}")
        has_planted = SYNTH_EXTRA_COLUMN in header
        rows = list(enumerate(reader, start=2))

    n = len(rows)
    feats = np.empty((n, N_FEATURES))
    days = np.full(n, np.nan)
    xy = np.empty((n, 2))
    names = [""] * n
    planted = np.zeros(n, dtype=np.int64) if has_planted else None
    seen = {}
    line_of = [0] * n
    for lineno, row in rows:
        try:
            nid = int(row["node_id"])
        except (TypeError, ValueError):
            raise DataError(f"{nodes_file}: row {lineno}: node_id must be an integer") from None
        if not 0 <= nid < n or nid in seen:
            raise DataError(f"{nodes_file}: row {lineno}: node_id {nid} duplicated or outside [0, {n})")
        seen[nid] = lineno
        line_of[nid] = lineno
        names[nid] = row["name"]
        xy[nid] = [_parse_float(row[c], lineno, c, nodes_file) for c in ("x", "y")]
        feats[nid] = [_parse_float(row[c], lineno, c, nodes_file) for c in FEATURE_NAMES]
        raw_days = (row["duration_days"] or "").strip()
        if raw_days:
            d = _parse_float(raw_days, lineno, "duration_days", nodes_file)
            if d < 0:
                raise DataError(f"{nodes_file}: row {lineno}: negative duration_days {d}")
            days[nid] = d
        if planted is not None:
            try:
                planted[nid] = int(row[SYNTH_EXTRA_COLUMN])
            except (TypeError, ValueError):
                raise DataError(f"{nodes_file}: row {lineno}: planted_cluster must be an integer") from None
    check_swath_simplex(feats, rows=line_of)
    try:
        g = read_edges(edges_file, n, coords=xy)
    except GraphError as exc:
        raise DataError(str(exc)) from None
    if not np.any(~np.isnan(days)):
        raise DataError(f"{nodes_file}: no labeled nodes")
    return EventDataset(name or nodes_file.parent.name, feats, days, g, names, xy, planted)


def save_event(ds: EventDataset, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    nodes_path, edges_path = out / "nodes.csv", out / "edges.csv"
    coords = ds.coords if ds.coords is not None else np.zeros((ds.n, 2))
    header = list(NODE_COLUMNS)
    if ds.planted_cluster is not None:
        header.append(SYNTH_EXTRA_COLUMN)
    with open(nodes_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for v in range(ds.n):
            row = [str(v), ds.node_names[v], _fmt(coords[v, 0]), _fmt(coords[v, 1])]
            row += [_fmt(x) for x in ds.features[v]]
            row.append(_fmt(ds.duration_days[v]))
            if ds.planted_cluster is not None:
                row.append(str(int(ds.planted_cluster[v])))
            w.writerow(row)
    write_edges(ds.graph, edges_path)
    return nodes_path, edges_path


# --- standardization ------------------------------------------------------------

class StandardizedFeatures(np.ndarray):
    """Marker subclass: output of a :class:`FeatureTransform`, never to be transformed again."""


@dataclass(frozen=True)
class FeatureTransform:
    mean: np.ndarray
    scale: np.ndarray
    log_columns: tuple[int, ...] = LOG_COLUMNS

    def apply(self, raw) -> StandardizedFeatures:
        if isinstance(raw, StandardizedFeatures):
            raise DataError("features are already standardized; apply the transform to raw features only")
        x = np.array(raw, dtype=np.float64)
        cols = list(self.log_columns)
        x[:, cols] = np.log1p(x[:, cols])
        return ((x - self.mean) / self.scale).view(StandardizedFeatures)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist(), "log_columns": list(self.log_columns)}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureTransform":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["scale"], dtype=np.float64), tuple(d["log_columns"]))


STD_FLOOR = 1e-8


def fit_transform(features: np.ndarray, train_mask) -> FeatureTransform:
    mask = np.asarray(train_mask, dtype=bool)
    if not mask.any():
        raise DataError("training mask selects no nodes")
    x = np.array(features, dtype=np.float64)
    cols = list(LOG_COLUMNS)
    x[:, cols] = np.log1p(x[:, cols])
    train = x[mask]
    mean = train.mean(axis=0)
    sd = train.std(axis=0)
    # constant training columns are centered only
    scale = np.where(sd < STD_FLOOR, 1.0, sd)
    return FeatureTransform(mean, scale)


def standardize(dataset: EventDataset, train_mask) -> tuple[StandardizedFeatures, FeatureTransform]:
    t = fit_transform(dataset.features, train_mask)
    return t.apply(dataset.features), t


# --- synthetic events ----------------------------------------------------------

DEFAULT_TRACK = ((3.0, -1.5), (5.0, 4.0), (8.5, 10.5))


@dataclass
class SynthConfig:
    rows: int = 10
    cols: int = 13
    track: tuple[tuple[float, float], ...] = DEFAULT_TRACK
    r64: float = 2.0
    r50: float = 2.4
    r34: float = 2.8
    label_noise: float = 0.1
    feature_noise: float = 0.15
    regime_gap: float = 1.5
    noise_spread: float = 1.3
    short_quantile: float | None = None  # None: cut at the regime gap
    long_quantile: float = 0.75
    cutoff_window: float = 0.05
    unlabeled_fraction: float = 0.0
    seed: int = 0
    name: str = "synthetic"

    def __post_init__(self):
        self.track = tuple((float(x), float(y)) for x, y in self.track)
        if not self.track:
            raise DataError("hurricane track needs at least one waypoint")
        if not 0 < self.r64 < self.r50 < self.r34:
            raise DataError("band radii must satisfy 0 < r64 < r50 < r34")
        if not 0.0 <= self.label_noise < 1.0:
            raise DataError("label_noise must lie in [0, 1)")
        lo = 0.0 if self.short_quantile is None else self.short_quantile
        if not 0.0 <= lo <= self.long_quantile <= 1.0:
            raise DataError("need 0 <= short_quantile <= long_quantile <= 1")
        if self.noise_spread <= 1.0:
            raise DataError("noise_spread must exceed 1")
        if not 0.0 <= self.unlabeled_fraction < 1.0:
            raise DataError("unlabeled_fraction must lie in [0, 1)")
        if self.rows < 1 or self.cols < 1:
            raise DataError("grid must be at least 1x1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["track"] = [list(p) for p in self.track]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = {k: v for k, v in d.items() if k != "version"}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown synth config field(s): {sorted(unknown)}")
        if "track" in d:
            d["track"] = tuple(tuple(p) for p in d["track"])
        return cls(**d)


def distance_to_polyline(points: np.ndarray, track) -> np.ndarray:
    track = np.asarray(track, dtype=np.float64)
    if len(track) == 1:
        return np.linalg.norm(points - track[0], axis=1)
    best = np.full(len(points), np.inf)
    for a, b in zip(track[:-1], track[1:]):
        ab = b - a
        denom = float(ab @ ab)
        t = np.zeros(len(points)) if denom == 0 else np.clip((points - a) @ ab / denom, 0.0, 1.0)
        proj = a + t[:, None] * ab
        best = np.minimum(best, np.linalg.norm(points - proj, axis=1))
    return best


def swath_fractions(coords: np.ndarray, track, r64: float, r50: float, r34: float, sub: int = 3) -> np.ndarray:
    """Area fraction of each unit cell in (none, 34, 50, 64) bands, sampled on a sub x sub lattice."""
    offs = (np.arange(sub) + 0.5) / sub - 0.5
    ox, oy = np.meshgrid(offs, offs)
    samples = (coords[:, None, :] + np.stack([ox.ravel(), oy.ravel()], axis=1)[None]).reshape(-1, 2)
    d = distance_to_polyline(samples, track).reshape(len(coords), -1)
    band = np.where(d <= r64, 3, np.where(d <= r50, 2, np.where(d <= r34, 1, 0)))
    counts = np.stack([(band == b).sum(axis=1) for b in (0, 1, 2, 3)], axis=1)
    return counts / counts.sum(axis=1, keepdims=True)


def _smooth(g: SpatialGraph, x: np.ndarray, passes: int) -> np.ndarray:
    dst, src, starts = g.self_loop_index
    counts = g.degree + 1.0
    for _ in range(passes):
        x = np.add.reduceat(x[src], starts) / counts
    return x


# log-duration knots: severity at the short/long cutoffs maps to exactly 2 and 6 days
_LOG_DAYS = (math.log(0.25), math.log(2.0), math.log(6.0), math.log(24.0))
_THRESHOLDS = (2.0, 6.0)


def _cutoff(s: np.ndarray, q: float, window: float = 0.0) -> float:
    """Severity cutoff near quantile ``q``; with a window, the midpoint of the widest gap inside it."""
    if q >= 1.0:
        return float(s.max() + 1.0)
    if window <= 0 or len(s) < 3:
        return float(np.quantile(s, q))
    srt = np.sort(s)
    lo = max(int(np.floor((q - window) * len(s))), 0)
    hi = min(int(np.ceil((q + window) * len(s))), len(s) - 1)
    if hi <= lo:
        return float(np.quantile(s, q))
    gaps = np.diff(srt[lo:hi + 1])
    i = lo + int(np.argmax(gaps))
    return float(0.5 * (srt[i] + srt[i + 1]))


def _flip_duration(days: float, cls: int, up: bool, u: float, spread: float) -> tuple[int, float]:
    """Move a duration just across an adjacent class threshold (log-uniform within ``spread``)."""
    if cls == 0 or (cls == 1 and up):
        b = _THRESHOLDS[cls]
        new = cls + 1
        d = b * spread**u
        if new == 2:
            d = max(d, b + 1e-3)
    else:
        b = _THRESHOLDS[cls - 1]
        new = cls - 1
        d = b / spread ** max(u, 1e-3)
    return new, d


def synth_event(cfg: SynthConfig | None = None) -> EventDataset:
    """Generate a fully labeled grid event with a planted two-regime severity structure.

    Severity is the band-weighted wind swath plus spatially smoothed noise, averaged
    over each county's neighborhood, with an extra offset for the high regime.
    Outage duration is a monotone function of severity. Peak outages scale with
    population times an exponential in local severity, so severity is linearly
    recoverable from log features. Label noise moves a duration just across an
    adjacent class threshold.
    """
    from .cluster import kmeans

    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(cfg.seed)
    g = grid_graph(cfg.rows, cfg.cols)
    n = g.n
    coords = np.asarray(g.coords)

    fr = swath_fractions(coords, cfg.track, cfg.r64, cfg.r50, cfg.r34)
    swath_sev = fr[:, 1:] @ np.array([1.0, 2.0, 3.0])

    eta = _smooth(g, rng.standard_normal(n), 2)
    eta = (eta - eta.mean()) / (eta.std() or 1.0)
    local = swath_sev + cfg.feature_noise * eta
    regional = _smooth(g, local, 1)
    if n >= 2:
        km = kmeans(regional, 2, restarts=10, seed=cfg.seed)
        high = km.assignments == int(np.argmax(km.centroids[:, 0]))
    else:
        high = np.zeros(n, dtype=bool)
    planted = np.where(high, 1, 2)
    severity = regional + cfg.regime_gap * high

    pop_field = _smooth(g, rng.standard_normal(n), 1)
    population = np.round(np.exp(10.5 + 1.2 * pop_field + 0.3 * rng.standard_normal(n)))
    area = np.round(rng.uniform(600.0, 2400.0, n), 1)
    out_frac = np.minimum(0.03 * np.exp(0.9 * local), 0.95)
    peak = np.round(population * out_frac)
    svi = rng.uniform(0.0, 1.0, (n, 4)).round(4)

    if cfg.short_quantile is None and high.any() and (~high).any():
        t_short = 0.5 * (severity[~high].max() + severity[high].min())
    else:
        t_short = _cutoff(severity, 0.5 if cfg.short_quantile is None else cfg.short_quantile)
    t_long = max(_cutoff(severity, cfg.long_quantile, cfg.cutoff_window), t_short + 1e-6)
    span = float(severity.max() - severity.min()) + 1.0
    log_days = np.interp(severity, [t_short - span, t_short, t_long, t_long + span], _LOG_DAYS)
    days = np.exp(log_days)
    cls = label_durations(days)

    flips = rng.random(n) < cfg.label_noise
    up = rng.random(n) < 0.5
    u = rng.random(n)
    for v in np.flatnonzero(flips):
        _, days[v] = _flip_duration(days[v], int(cls[v]), bool(up[v]), float(u[v]), cfg.noise_spread)
    days = days.round(4)

    if cfg.unlabeled_fraction > 0:
        hide = rng.permutation(n)[: int(round(cfg.unlabeled_fraction * n))]
        days[hide] = np.nan

    features = np.column_stack([peak, population, area, svi, fr])
    names = [f"county_{r:02d}_{c:02d}" for r in range(cfg.rows) for c in range(cfg.cols)]
    return EventDataset(cfg.name, features, days, g, names, coords.copy(), planted)


def write_meta(cfg: SynthConfig, out_dir: str | Path) -> Path:
    path = Path(out_dir) / "meta.json"
    path.write_text(json.dumps({"version": 1, "synth_config": cfg.to_dict()}, indent=2, sort_keys=True) + "\n")
    return path
