"""On-disk artifacts written by the command line: run manifests, small CSV tables, predictor bundles."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cluster import LESS, SIGNIFICANT, SOURCE_INFERRED, SOURCE_KMEANS, SOURCE_UNSET, ClusterAssignment
from .data import CLASS_NAMES, FEATURE_NAMES, DataError, FeatureTransform
from .model import BigatModel
from .train import ClusterModel

MANIFEST_VERSION = 1
PREDICTOR_FORMAT = "bigat-predictor"
PREDICTOR_VERSION = 1


class ArtifactError(ValueError):
    pass


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def file_records(paths) -> list[dict]:
    return [{"path": str(p), "sha256": sha256_file(p)} for p in paths]


@dataclass
class RunManifest:
    subcommand: str
    argv: list[str]
    cwd: str
    seed: int
    tool_version: str
    config_path: str | None = None
    inputs: list[dict] = field(default_factory=list)
    outputs: list[dict] = field(default_factory=list)
    started_at: str = ""
    finished_at: str = ""

    def to_json(self) -> str:
        d = asdict(self)
        d["version"] = MANIFEST_VERSION
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def output_hashes(self) -> dict[str, str]:
        return {r["path"]: r["sha256"] for r in self.outputs}


def load_manifest(path: str | Path) -> RunManifest:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    if d.pop("version", None) != MANIFEST_VERSION:
        raise ArtifactError(f"{path}: unsupported manifest version")
    try:
        return RunManifest(**d)
    except TypeError as exc:
        raise ArtifactError(f"{path}: malformed manifest ({exc})") from None


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_rows(path: Path, header: list[str]) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != header:
            raise ArtifactError(f"{path}: expected header {','.join(header)}, got {reader.fieldnames}")
        return list(reader)


# --- cluster table ---------------------------------------------------------------

CLUSTER_HEADER = ["node_id", "cluster", "source"]


def write_clusters(path: str | Path, assignment: ClusterAssignment, nodes=None) -> None:
    nodes = range(assignment.n) if nodes is None else nodes
    _write_rows(Path(path), CLUSTER_HEADER,
                ([int(v), int(assignment.labels[v]), assignment.source[v]] for v in nodes))


def read_clusters(path: str | Path, n: int) -> ClusterAssignment:
    out = ClusterAssignment.empty(n)
    for row in _read_rows(Path(path), CLUSTER_HEADER):
        v, k, src = int(row["node_id"]), int(row["cluster"]), row["source"]
        if not 0 <= v < n or k not in (SIGNIFICANT, LESS) or src not in (SOURCE_KMEANS, SOURCE_INFERRED):
            raise ArtifactError(f"{path}: bad cluster row {row}")
        out.labels[v] = k
        out.source[v] = src
    return out


# --- Moran table -----------------------------------------------------------------

MORAN_HEADER = ["variable", "morans_i", "p_value", "n_nodes", "significant"]


def write_moran_table(path: str | Path, rows: list[dict]) -> None:
    _write_rows(Path(path), MORAN_HEADER,
                ([r["variable"], repr(r["morans_i"]), repr(r["p_value"]), r["n_nodes"], int(r["significant"])]
                 for r in rows))


def read_moran_table(path: str | Path) -> list[dict]:
    return [{"variable": r["variable"], "morans_i": float(r["morans_i"]), "p_value": float(r["p_value"]),
             "n_nodes": int(r["n_nodes"]), "significant": bool(int(r["significant"]))}
            for r in _read_rows(Path(path), MORAN_HEADER)]


# --- predictions and traces ------------------------------------------------------

PREDICTION_HEADER = ["node_id", "predicted_class", "cluster"]


def write_predictions(path: str | Path, nodes, classes, clusters: ClusterAssignment | None) -> None:
    def cell(v):
        return "" if clusters is None else str(int(clusters.labels[v]))
    _write_rows(Path(path), PREDICTION_HEADER,
                ([int(v), CLASS_NAMES[int(c)], cell(v)] for v, c in zip(nodes, classes)))


def read_predictions(path: str | Path) -> list[tuple[int, str, int | None]]:
    out = []
    for row in _read_rows(Path(path), PREDICTION_HEADER):
        if row["predicted_class"] not in CLASS_NAMES:
            raise ArtifactError(f"{path}: unknown class {row['predicted_class']!r}")
        out.append((int(row["node_id"]), row["predicted_class"], int(row["cluster"]) if row["cluster"] else None))
    return out


TRACE_HEADER = ["epoch", "loss"]


def write_trace(path: str | Path, losses) -> None:
    _write_rows(Path(path), TRACE_HEADER, ([i, repr(float(x))] for i, x in enumerate(losses)))


def read_trace(path: str | Path) -> list[float]:
    rows = _read_rows(Path(path), TRACE_HEADER)
    if [int(r["epoch"]) for r in rows] != list(range(len(rows))):
        raise ArtifactError(f"{path}: epochs must run 0, 1, 2, ...")
    return [float(r["loss"]) for r in rows]


PER_CLASS_HEADER = ["model"] + list(CLASS_NAMES)


def write_per_class(path: str | Path, summary: dict) -> None:
    def cell(x):
        return "" if x is None else repr(x)
    _write_rows(Path(path), PER_CLASS_HEADER,
                ([v] + [cell(summary["per_class"][v][c]) for c in CLASS_NAMES] for v in summary["runs"]))


def read_per_class(path: str | Path) -> dict[str, dict[str, float | None]]:
    return {r["model"]: {c: float(r[c]) if r[c] else None for c in CLASS_NAMES}
            for r in _read_rows(Path(path), PER_CLASS_HEADER)}


# --- predictor bundle --------------------------------------------------------------

@dataclass
class Predictor:
    """Everything needed to score nodes of one event graph again without retraining."""

    model: BigatModel
    transform: FeatureTransform
    n_nodes: int
    cluster_model: ClusterModel | None = None
    clusters: ClusterAssignment | None = None  # k-means labels of the training nodes

    def to_dict(self) -> dict:
        d = {
            "format": PREDICTOR_FORMAT,
            "version": PREDICTOR_VERSION,
            "feature_columns": list(FEATURE_NAMES),
            "n_nodes": self.n_nodes,
            "transform": self.transform.to_dict(),
            "model": self.model.to_dict(),
            "cluster_model": None,
            "clusters": None,
        }
        if self.cluster_model is not None:
            d["cluster_model"] = self.cluster_model.to_dict()
        if self.clusters is not None:
            keep = np.flatnonzero(self.clusters.source == SOURCE_KMEANS)
            d["clusters"] = {"nodes": keep.tolist(), "labels": self.clusters.labels[keep].tolist()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Predictor":
        if d.get("format") != PREDICTOR_FORMAT or d.get("version") != PREDICTOR_VERSION:
            raise ArtifactError("not a predictor checkpoint (format/version mismatch)")
        cols = list(d.get("feature_columns", []))
        if cols != list(FEATURE_NAMES):
            raise DataError(f"checkpoint schema mismatch: expected feature columns {list(FEATURE_NAMES)}, found {cols}")
        n = int(d["n_nodes"])
        clusters = None
        if d.get("clusters") is not None:
            clusters = ClusterAssignment.empty(n)
            idx = np.asarray(d["clusters"]["nodes"], dtype=np.intp)
            clusters.labels[idx] = d["clusters"]["labels"]
            clusters.source[idx] = SOURCE_KMEANS
        cm = ClusterModel.from_dict(d["cluster_model"]) if d.get("cluster_model") is not None else None
        return cls(BigatModel.from_dict(d["model"]), FeatureTransform.from_dict(d["transform"]), n, cm, clusters)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def load_predictor(path: str | Path) -> Predictor:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return Predictor.from_dict(d)


def unset_nodes(clusters: ClusterAssignment) -> np.ndarray:
    return np.flatnonzero(clusters.source == SOURCE_UNSET)
