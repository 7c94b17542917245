"""Command-line entry point: ``bigat gen | analyze | cv | predict | replay``.

Exit codes: 0 success, 1 I/O failure or replay mismatch, 2 usage or configuration
error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .artifacts import (
    ArtifactError,
    Predictor,
    RunManifest,
    file_records,
    load_manifest,
    load_predictor,
    sha256_file,
    write_clusters,
    write_moran_table,
    write_per_class,
    write_predictions,
    write_trace,
)
from .charts import cluster_scatter, grouped_bars
from .cluster import DURATION_EPS_DAYS, LESS, SIGNIFICANT, ClusteringError, adjusted_rand_index, cluster_nodes
from .data import (
    CLASS_NAMES,
    DataError,
    EventDataset,
    SynthConfig,
    fit_transform,
    load_event,
    save_event,
    synth_event,
    write_meta,
)
from .eval import CLUSTER_MODEL_KEY, METRICS, CvConfig, EvaluationError, derive_seed, format_table, run_cv, vi_code
from .graph import DegenerateFieldError, GraphError, induced_subgraph, morans_i_significance
from .model import ModelConfig, ModelError, Variant, forward, init_params, predict
from .train import DivergenceError, TrainConfig, TrainingError, infer_clusters, train_cluster_model, train_model

log = logging.getLogger("bigat")

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4
CONFIG_VERSION = 1
ALL_MODELS = ",".join(v.value for v in Variant)


class UsageError(Exception):
    pass


class ReplayMismatch(Exception):
    pass


# --- helpers -------------------------------------------------------------------------

def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def read_json_config(path: str | Path) -> dict:
    """Parse a versioned JSON config; malformed input reports its line and column."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(d, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    if d.get("version") != CONFIG_VERSION:
        raise UsageError(f"{path}: config needs \"version\": {CONFIG_VERSION}")
    return d


def parse_models(spec: str) -> list[Variant]:
    names = [s for s in spec.split(",") if s.strip()]
    if not names:
        raise UsageError(f"no models given; valid variants: {ALL_MODELS}")
    try:
        out = [Variant.parse(s) for s in names]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if len(set(out)) != len(out):
        raise UsageError("each model may be listed once")
    return out


def data_files(data_dir: str | Path) -> tuple[Path, Path]:
    d = Path(data_dir)
    nodes, edges = d / "nodes.csv", d / "edges.csv"
    for p in (nodes, edges):
        if not p.is_file():
            raise DataError(f"{p} not found")
    return nodes, edges


def load_data(data_dir: str | Path) -> EventDataset:
    nodes, edges = data_files(data_dir)
    return load_event(nodes, edges, name=Path(data_dir).resolve().name)


def _write_text(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


class Run:
    """Collects inputs and outputs of one subcommand and writes its manifest."""

    def __init__(self, args, subcommand: str, seed: int):
        self.args = args
        self.manifest = RunManifest(subcommand, list(args.argv), os.getcwd(), int(seed), __version__,
                                    config_path=getattr(args, "config", None), started_at=_now())
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []

    def finish(self, manifest_path: Path) -> RunManifest:
        m = self.manifest
        m.inputs = file_records(self.inputs)
        m.outputs = file_records(self.outputs)
        m.finished_at = _now()
        manifest_path.write_text(m.to_json(), encoding="utf-8")
        self.args.manifest_written = manifest_path
        return m


def _out_dir(path: str | Path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- gen ---------------------------------------------------------------------------------

def cmd_gen(args) -> int:
    raw = {}
    if args.config:
        raw = read_json_config(args.config)
        raw = raw.get("synth_config", {k: v for k, v in raw.items() if k != "version"})
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = SynthConfig.from_dict(raw)
    except (DataError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid synth config: {exc}") from None
    out = _out_dir(args.out)
    run = Run(args, "gen", cfg.seed)
    if args.config:
        run.inputs.append(Path(args.config))
    ds = synth_event(cfg)
    run.outputs += [*save_event(ds, out), write_meta(cfg, out)]
    run.finish(out / "manifest.json")
    print(f"wrote {ds.n} nodes, {ds.graph.n_edges} edges to {out}")
    return EXIT_OK


# --- analyze -------------------------------------------------------------------------

def moran_rows(ds: EventDataset, n_perms: int, seed: int) -> list[dict]:
    labeled = ds.labeled_nodes
    g_lab = induced_subgraph(ds.graph, labeled) if len(labeled) < ds.n else ds.graph
    fields = [
        ("log_duration", g_lab, np.log(ds.duration_days[labeled] + DURATION_EPS_DAYS)),
        ("log_peak_customers_out", ds.graph, np.log1p(ds.features[:, 0])),
    ]
    rows = []
    for i, (name, g, x) in enumerate(fields):
        stat, p = morans_i_significance(g, x, n_perms=n_perms, seed=derive_seed(seed, i))
        rows.append({"variable": name, "morans_i": stat, "p_value": p, "n_nodes": g.n, "significant": p < 0.05})
    return rows


def format_moran(rows: list[dict]) -> str:
    lines = [f"{'variable':<24}{'I':>9}{'p':>9}", "-" * 43]
    for r in rows:
        star = " *" if r["significant"] else ""
        lines.append(f"{r['variable']:<24}{r['morans_i']:>9.4f}{r['p_value']:>9.4f}{star}")
    lines.append("* p < 0.05 (one-sided permutation test)")
    return "\n".join(lines) + "\n"


def cmd_analyze(args) -> int:
    seed = 0 if args.seed is None else args.seed
    ds = load_data(args.data)
    run = Run(args, "analyze", seed)
    run.inputs += list(data_files(args.data))
    rows = moran_rows(ds, args.perms, seed)

    labeled = ds.labeled_nodes
    clusters = cluster_nodes(ds, labeled, seed=derive_seed(seed, CLUSTER_MODEL_KEY))
    ari = None
    if ds.planted_cluster is not None:
        ari = adjusted_rand_index(clusters.labels[labeled], ds.planted_cluster[labeled])

    out = _out_dir(args.out)
    write_moran_table(out / "morans_i.csv", rows)
    summary = {
        "version": 1,
        "morans_i": rows,
        "kmeans": {
            "nodes": int(len(labeled)),
            "sizes": {"significant": int(np.sum(clusters.labels == SIGNIFICANT)),
                      "less": int(np.sum(clusters.labels == LESS))},
            "centroids": clusters.centroids.tolist(),
            "ari_vs_planted": ari,
        },
    }
    _write_text(out / "morans_i.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_clusters(out / "clusters.csv", clusters, labeled)
    names = {SIGNIFICANT: "significantly impacted", LESS: "less impacted"}
    if len(labeled) < ds.n:
        names[0] = "unlabeled"
    coords = ds.coords if ds.coords is not None else np.column_stack([np.arange(ds.n), np.zeros(ds.n)])
    _write_text(out / "clusters.svg", cluster_scatter(coords, clusters.labels, f"{ds.name}: k-means clusters", names))
    run.outputs += [out / "morans_i.csv", out / "morans_i.json", out / "clusters.csv", out / "clusters.svg"]
    run.finish(out / "manifest.json")

    sys.stdout.write(format_moran(rows))
    print(f"k-means on {len(labeled)} labeled nodes: {summary['kmeans']['sizes']}"
          + ("" if ari is None else f", ARI vs planted {ari:.3f}"))
    return EXIT_OK


# --- cv --------------------------------------------------------------------------------

CV_FIELDS = {"folds", "repeats", "hidden_dim", "leaky_slope", "kmeans_restarts", "learning_rate", "epochs"}


def cv_config(args, seed: int) -> CvConfig:
    raw = {}
    if args.config:
        raw = read_json_config(args.config)
        raw.pop("version")
        unknown = set(raw) - CV_FIELDS - {"models"}
        if unknown:
            raise UsageError(f"{args.config}: unknown cv config field(s): {sorted(unknown)}")
    for key in ("folds", "repeats", "epochs"):
        if getattr(args, key) is not None:
            raw[key] = getattr(args, key)
    try:
        train = TrainConfig(learning_rate=raw.get("learning_rate", 0.005), epochs=raw.get("epochs", 300))
        cfg = CvConfig(folds=raw.get("folds", 5), repeats=raw.get("repeats", 6), base_seed=seed, train=train,
                       hidden_dim=raw.get("hidden_dim", 3), leaky_slope=raw.get("leaky_slope", 0.2),
                       kmeans_restarts=raw.get("kmeans_restarts", 10))
    except (TrainingError, TypeError) as exc:
        raise UsageError(f"invalid cv config: {exc}") from None
    if cfg.folds < 2 or cfg.repeats < 1:
        raise UsageError("need folds >= 2 and repeats >= 1")
    args.models = args.models or raw.get("models") or ALL_MODELS
    return cfg


def metric_chart(summary: dict) -> str:
    variants = list(summary["runs"])
    vals = [[summary[v][m]["mean"] if summary[v][m]["mean"] is not None else np.nan for m in METRICS]
            for v in variants]
    errs = [[summary[v][m]["std"] if summary[v][m]["std"] is not None else np.nan for m in METRICS]
            for v in variants]
    return grouped_bars([Variant.parse(v).display for v in variants], list(METRICS), vals, errs,
                        title="Test metrics, mean and std over runs")


def cmd_cv(args) -> int:
    seed = 0 if args.seed is None else args.seed
    cfg = cv_config(args, seed)
    variants = parse_models(args.models)
    ds = load_data(args.data)
    run = Run(args, "cv", seed)
    run.inputs += list(data_files(args.data))
    if args.config:
        run.inputs.append(Path(args.config))

    def progress(chunk):
        r = chunk[0]
        log.info("repeat %d fold %d done", r.repeat, r.fold)

    report = run_cv(ds, variants, cfg, jobs=args.jobs, on_fold=progress, keep_history=args.trace)
    summary = report.summary()
    out = _out_dir(args.out)
    table = format_table(summary)
    run.outputs += [
        _write_text(out / "report.json", report.to_json()),
        _write_text(out / "table.txt", table),
        _write_text(out / "metrics.svg", metric_chart(summary)),
    ]
    write_per_class(out / "per_class.csv", summary)
    run.outputs.append(out / "per_class.csv")
    if args.trace:
        tdir = _out_dir(out / "traces")
        for r in report.runs:
            if r.ok:
                path = tdir / f"{r.variant}_r{r.repeat}_f{r.fold}.csv"
                write_trace(path, r.loss_history)
                run.outputs.append(path)
    run.finish(out / "manifest.json")
    sys.stdout.write(table)
    failed = sum(summary["failed_runs"].values())
    if failed:
        print(f"warning: {failed} run(s) failed; see report.json", file=sys.stderr)
    return EXIT_OK


# --- predict -------------------------------------------------------------------------

def fit_predictor(ds: EventDataset, variant: Variant, seed: int, train: TrainConfig | None = None,
                  hidden_dim: int = 3, leaky_slope: float = 0.2, restarts: int = 10) -> tuple[Predictor, list[float]]:
    """Train on every labeled node; the returned predictor scores the whole graph."""
    train = train or TrainConfig()
    mask = ds.labeled
    transform = fit_transform(ds.features, mask)
    X = transform.apply(ds.features)
    g = ds.graph

    def cfg_for(s):
        return TrainConfig(train.learning_rate, train.epochs, train.adam_beta1, train.adam_beta2, train.adam_eps, s)

    km = cm = full = None
    if variant.bimodal:
        km = cluster_nodes(ds, ds.labeled_nodes, restarts=restarts, seed=derive_seed(seed, 0, 0, CLUSTER_MODEL_KEY))
        cm = train_cluster_model(X, g, km, mask, cfg_for(derive_seed(seed, 0, 0, CLUSTER_MODEL_KEY + 1)),
                                 hidden_dim, leaky_slope)
        full = infer_clusters(cm, X, g, km)
    model_seed = derive_seed(seed, 0, 0, vi_code(variant))
    model = init_params(ModelConfig(X.shape[1], hidden_dim, len(CLASS_NAMES), variant, leaky_slope, model_seed))
    res = train_model(model, X, g, full, ds.duration_class, mask, cfg_for(model_seed))
    return Predictor(model, transform, ds.n, cm, km), res.loss_history


def apply_predictor(pred: Predictor, ds: EventDataset):
    """Predicted class per node and the cluster assignment used (None for single-embedding models)."""
    if pred.n_nodes != ds.n:
        raise DataError(f"checkpoint was fit on a {pred.n_nodes}-node graph; dataset has {ds.n} nodes")
    X = pred.transform.apply(ds.features)
    clusters = None
    if pred.model.variant.bimodal:
        if pred.cluster_model is None or pred.clusters is None:
            raise ArtifactError("bimodal checkpoint lacks its cluster model")
        clusters = infer_clusters(pred.cluster_model, X, ds.graph, pred.clusters)
    return predict(forward(pred.model, X, ds.graph, clusters)), clusters


PREDICT_FIELDS = CV_FIELDS - {"folds", "repeats"}


def cmd_predict(args) -> int:
    seed = 0 if args.seed is None else args.seed
    ds = load_data(args.data)
    run = Run(args, "predict", seed)
    run.inputs += list(data_files(args.data))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    history = None
    if args.load:
        predictor = load_predictor(args.load)
        run.inputs.append(Path(args.load))
    else:
        try:
            variant = Variant.parse(args.model)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        raw = {}
        if args.config:
            raw = read_json_config(args.config)
            raw.pop("version")
            run.inputs.append(Path(args.config))
            unknown = set(raw) - PREDICT_FIELDS
            if unknown:
                raise UsageError(f"{args.config}: unknown predict config field(s): {sorted(unknown)}")
        if args.epochs is not None:
            raw["epochs"] = args.epochs
        try:
            train = TrainConfig(learning_rate=raw.get("learning_rate", 0.005), epochs=raw.get("epochs", 300))
        except (TrainingError, TypeError) as exc:
            raise UsageError(f"invalid predict config: {exc}") from None
        predictor, history = fit_predictor(ds, variant, seed, train, raw.get("hidden_dim", 3),
                                           raw.get("leaky_slope", 0.2), raw.get("kmeans_restarts", 10))
    classes, clusters = apply_predictor(predictor, ds)
    todo = np.flatnonzero(~ds.labeled)
    write_predictions(out, todo, classes[todo], clusters)
    run.outputs.append(out)
    if args.save:
        run.outputs.append(_write_text(Path(args.save), predictor.to_json()))
    if args.trace and history is not None:
        tpath = out.with_name(out.stem + ".trace.csv")
        write_trace(tpath, history)
        run.outputs.append(tpath)
    run.finish(out.with_name(out.name + ".manifest.json"))
    print(f"predicted {len(todo)} unlabeled node(s) with {predictor.model.variant.display} -> {out}")
    return EXIT_OK


# --- replay ----------------------------------------------------------------------------

@contextmanager
def _cwd(path: str):
    old = os.getcwd()
    os.chdir(path)
    try:
        yield
    finally:
        os.chdir(old)


def cmd_replay(args) -> int:
    try:
        manifest = load_manifest(args.manifest)
    except (OSError, json.JSONDecodeError, ArtifactError) as exc:
        raise UsageError(f"cannot read manifest {args.manifest}: {exc}") from None
    if manifest.argv and manifest.argv[0] == "replay":
        raise UsageError("a replay manifest cannot be replayed")
    with _cwd(manifest.cwd):
        for rec in manifest.inputs:
            if not Path(rec["path"]).is_file() or sha256_file(rec["path"]) != rec["sha256"]:
                raise ReplayMismatch(f"input {rec['path']} changed since the recorded run")
        code = main(manifest.argv)
        if code != EXIT_OK:
            return code
        bad = [p for p, h in manifest.output_hashes().items() if not Path(p).is_file() or sha256_file(p) != h]
    if bad:
        raise ReplayMismatch("outputs differ from the manifest: " + ", ".join(bad))
    print(f"replay ok: {len(manifest.outputs)} output(s) identical")
    return EXIT_OK


# --- argument parsing ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="base random seed")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="worker processes for cross-validation")
    common.add_argument("--trace", action="store_true", default=argparse.SUPPRESS,
                        help="write per-epoch loss histories as epoch,loss CSV")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="bigat", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--seed", type=int, default=None, help="base random seed")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for cross-validation")
    p.add_argument("--trace", action="store_true", default=False,
                   help="write per-epoch loss histories as epoch,loss CSV")
    p.add_argument("-v", "--verbose", action="store_true", default=False)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic event")
    g.add_argument("--config", help="JSON synth config (version 1); meta.json files are accepted")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen)

    a = sub.add_parser("analyze", parents=[common], help="Moran's I table and k-means cluster map")
    a.add_argument("data", help="directory holding nodes.csv and edges.csv")
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--perms", type=int, default=999, help="permutations for the significance test")
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("cv", parents=[common], help="repeated stratified cross-validation")
    c.add_argument("data", help="directory holding nodes.csv and edges.csv")
    c.add_argument("--out", required=True, help="output directory")
    c.add_argument("--models", default=None, help=f"comma-separated variants (default {ALL_MODELS})")
    c.add_argument("--folds", type=int, default=None)
    c.add_argument("--repeats", type=int, default=None)
    c.add_argument("--epochs", type=int, default=None)
    c.add_argument("--config", help="JSON cv config (version 1)")
    c.set_defaults(func=cmd_cv)

    r = sub.add_parser("predict", parents=[common], help="classify unlabeled nodes")
    r.add_argument("data", help="directory holding nodes.csv and edges.csv")
    r.add_argument("--out", required=True, help="output CSV (node_id,predicted_class,cluster)")
    r.add_argument("--model", default="bigat", help=f"variant to train ({ALL_MODELS})")
    r.add_argument("--load", help="score with this checkpoint instead of training")
    r.add_argument("--save", help="write the trained checkpoint here")
    r.add_argument("--epochs", type=int, default=None)
    r.add_argument("--config", help="JSON training config (version 1): learning_rate, epochs, hidden_dim, ...")
    r.set_defaults(func=cmd_predict)

    m = sub.add_parser("replay", parents=[common], help="re-run a manifest and verify output hashes")
    m.add_argument("manifest")
    m.set_defaults(func=cmd_replay)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("bigat: error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"bigat: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"bigat: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DegenerateFieldError as exc:
        print(f"bigat: data error: degenerate field: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, GraphError, ClusteringError, TrainingError, EvaluationError, ModelError, ArtifactError) as exc:
        print(f"bigat: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ReplayMismatch as exc:
        print(f"bigat: replay mismatch: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"bigat: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
