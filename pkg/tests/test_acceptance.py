"""End-to-end acceptance checks; each test prints one PASS/FAIL line at the stated tolerance."""
import json
import math
import time
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from bigat import diffkernel as dk
from bigat.artifacts import (
    load_manifest,
    load_predictor,
    read_clusters,
    read_moran_table,
    read_per_class,
    read_predictions,
    read_trace,
)
from bigat.cli import main
from bigat.cluster import SIGNIFICANT, SOURCE_KMEANS, ClusterAssignment, adjusted_rand_index, cluster_nodes, kmeans
from bigat.data import _smooth, load_event, standardize
from bigat.eval import (
    CvConfig,
    accuracy,
    balanced_accuracy,
    derive_seed,
    load_report,
    macro_f1,
    per_class_accuracy,
    run_cv,
    stratified_kfold,
)
from bigat.graph import build_from_edges, grid_graph, morans_i, morans_i_significance
from bigat.model import ModelConfig, Variant, attention, embed, forward, init_params
from bigat.train import TrainConfig, loss_closure, masked_cross_entropy, train_model, training_accuracy
from conftest import random_clusters, random_graph
from oracles import best_two_partition_inertia, dense_adjacency, metrics_from_pairs, morans_i_dense, pairs_from_confusion

ALL = list(Variant)


@pytest.fixture(scope="module")
def default_report(default_event):
    start = time.perf_counter()
    report = run_cv(default_event, ALL, CvConfig())
    return report, time.perf_counter() - start


def test_criterion_01_gradient_correctness(criterion):
    rng = np.random.default_rng(12)
    g = random_graph(12, 20, rng)
    X = rng.normal(size=(12, 11))
    labels = rng.integers(0, 3, 12)
    mask = rng.random(12) < 0.75
    cl = random_clusters(12, rng)
    start = time.perf_counter()
    errs = {}
    for v in ALL:
        model = init_params(ModelConfig(variant=v, seed=1))
        closure = loss_closure(model, X, g, cl if v.bimodal else None, labels, mask)
        errs[v.value] = dk.grad_check(closure, model.parameters(), h=1e-5)
    took = time.perf_counter() - start
    worst = max(errs.values())
    ok = g.n_edges == 20 and worst < 1e-4 and took < 10
    criterion(1, "gradient correctness", ok, f"max rel err {worst:.2e} (< 1e-4), {took:.2f}s (< 10s)")
    assert ok


def test_criterion_02_attention_simplex(criterion):
    rng = np.random.default_rng(2)
    worst, negative = 0.0, False
    for t in range(1000):
        n = int(rng.integers(1, 20))
        g = random_graph(n, int(rng.integers(0, 3 * n)), rng)
        v = ALL[1 + t % 3]
        m = init_params(ModelConfig(variant=v, seed=t))
        X = rng.normal(scale=float(rng.uniform(0.1, 5)), size=(n, 11))
        cl = random_clusters(n, rng) if n > 1 else ClusterAssignment(
            np.array([SIGNIFICANT]), np.array([SOURCE_KMEANS], dtype=object))
        att = attention(m, embed(m, X, cl if v.bimodal else None), g)
        negative |= bool(np.any(att.alpha < 0))
        worst = max(worst, float(np.abs(dk.segment_sum(att.alpha, att.starts) - 1).max()))
    ok = not negative and worst <= 1e-9
    criterion(2, "attention simplex", ok, f"1000 forwards, max |sum-1| {worst:.1e} (<= 1e-9), negatives {negative}")
    assert ok


def test_criterion_03_reduction_equivalence(criterion):
    rng = np.random.default_rng(3)
    bitwise = True
    symmetric = True
    for t in range(20):
        n = int(rng.integers(2, 20))
        g = random_graph(n, int(rng.integers(1, 3 * n)), rng)
        X = rng.normal(size=(n, 11))
        gat = init_params(ModelConfig(variant="gat", seed=t))
        bigat = init_params(ModelConfig(variant="bigat", seed=t))
        bigat.beta2.value[:] = bigat.beta1.value
        one = ClusterAssignment(np.full(n, SIGNIFICANT), np.full(n, SOURCE_KMEANS, dtype=object))
        bitwise &= np.array_equal(forward(bigat, X, g, one), forward(gat, X, g))
        ud = init_params(ModelConfig(variant="bigat-ud", seed=t))
        att = attention(ud, embed(ud, X, random_clusters(n, rng)), g)
        symmetric &= all(att.score(u, v) == att.score(v, u) for u, v in g.edges)
    ok = bitwise and symmetric
    criterion(3, "reduction equivalence", ok, f"tied BiGAT == GAT bitwise: {bitwise}; e_vu == e_uv exactly: {symmetric}")
    assert ok


def test_criterion_04_morans_i(criterion):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(3, 21))
        g = random_graph(n, int(rng.integers(1, n * (n - 1) // 2 + 1)), rng)
        x = rng.normal(size=n)
        worst = max(worst, abs(morans_i(g, x) - morans_i_dense(dense_adjacency(n, g.edges), x)))
    path3 = build_from_edges(3, [(0, 1), (1, 2)])
    path4 = build_from_edges(4, [(0, 1), (1, 2), (2, 3)])
    cyc4 = build_from_edges(4, [(0, 1), (1, 2), (2, 3), (3, 0)])
    hand = [abs(morans_i(path3, [1, 0, -1]) - 0), abs(morans_i(cyc4, [1, -1, 1, -1]) + 1),
            abs(morans_i(path4, [1, 1, -1, -1]) - 1 / 3)]
    grid = grid_graph(10, 13)
    field = _smooth(grid, np.random.default_rng(40).normal(size=grid.n), 2)
    stat, p = morans_i_significance(grid, field, n_perms=999, seed=0)
    ok = worst < 1e-12 and max(hand) < 1e-12 and stat > 0 and p < 0.01
    criterion(4, "Moran's I oracle", ok,
              f"oracle err {worst:.1e}, hand err {max(hand):.1e} (< 1e-12); planted I={stat:.3f} p={p:.3f} (< 0.01)")
    assert ok


def test_criterion_05_kmeans(criterion, default_event):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(300):
        pts = rng.normal(scale=10, size=int(rng.integers(2, 9)))
        if rng.random() < 0.3:
            pts = np.round(pts)  # exercise ties
        res = kmeans(pts, 2, restarts=10, seed=int(rng.integers(1 << 30)))
        worst = max(worst, abs(res.inertia - best_two_partition_inertia(pts.tolist())))
    km = cluster_nodes(default_event, default_event.labeled_nodes)
    ari = adjusted_rand_index(km.labels, default_event.planted_cluster)
    ok = worst < 1e-9 and ari >= 0.9
    criterion(5, "k-means optimality", ok, f"300 1-D instances max gap {worst:.1e} (< 1e-9); ARI {ari:.3f} (>= 0.9)")
    assert ok


def test_criterion_06_metrics(criterion):
    rng = np.random.default_rng(6)
    mismatches = 0
    for _ in range(100):
        cm = rng.integers(0, 9, (3, 3))
        cm[rng.random((3, 3)) < 0.2] = 0
        if cm.sum() == 0:
            cm[1, 1] = 3
        want = metrics_from_pairs(*pairs_from_confusion(cm))
        pc = per_class_accuracy(cm)
        same_pc = all((np.isnan(a) and b is None) or a == b for a, b in zip(pc, want["per_class"]))
        exact = (accuracy(cm) == want["accuracy"] and macro_f1(cm) == want["macro_f1"]
                 and balanced_accuracy(cm) == want["balanced_accuracy"] and same_pc)
        mismatches += not exact
    ce = abs(masked_cross_entropy(np.zeros((5, 3)), [0, 1, 2, 1, 0], np.ones(5)) - math.log(3))
    ok = mismatches == 0 and ce < 1e-9
    criterion(6, "metric oracle", ok, f"{mismatches} mismatches over 100 matrices (exact); ln 3 error {ce:.1e}")
    assert ok


def test_criterion_07_protocol(criterion, default_event, default_report):
    report, _ = default_report
    counts = [report.run_count(v.value) for v in ALL]
    spread = 0
    y = default_event.duration_class
    for r in range(6):
        folds = stratified_kfold(y, 5, seed=derive_seed(0, r), nodes=default_event.labeled_nodes)
        per = np.array([np.bincount(y[f], minlength=3) for f in folds])
        spread = max(spread, int((per.max(axis=0) - per.min(axis=0)).max()))
    again = run_cv(default_event, ALL, CvConfig(), jobs=4).to_json()
    identical = again == report.to_json()
    ok = counts == [30] * 4 and spread <= 1 and identical
    criterion(7, "protocol fidelity", ok,
              f"runs per variant {counts}; per-class fold spread {spread} (<= 1); byte-identical JSON {identical}")
    assert ok


def test_criterion_08_capacity(criterion, clean_event):
    mask = clean_event.labeled
    X, _ = standardize(clean_event, mask)
    cl = cluster_nodes(clean_event, clean_event.labeled_nodes)
    model = init_params(ModelConfig(variant="bigat", seed=0))
    train_model(model, X, clean_event.graph, cl, clean_event.duration_class, mask, TrainConfig(epochs=300))
    acc = training_accuracy(model, X, clean_event.graph, cl, clean_event.duration_class, mask)
    ok = acc == 1.0
    criterion(8, "capacity", ok, f"BiGAT training accuracy {acc:.4f} after 300 epochs (== 1.0)")
    assert ok


def test_criterion_09_synthetic_trend(criterion, default_report):
    report, took = default_report
    acc = report.mean("bigat", "accuracy")
    bal = report.mean("bigat", "balanced_accuracy")
    gcn_bal = report.mean("gcn", "balanced_accuracy")
    ok = acc >= 0.80 and bal >= gcn_bal - 0.02 and took < 300
    detail = (f"BiGAT acc {acc:.3f} (>= 0.80), BiGAT bal {bal:.3f} vs GCN bal {gcn_bal:.3f} - 0.02; "
              f"4 x 30 runs in {took:.1f}s (< 300s)")
    criterion(9, "synthetic trend", ok, detail)
    assert ok


def test_criterion_10_end_to_end(criterion, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    steps = [
        ["gen", "--out", "data", "--seed", "11"],
        ["analyze", "data", "--out", "analysis", "--perms", "199"],
        ["cv", "data", "--out", "cv", "--repeats", "1", "--epochs", "60", "--trace"],
        ["predict", "data", "--out", "pred/pred.csv", "--epochs", "60", "--save", "pred/model.json", "--trace"],
    ]
    codes = [main(s) for s in steps]
    manifests = ["data/manifest.json", "analysis/manifest.json", "cv/manifest.json", "pred/pred.csv.manifest.json"]
    replays = [main(["replay", m]) for m in manifests]

    ds = load_event("data/nodes.csv", "data/edges.csv")
    parsers = {
        ".json": lambda p: json.loads(Path(p).read_text()),
        "nodes.csv": lambda p: ds,
        "edges.csv": lambda p: ds,
        "clusters.csv": lambda p: read_clusters(p, ds.n),
        "morans_i.csv": read_moran_table,
        "per_class.csv": read_per_class,
        "pred.csv": read_predictions,
        "report.json": lambda p: load_report(Path(p).read_text()),
        "model.json": load_predictor,
        ".svg": ET.parse,
        "table.txt": lambda p: Path(p).read_text().splitlines()[2],
    }
    parsed, unparsed = 0, []
    for m in manifests:
        for rec in load_manifest(m).outputs:
            path = rec["path"]
            name = Path(path).name
            fn = parsers.get(name) or (read_trace if "trace" in path else parsers.get(Path(path).suffix))
            if fn is None:
                unparsed.append(path)
                continue
            fn(path)
            parsed += 1
    ok = codes == [0] * 4 and replays == [0] * 4 and not unparsed
    criterion(10, "end-to-end determinism", ok,
              f"exit codes {codes}, replays {replays}, {parsed} outputs re-parsed, unparsed {unparsed}")
    assert ok
