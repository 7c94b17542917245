import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bigat.cluster import adjusted_rand_index, cluster_nodes
from bigat.data import (
    FEATURE_NAMES,
    NODE_COLUMNS,
    DataError,
    DurationClass,
    EventDataset,
    StandardizedFeatures,
    SynthConfig,
    fit_transform,
    label_duration,
    label_durations,
    load_event,
    save_event,
    standardize,
    synth_event,
    write_meta,
)
from bigat.graph import build_from_edges, morans_i_significance


# --- labels -------------------------------------------------------------------------

@pytest.mark.parametrize("days,cls", [
    (0.0, DurationClass.SHORT), (1.5, DurationClass.SHORT), (2.0, DurationClass.MEDIUM),
    (6.0, DurationClass.MEDIUM), (6.0001, DurationClass.LONG), (7.0, DurationClass.LONG),
])
def test_label_duration_examples(days, cls):
    assert label_duration(days) is cls


def test_label_duration_rejects_negative_and_nan():
    with pytest.raises(DataError):
        label_duration(-0.1)
    with pytest.raises(DataError):
        label_duration(float("nan"))
    with pytest.raises(DataError):
        label_durations([1.0, -2.0])


@given(st.floats(0, 1e4), st.floats(0, 1e4))
def test_label_duration_is_monotone(a, b):
    lo, hi = sorted((a, b))
    assert label_duration(lo) <= label_duration(hi)


def test_vectorized_labels_agree():
    days = np.array([0.3, 2.0, np.nan, 6.0, 9.5])
    assert label_durations(days).tolist() == [0, 1, -1, 1, 2]


# --- file I/O -----------------------------------------------------------------------

def _row(nid, swath="1,0,0,0", days="1.5", name=None):
    return f"{nid},{name or 'c' + str(nid)},0,{nid},100,5000,900,0.1,0.2,0.3,0.4,{swath},{days}\n"


def _write(tmp_path, rows, edges="u,v\n0,1\n", header=None):
    (tmp_path / "nodes.csv").write_text((header or ",".join(NODE_COLUMNS)) + "\n" + "".join(rows))
    (tmp_path / "edges.csv").write_text(edges)
    return tmp_path / "nodes.csv", tmp_path / "edges.csv"


def test_minimal_two_node_file(tmp_path):
    ds = load_event(*_write(tmp_path, [_row(0), _row(1, days="")]))
    assert ds.n == 2 and ds.graph.edges == ((0, 1),)
    assert ds.labeled.tolist() == [True, False]
    assert ds.duration_class.tolist() == [0, -1]
    assert ds.labeled_nodes.tolist() == [0]


def test_simplex_violation_reports_row(tmp_path):
    with pytest.raises(DataError, match="row 3.*swath"):
        load_event(*_write(tmp_path, [_row(0), _row(1, swath="0.5,0.5,0.5,0.5")]))


@pytest.mark.parametrize("rows,match", [
    ([_row(0), _row(1).replace(",900,", ",big,")], "row 3.*'area'.*not numeric"),
    ([_row(0), _row(1, days="-1")], "row 3.*negative"),
    ([_row(0), _row(0)], "row 3.*node_id"),
    ([_row(0, days=""), _row(1, days="")], "no labeled"),
])
def test_load_errors(tmp_path, rows, match):
    with pytest.raises(DataError, match=match):
        load_event(*_write(tmp_path, rows))


def test_missing_column_names_the_schema(tmp_path):
    header = ",".join(c for c in NODE_COLUMNS if c != "svi_theme3")
    row = _row(0).replace("0.3,", "", 1)
    with pytest.raises(DataError, match=r"missing column\(s\) \['svi_theme3'\]"):
        load_event(*_write(tmp_path, [row], edges="u,v\n", header=header))


def test_dangling_edge_reports_row(tmp_path):
    with pytest.raises(DataError, match=r":3:"):
        load_event(*_write(tmp_path, [_row(0), _row(1)], edges="u,v\n0,1\n1,5\n"))


def test_save_load_round_trip_is_bitwise(tmp_path):
    ds = synth_event(SynthConfig(unlabeled_fraction=0.2, seed=3))
    save_event(ds, tmp_path)
    back = load_event(tmp_path / "nodes.csv", tmp_path / "edges.csv")
    assert np.array_equal(back.features, ds.features)
    assert np.array_equal(back.duration_days, ds.duration_days, equal_nan=True)
    assert np.array_equal(back.planted_cluster, ds.planted_cluster)
    assert np.array_equal(back.coords, ds.coords)
    assert back.graph.edges == ds.graph.edges and back.node_names == ds.node_names
    save_event(back, tmp_path / "again")
    assert (tmp_path / "again" / "nodes.csv").read_bytes() == (tmp_path / "nodes.csv").read_bytes()


def test_dataset_validates_shapes():
    g = build_from_edges(2, [(0, 1)])
    with pytest.raises(DataError):
        EventDataset("x", np.zeros((2, 10)), np.ones(2), g)
    with pytest.raises(DataError):
        EventDataset("x", np.zeros((2, 11)), np.ones(2), g)  # swath rows sum to 0


# --- standardization ----------------------------------------------------------------

def test_transform_matches_manual_recipe(default_event):
    mask = np.zeros(default_event.n, dtype=bool)
    mask[::3] = True
    X, t = standardize(default_event, mask)
    raw = default_event.features.copy()
    for c in range(3):
        raw[:, c] = np.log1p(raw[:, c])
    for c in range(11):
        col = raw[mask, c]
        sd = col.std()
        want = (raw[:, c] - col.mean()) / (sd if sd >= 1e-8 else 1.0)
        assert np.allclose(X[:, c], want, atol=1e-12)
    tr = np.asarray(X)[mask]
    varying = tr.std(axis=0) > 0
    assert np.all(np.abs(tr.mean(axis=0)) < 1e-9)
    assert np.all(np.abs(tr.std(axis=0)[varying] - 1) < 1e-6)


def test_constant_column_becomes_zero():
    feats = np.tile([10.0, 100, 50, 0.5, 0.5, 0.5, 0.5, 1, 0, 0, 0], (4, 1))
    feats[:, 4] = [0.1, 0.2, 0.3, 0.4]
    t = fit_transform(feats, np.ones(4, dtype=bool))
    X = np.asarray(t.apply(feats))
    assert not X[:, [0, 1, 2, 3, 5, 6, 7, 8, 9, 10]].any()
    assert t.scale[0] == 1.0


def test_transform_is_single_use(default_event):
    X, t = standardize(default_event, default_event.labeled)
    assert isinstance(X, StandardizedFeatures)
    with pytest.raises(DataError, match="already standardized"):
        t.apply(X)
    raw_again = t.apply(default_event.features)
    assert np.array_equal(np.asarray(raw_again), np.asarray(X))


def test_transform_round_trips_through_dict(default_event):
    _, t = standardize(default_event, default_event.labeled)
    back = type(t).from_dict(json.loads(json.dumps(t.to_dict())))
    assert np.array_equal(np.asarray(back.apply(default_event.features)), np.asarray(t.apply(default_event.features)))


def test_transform_rejects_empty_mask(default_event):
    with pytest.raises(DataError):
        fit_transform(default_event.features, np.zeros(default_event.n, dtype=bool))


# --- synthetic generator ------------------------------------------------------------

def test_default_event_shape(default_event):
    assert default_event.n == 130 and default_event.features.shape == (130, len(FEATURE_NAMES))
    assert default_event.labeled.all()
    assert set(np.unique(default_event.duration_class)) == {0, 1, 2}
    assert set(np.unique(default_event.planted_cluster)) == {1, 2}


def test_default_event_is_spatially_autocorrelated(default_event):
    stat, p = morans_i_significance(default_event.graph, np.log(default_event.duration_days), 999, seed=0)
    assert stat > 0 and p < 0.01


def test_generator_is_seed_deterministic():
    a, b = synth_event(SynthConfig(seed=5)), synth_event(SynthConfig(seed=5))
    assert np.array_equal(a.features, b.features) and np.array_equal(a.duration_days, b.duration_days)
    c = synth_event(SynthConfig(seed=6))
    assert c.n == a.n and c.graph.edges == a.graph.edges and c.features.shape == a.features.shape
    assert not np.array_equal(c.features, a.features)


def test_planted_clusters_recoverable(default_event):
    km = cluster_nodes(default_event, default_event.labeled_nodes)
    assert adjusted_rand_index(km.labels, default_event.planted_cluster) >= 0.9


def test_label_noise_only_moves_one_class():
    clean = synth_event(SynthConfig(label_noise=0.0))
    noisy = synth_event(SynthConfig(label_noise=0.5))
    diff = np.abs(clean.duration_class - noisy.duration_class)
    assert diff.max() == 1 and 0.3 < np.mean(diff > 0) < 0.7


def test_extreme_thresholds_give_one_class():
    ds = synth_event(SynthConfig(short_quantile=1.0, long_quantile=1.0, label_noise=0.0))
    assert np.unique(ds.duration_class).tolist() == [0]


def test_unlabeled_fraction():
    ds = synth_event(SynthConfig(unlabeled_fraction=0.2))
    assert (~ds.labeled).sum() == 26


def test_config_validation_and_round_trip(tmp_path):
    with pytest.raises(DataError):
        SynthConfig(track=())
    with pytest.raises(DataError):
        SynthConfig(r64=3.0, r50=2.0)
    with pytest.raises(DataError):
        SynthConfig(label_noise=1.0)
    cfg = SynthConfig(seed=12, rows=6, cols=7, track=((0, 0), (6, 7)))
    write_meta(cfg, tmp_path)
    doc = json.loads((tmp_path / "meta.json").read_text())
    assert doc["version"] == 1
    assert SynthConfig.from_dict(doc["synth_config"]) == cfg
    with pytest.raises(DataError, match="unknown"):
        SynthConfig.from_dict({"colour": 3})
