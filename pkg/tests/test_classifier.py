import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cardiac_fat.classifier import (
    Forest,
    ForestConfig,
    Tree,
    default_subset_size,
    dilate,
    evaluate,
    grow_tree,
    load_model,
    merge_priority,
    predict_score,
    save_model,
    segment_slice,
    train_forest,
    train_tree,
)
from cardiac_fat.errors import CardiacFatError, ModelFormatError, SchemaMismatch
from cardiac_fat.features import BASE_FEATURES, Dataset, NeighborhoodSpec
from cardiac_fat.imaging import FatImage


def dataset(X, labels, cls=0, names=None):
    X = np.asarray(X, float)
    y = np.zeros((len(X), 3), bool)
    y[:, cls] = labels
    if names is None:
        names = BASE_FEATURES[: X.shape[1]] if X.shape[1] <= 15 else tuple(f"f{i}" for i in range(X.shape[1]))
    return Dataset(X, y, names)


def blobs(rng, n=2000, sep=5.0, dims=15):
    lab = rng.random(n) < 0.5
    X = rng.normal(size=(n, dims))
    X[:, 0] += np.where(lab, sep, 0.0)
    return dataset(X, lab)


def leaf(pos, neg):
    return Tree(
        np.array([-1]), np.array([0.0]), np.array([0]), np.array([0]), np.array([pos]), np.array([neg])
    )


def forest_of(trees, n_features=15):
    return Forest(trees, "epicardial", BASE_FEATURES[:n_features], ForestConfig(n_trees=len(trees)))


# --- trees -----------------------------------------------------------------


def test_single_label_gives_single_leaf(rng):
    t = train_tree(dataset(rng.normal(size=(20, 3)), np.ones(20, bool)), "epicardial")
    assert t.n_nodes == 1 and t.pos[0] == 20 and t.neg[0] == 0


def test_separable_1d_is_depth_one():
    x = np.arange(10, dtype=float)[:, None]
    t = train_tree(dataset(x, x[:, 0] < 5), "epicardial")
    assert t.depth() == 1
    assert t.threshold[0] == 4.5
    assert np.array_equal(t.predict(x), x[:, 0] < 5)


def test_midpoint_threshold_falls_back_to_lower_value():
    lo = 1.0
    hi = np.nextafter(lo, 2.0)  # no double strictly between them
    X = np.array([[lo], [hi]])
    t = train_tree(dataset(X, [True, False]), "epicardial")
    assert t.threshold[0] == lo
    assert t.predict(X).tolist() == [True, False]


def test_same_seed_same_tree(rng):
    ds = blobs(rng, 300, sep=1.0)
    a = train_tree(ds, "epicardial", seed=7)
    b = train_tree(ds, "epicardial", seed=7)
    assert a.to_json() == b.to_json()


def test_min_leaf_respected(rng):
    ds = blobs(rng, 300, sep=1.0)
    t = train_tree(ds, "epicardial", min_leaf=10)
    leaves = t.feature < 0
    assert np.all(t.pos[leaves] + t.neg[leaves] >= 10)


def test_tree_invariants(rng):
    t = train_tree(blobs(rng, 500, sep=1.0), "epicardial")
    assert np.all(np.isfinite(t.threshold))
    leaves = t.feature < 0
    assert np.all(t.pos[leaves] + t.neg[leaves] > 0)
    # every root-to-leaf path terminates: each child index is larger than its parent
    internal = np.flatnonzero(~leaves)
    assert np.all(t.left[internal] > internal) and np.all(t.right[internal] > internal)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_full_depth_tree_fits_consistent_data(seed):
    r = np.random.default_rng(seed)
    X = r.integers(0, 5, (60, 4)).astype(float)
    _, first = np.unique(X, axis=0, return_index=True)
    X = X[np.sort(first)]
    lab = r.random(len(X)) < 0.5
    f = train_forest(dataset(X, lab), "epicardial", ForestConfig(n_trees=1, feature_subset_size=4, bootstrap=False))
    assert np.array_equal(f.predict(X), lab)


def test_empty_dataset_rejected():
    with pytest.raises(CardiacFatError):
        train_tree(dataset(np.zeros((0, 2)), np.zeros(0, bool)), "epicardial")
    with pytest.raises(CardiacFatError):
        train_forest(dataset(np.zeros((0, 2)), np.zeros(0, bool)), "epicardial")


def test_subset_size_defaults():
    assert default_subset_size(15) == 4
    assert ForestConfig().subset_size(15) == 4
    with pytest.raises(CardiacFatError):
        ForestConfig(feature_subset_size=20).subset_size(15)
    with pytest.raises(CardiacFatError):
        ForestConfig(n_trees=0)


def test_subset_falls_back_when_drawn_features_are_useless(rng):
    # only feature 0 is informative; with one feature per node the tree must still find it
    X = np.column_stack([np.arange(40.0), np.zeros((40, 5))])
    lab = np.arange(40) < 20
    t = grow_tree(X, lab, np.random.default_rng(0), 1)
    assert t.feature[0] == 0 and t.depth() == 1


# --- forests ---------------------------------------------------------------


def test_one_tree_without_bootstrap_equals_train_tree(rng):
    ds = blobs(rng, 400, sep=1.0)
    f = train_forest(ds, "epicardial", ForestConfig(n_trees=1, seed=3, bootstrap=False))
    t = train_tree(ds, "epicardial", seed=3)
    assert f.trees[0].to_json() == t.to_json()


def two_blobs(seed, n=2000, sep=5.0):
    """Two unit-variance Gaussian blobs whose centres differ by ``sep`` on both features."""
    r = np.random.default_rng(seed)
    lab = r.random(n) < 0.5
    X = r.normal(size=(n, 2)) + np.where(lab, sep, 0.0)[:, None]
    return dataset(X, lab)


def test_forest_on_blobs():
    report = evaluate(two_blobs(100), "epicardial", mode="split66", seed=1)
    assert report["accuracy"] >= 0.99


def test_thread_count_does_not_change_model(tmp_path, rng):
    ds = blobs(rng, 600, sep=1.0)
    save_model(train_forest(ds, "epicardial", ForestConfig(seed=5), threads=1), tmp_path / "a.json")
    save_model(train_forest(ds, "epicardial", ForestConfig(seed=5), threads=3), tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_different_seeds_different_bootstraps(rng):
    ds = blobs(rng, 300, sep=0.5)
    a = train_forest(ds, "epicardial", ForestConfig(n_trees=1, seed=1))
    b = train_forest(ds, "epicardial", ForestConfig(n_trees=1, seed=2))
    assert a.trees[0].to_json() != b.trees[0].to_json()


def test_predict_score_fractions():
    pos, neg = leaf(3, 1), leaf(0, 2)
    fv = np.zeros(15)
    assert predict_score(forest_of([pos] * 10), fv) == 1.0
    assert predict_score(forest_of([neg] * 10), fv) == 0.0
    assert predict_score(forest_of([pos] * 7 + [neg] * 3), fv) == pytest.approx(0.7)


def test_tied_leaf_and_half_score_are_positive():
    fv = np.zeros((1, 15))
    assert forest_of([leaf(2, 2)]).predict(fv)[0]
    assert forest_of([leaf(1, 0), leaf(0, 1)]).predict(fv)[0]


def test_scores_in_unit_interval(rng):
    ds = blobs(rng, 300, sep=1.0)
    f = train_forest(ds, "epicardial")
    s = f.predict_score(rng.normal(size=(200, 15)) * 10)
    assert s.min() >= 0 and s.max() <= 1
    assert np.array_equal(f.predict(ds.X), f.predict_score(ds.X) >= 0.5)


def test_wrong_feature_count():
    with pytest.raises(SchemaMismatch):
        forest_of([leaf(1, 0)]).predict_score(np.zeros((2, 14)))


def test_normalized_forest_predicts_on_raw_features(rng):
    ds = blobs(rng, 400)
    ds.X[:, 0] *= 1000
    f = train_forest(ds, "epicardial", ForestConfig(normalize=True))
    assert (f.predict(ds.X) == ds.labels("epicardial")).mean() > 0.99


# --- persistence -----------------------------------------------------------


def test_model_round_trip(tmp_path, rng):
    ds = blobs(rng, 500, sep=1.0)
    f = train_forest(ds, "epicardial", ForestConfig(seed=9, normalize=True), schema_hash="abc")
    save_model(f, tmp_path / "m.json")
    g = load_model(tmp_path / "m.json")
    probe = rng.normal(size=(1000, 15))
    assert np.array_equal(f.predict_score(probe), g.predict_score(probe))
    assert g.config.seed == 9 and g.schema_hash == "abc"


def test_corrupted_model(tmp_path):
    (tmp_path / "m.json").write_text("{not json")
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "m.json")


def test_model_with_broken_tree(tmp_path, rng):
    f = train_forest(blobs(rng, 100), "epicardial", ForestConfig(n_trees=1))
    save_model(f, tmp_path / "m.json")
    d = json.loads((tmp_path / "m.json").read_text())
    d["trees"][0]["left"][0] = 999
    (tmp_path / "m.json").write_text(json.dumps(d))
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "m.json")


def test_schema_mismatch_on_load(tmp_path, rng):
    f = train_forest(blobs(rng, 100), "epicardial", schema_hash=NeighborhoodSpec().schema_hash())
    save_model(f, tmp_path / "m.json")
    with pytest.raises(SchemaMismatch):
        load_model(tmp_path / "m.json", NeighborhoodSpec(side=21).schema_hash())


# --- merging, segmentation, dilation ---------------------------------------


def test_merge_priority_exhaustive():
    for epi, med, peri in itertools.product([False, True], repeat=3):
        want = (epi, med) if (epi or med) else (peri, peri)
        assert merge_priority(epi, med, peri) == want
    assert merge_priority(True, False, True) == (True, False)
    assert merge_priority(False, False, True) == (True, True)
    assert merge_priority(False, False, False) == (False, False)


class ConstantForest(Forest):
    """Forest stub that votes by gray value lookup."""

    def __init__(self, votes: dict, name="epicardial"):
        spec = NeighborhoodSpec(side=3)
        super().__init__([], name, spec.names, ForestConfig(), spec.schema_hash())
        self.votes = votes

    def predict_score(self, X):
        return np.array([self.votes.get(int(g), 0.0) for g in np.atleast_2d(X)[:, 0]])


def test_segment_slice_merge_rule():
    g = np.array([[10, 20, 30, 0]], np.uint8)
    spec = NeighborhoodSpec(side=3)
    forests = {
        "epicardial": ConstantForest({10: 1.0, 30: 0.2}),
        "mediastinal": ConstantForest({}),
        "pericardium": ConstantForest({10: 1.0, 20: 0.5}),
    }
    seg = segment_slice(FatImage(g), 0, forests, spec)
    assert seg.epicardial.tolist() == [[True, True, False, False]]
    assert seg.mediastinal.tolist() == [[False, True, False, False]]
    assert seg.yellow.tolist() == [[False, True, False, False]]
    assert seg.scores["pericardium"][0, 1] == 0.5


def test_segment_background_slice():
    spec = NeighborhoodSpec(side=3)
    forests = {c: ConstantForest({}) for c in ("epicardial", "mediastinal", "pericardium")}
    seg = segment_slice(FatImage(np.zeros((4, 4), np.uint8)), 0, forests, spec)
    assert not seg.epicardial.any() and not seg.mediastinal.any()


def test_segment_schema_mismatch():
    forests = {c: ConstantForest({}) for c in ("epicardial", "mediastinal", "pericardium")}
    with pytest.raises(SchemaMismatch):
        segment_slice(FatImage(np.ones((4, 4), np.uint8)), 0, forests, NeighborhoodSpec(side=5))


def test_dilate_examples():
    m = np.zeros((5, 5), bool)
    m[2, 2] = True
    out = dilate(m)
    assert out.sum() == 9 and out[1:4, 1:4].all()
    assert not dilate(np.zeros((5, 5), bool)).any()
    assert dilate(np.ones((5, 5), bool)).all()
    assert dilate(m, iterations=2).all()


def test_dilate_restricted_to_fat():
    m = np.zeros((5, 5), bool)
    m[2, 2] = True
    fat = np.zeros((5, 5), bool)
    fat[2, :] = True
    out = dilate(m, fat)
    assert out.tolist() == (m | (fat & dilate(m))).tolist()
    assert out.sum() == 3


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_dilate_monotone_and_union(seed):
    r = np.random.default_rng(seed)
    a = r.random((8, 9)) < 0.2
    b = r.random((8, 9)) < 0.2
    fat = r.random((8, 9)) < 0.7
    assert np.all(dilate(a, fat) >= a)
    assert np.array_equal(dilate(a | b, fat), dilate(a, fat) | dilate(b, fat))
    grown = dilate(a & fat, fat) & ~(a & fat)
    assert np.all(fat[grown])


# --- evaluation harness ----------------------------------------------------


def test_evaluate_separable_both_modes(rng):
    x = rng.permutation(np.concatenate([np.arange(100.0), np.arange(300.0, 400.0)]))[:, None]
    ds = dataset(x, x[:, 0] < 200)
    for mode in ("split66", "kfold10"):
        r = evaluate(ds, "epicardial", ForestConfig(n_trees=3), mode)
        assert r["accuracy"] == 1.0
        assert len(r["fold_accuracy"]) == (1 if mode == "split66" else 10)


def test_evaluate_deterministic(rng):
    ds = blobs(rng, 300, sep=1.0)
    assert evaluate(ds, "epicardial", mode="kfold10") == evaluate(ds, "epicardial", mode="kfold10")


def test_evaluate_chance_level(rng):
    X = rng.normal(size=(2000, 15))
    r = evaluate(dataset(X, rng.random(2000) < 0.5), "epicardial")
    assert abs(r["accuracy"] - 0.5) <= 0.05
    assert -0.1 <= r["kappa"] <= 0.1


def test_evaluate_errors(rng):
    ds = blobs(rng, 5)
    with pytest.raises(CardiacFatError):
        evaluate(ds, "epicardial", mode="kfold10")
    with pytest.raises(CardiacFatError):
        evaluate(ds, "epicardial", mode="loo")
