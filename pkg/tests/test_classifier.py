import csv
import json

import numpy as np
import pytest

from src.classifier import (
    Dataset,
    ForestModel,
    ForestParams,
    anova_across_levels,
    bootstrap_indices,
    feature_count_curve,
    gini_importance,
    grid_search_cv,
    importance_ranking,
    oob_weighted_f1,
    predict,
    read_feature_table,
    tomek_links_filter,
    train_forest,
    weighted_f1,
    write_score_table,
)
from src.errors import ConfigError, FeatureArityError, LengthMismatch, SingleClass, StratificationError


def _blobs(n=60, gap=3.0, seed=0):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal(-gap, 1, (n, 2)), rng.normal(gap, 1, (n, 2))])
    y = np.array(["granuloma"] * n + ["ggo"] * n)
    return Dataset(X, y)


def _noisy(n=40, d=3, seed=1):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = np.where(X[:, 0] + 0.8 * rng.normal(size=n) > 0, "a", "b")
    return Dataset(X, y)


def _oracle_tree(X, y, min_split=2, n_classes=2):
    counts = np.bincount(y, minlength=n_classes).astype(float)
    if len(y) < min_split or np.count_nonzero(counts) == 1:
        return int(np.argmax(counts))
    best = (np.inf, None, None)
    for f in range(X.shape[1]):
        vals = np.unique(X[:, f])
        if vals.size < 2:
            continue
        scores, thrs = [], []
        for a, b in zip(vals[:-1], vals[1:]):
            thr = 0.5 * (a + b)
            if thr >= b:
                thr = a
            left = X[:, f] <= thr
            cl = np.bincount(y[left], minlength=n_classes).astype(float)
            cr = counts - cl
            nl, nr = float(left.sum()), float((~left).sum())
            gl = 1.0 - np.sum((cl / nl) ** 2)
            gr = 1.0 - np.sum((cr / nr) ** 2)
            scores.append((nl * gl + nr * gr) / len(y))
            thrs.append(thr)
        i = int(np.argmin(scores))
        if scores[i] < best[0] - 1e-12:
            best = (scores[i], f, thrs[i])
    if best[1] is None:
        return int(np.argmax(counts))
    _, f, thr = best
    left = X[:, f] <= thr
    return (f, thr, _oracle_tree(X[left], y[left], min_split), _oracle_tree(X[~left], y[~left], min_split))


def _oracle_predict(node, x):
    while isinstance(node, tuple):
        f, thr, lo, hi = node
        node = lo if x[f] <= thr else hi
    return node


def _walk(tree, x):
    n = 0
    while tree.feature[n] >= 0:
        n = tree.left[n] if x[tree.feature[n]] <= tree.threshold[n] else tree.right[n]
    return int(np.argmax(tree.value[n]))


# ------------------------------- training ---------------------------------------


def test_step_data_is_learned_with_depth_one_trees():
    X = np.array([[v] for v in [0, 1, 2, 3, 4, 10, 11, 12, 13, 14]], dtype=float)
    y = ["granuloma"] * 5 + ["ggo"] * 5
    ds = Dataset(X, y)
    model = train_forest(ds, ForestParams(n_trees=5, max_features="all"), seed=3)
    labels, _ = predict(model, X)
    assert labels.tolist() == y
    assert all(t.n_nodes in (1, 3) for t in model.trees)


def test_single_tree_matches_reference_tree():
    ds = _noisy()
    model = train_forest(ds, ForestParams(n_trees=1, max_features="all"), seed=5)
    idx = bootstrap_indices(len(ds), 5, 0)
    y_idx = np.searchsorted(np.array(ds.classes), ds.y)
    oracle = _oracle_tree(ds.X[idx], y_idx[idx])
    queries = np.vstack([ds.X, np.random.default_rng(9).normal(size=(200, ds.n_features))])
    labels, _ = predict(model, queries)
    expected = [ds.classes[_oracle_predict(oracle, x)] for x in queries]
    assert labels.tolist() == expected


def test_fully_grown_tree_reproduces_its_bootstrap():
    ds = _noisy(n=50, seed=2)
    model = train_forest(ds, ForestParams(n_trees=1), seed=0)
    idx = bootstrap_indices(len(ds), 0, 0)
    labels, fractions = predict(model, ds.X[idx])
    assert labels.tolist() == ds.y[idx].tolist()
    assert np.allclose(fractions.sum(axis=1), 1.0)


def test_forest_vote_matches_tree_traversal():
    ds = _noisy(n=80, d=4, seed=4)
    model = train_forest(ds, ForestParams(n_trees=7, max_features=2), seed=11)
    queries = np.random.default_rng(0).normal(size=(50, 4))
    labels, fractions = predict(model, queries)
    for x, label, frac in zip(queries, labels, fractions):
        votes = np.bincount([_walk(t, x) for t in model.trees], minlength=len(model.classes))
        assert label == model.classes[int(np.argmax(votes))]
        assert np.allclose(frac, votes / 7)


def test_vote_tie_goes_to_first_class():
    ds = Dataset(np.array([[0.0], [1.0]]), ["b", "a"])
    model = train_forest(ds, ForestParams(n_trees=1), seed=0)
    model.trees[0].value[:] = 1.0
    labels, fractions = predict(model, np.array([[0.5]]))
    assert labels.tolist() == ["a"]
    assert fractions.tolist() == [[1.0, 0.0]]


def test_training_is_deterministic_and_thread_independent():
    ds = _noisy(n=60, seed=6)
    hyper = ForestParams(n_trees=6)
    a = train_forest(ds, hyper, seed=2).to_dict()
    b = train_forest(ds, hyper, seed=2).to_dict()
    c = train_forest(ds, hyper, seed=2, n_jobs=3).to_dict()
    assert a == b == c


def test_prediction_invariant_under_standardization():
    ds = _noisy(n=70, d=3, seed=8)
    z = Dataset(ds.standardized(), ds.y)
    hyper = ForestParams(n_trees=9, max_features=2)
    raw_model = train_forest(ds, hyper, seed=1)
    z_model = train_forest(z, hyper, seed=1)
    queries = np.random.default_rng(3).normal(size=(100, 3))
    scale = np.where(ds.std > 0, ds.std, 1.0)
    assert np.array_equal(predict(raw_model, queries)[0], predict(z_model, (queries - ds.mean) / scale)[0])


def test_training_errors():
    with pytest.raises(SingleClass):
        train_forest(Dataset(np.zeros((4, 2)), ["ggo"] * 4))
    model = train_forest(_noisy(), ForestParams(n_trees=2))
    with pytest.raises(FeatureArityError):
        predict(model, np.zeros((1, 5)))
    with pytest.raises(ConfigError):
        train_forest(_noisy(), ForestParams(n_trees=2, max_features=7))


def test_dataset_rejects_non_finite():
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan, 1.0]]), ["a"])
    with pytest.raises(LengthMismatch):
        Dataset(np.zeros((3, 2)), ["a", "b"])


def test_forest_survives_json():
    ds = _noisy(n=50, seed=12)
    model = train_forest(ds, ForestParams(n_trees=4), seed=7)
    again = ForestModel.from_dict(json.loads(json.dumps(model.to_dict())))
    queries = np.random.default_rng(1).normal(size=(40, 3))
    assert np.array_equal(predict(model, queries)[1], predict(again, queries)[1])


# ------------------------------- importance -------------------------------------


def _one_signal(n=300, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 6))
    y = np.where(X[:, 0] > 0, "consolidation", "granuloma")
    return Dataset(X, y)


def test_single_informative_feature_dominates():
    ds = _one_signal()
    imp = gini_importance(train_forest(ds, ForestParams(n_trees=20, max_features=2), seed=0))
    assert imp.sum() == pytest.approx(1.0, abs=1e-9)
    assert (imp >= 0).all()
    assert imp[0] > 0.5
    assert importance_ranking(train_forest(ds, ForestParams(n_trees=20, max_features=2), seed=0))[0] == 0


def test_duplicated_feature_shares_importance():
    ds = _one_signal(n=200, seed=3)
    hyper = ForestParams(n_trees=10, max_features="all")
    single = gini_importance(train_forest(ds, hyper, seed=4))[0]
    dup = Dataset(np.column_stack([ds.X, ds.X[:, 0]]), ds.y)
    imp = gini_importance(train_forest(dup, hyper, seed=4))
    assert abs(imp[0] + imp[-1] - single) <= 0.1


def test_oob_score_on_shuffled_labels_is_majority_baseline():
    rng = np.random.default_rng(21)
    X = rng.normal(size=(500, 4))
    y = np.array(["granuloma"] * 450 + ["ggo"] * 50)
    rng.shuffle(y)
    ds = Dataset(X, y)
    model = train_forest(ds, ForestParams(n_trees=25), seed=0)
    baseline = weighted_f1(["granuloma"] * 500, y)
    assert abs(oob_weighted_f1(model, ds) - baseline) <= 0.05


# ------------------------------- scoring ----------------------------------------


def test_weighted_f1_cases():
    assert weighted_f1(["a", "b", "c"], ["a", "b", "c"]) == 1.0
    assert weighted_f1(["b", "a", "a"], ["a", "b", "b"]) == 0.0
    labels = ["a", "a", "a", "b", "b", "c"]
    preds = ["a", "a", "b", "b", "b", "c"]
    # F1_a = F1_b = 0.8, F1_c = 1
    assert weighted_f1(preds, labels) == pytest.approx((3 * 0.8 + 2 * 0.8 + 1.0) / 6)
    with pytest.raises(LengthMismatch):
        weighted_f1(["a"], ["a", "b"])


# ------------------------------- tomek links ------------------------------------


def test_tomek_keeps_separated_blobs():
    ds = _blobs(n=20, gap=6.0)
    assert len(tomek_links_filter(ds)) == len(ds)


def test_tomek_two_points_tie_removes_neither():
    ds = Dataset(np.array([[0.0, 0.0], [1.0, 1.0]]), ["a", "b"])
    assert len(tomek_links_filter(ds)) == 2


def test_tomek_removes_majority_member():
    ds = Dataset(np.array([[0.0], [10.0], [0.5]]), ["a", "a", "b"])
    out = tomek_links_filter(ds)
    assert out.X[:, 0].tolist() == [10.0, 0.5]
    assert out.y.tolist() == ["a", "b"]


def test_tomek_matches_brute_force():
    rng = np.random.default_rng(13)
    X = rng.normal(size=(60, 2))
    y = np.array(["a"] * 40 + ["b"] * 20)
    rng.shuffle(y)
    ds = Dataset(X, y)
    z = (X - X.mean(axis=0)) / X.std(axis=0)
    nn = []
    for i in range(len(z)):
        d = [np.linalg.norm(z[i] - z[j]) if j != i else np.inf for j in range(len(z))]
        nn.append(int(np.argmin(d)))
    drop = set()
    for i, j in enumerate(nn):
        if nn[j] == i and y[i] != y[j]:
            drop.add(i if y[i] == "a" else j)
    keep = [i for i in range(len(z)) if i not in drop]
    out = tomek_links_filter(ds)
    assert np.array_equal(out.X, X[keep])
    assert drop
    assert all(y[i] == "a" for i in drop)


# ------------------------------- cross validation -------------------------------


def test_single_grid_point_gives_hundred_scores():
    ds = _blobs(n=20)
    res = grid_search_cv(ds, {"n_trees": [3]}, seed=1)
    assert len(res.scores) == 1
    assert res.scores[0].shape == (100,)
    assert res.best.n_trees == 3
    table = res.table()
    assert len(table) == 1
    assert table[0]["n_features"] == 2


def test_separable_data_scores_high():
    ds = _blobs(n=40)
    res = grid_search_cv(ds, {"n_trees": [3, 5], "min_samples_split": [2, 4]}, repeats=10, seed=0, level=16)
    assert max(r["mean_wf1"] for r in res.table()) >= 0.95
    assert all(r["L"] == 16 for r in res.table())


def test_tied_scores_prefer_fewer_trees():
    ds = _blobs(n=20, gap=10.0)
    res = grid_search_cv(ds, {"n_trees": [5, 3]}, repeats=5)
    assert all(np.all(s == 1.0) for s in res.scores)
    assert res.best.n_trees == 3


def test_stratification_needs_two_members_per_class():
    X = np.random.default_rng(0).normal(size=(11, 2))
    ds = Dataset(X, ["a"] * 10 + ["b"])
    with pytest.raises(StratificationError):
        grid_search_cv(ds, {"n_trees": [2]}, repeats=2)


def test_feature_count_curve_grows_with_informative_features():
    rng = np.random.default_rng(17)
    X = rng.normal(size=(150, 6))
    y = np.where(X[:, 0] + X[:, 1] + X[:, 2] > 0, "pos", "neg")
    ds = Dataset(X, y)
    ranking = importance_ranking(train_forest(ds, ForestParams(n_trees=30, max_features="all"), seed=0))
    assert set(ranking[:3]) == {0, 1, 2}
    curve = feature_count_curve(ds, ForestParams(n_trees=10, max_features="all"), ranking, range(1, 7), repeats=5)
    means = [c["mean_wf1"] for c in curve]
    assert [c["k"] for c in curve] == [1, 2, 3, 4, 5, 6]
    assert means[2] > means[0] + 0.05
    assert min(means[3:]) >= means[2] - 0.08


def test_anova_across_levels():
    rng = np.random.default_rng(0)
    same = {8: rng.normal(0.8, 0.02, 50), 16: rng.normal(0.8, 0.02, 50)}
    apart = {8: rng.normal(0.7, 0.02, 50), 16: rng.normal(0.8, 0.02, 50), 32: rng.normal(0.9, 0.02, 50)}
    assert anova_across_levels(same)["p_value"] > 0.01
    res = anova_across_levels(apart)
    assert res["p_value"] < 1e-6 and res["n_levels"] == 3
    with pytest.raises(ValueError):
        anova_across_levels({8: [0.1, 0.2]})


# ------------------------------- files ------------------------------------------


def test_score_table_header(tmp_path):
    res = grid_search_cv(_blobs(n=15), {"n_trees": [2]}, repeats=3, level=32)
    path = write_score_table(res.table(), tmp_path / "scores.csv")
    with path.open() as f:
        reader = csv.reader(f)
        assert next(reader) == ["L", "n_features", "k", "n_trees", "min_samples_split", "max_features", "mean_wf1", "std_wf1"]
        assert next(reader)[:4] == ["32", "2", "", "2"]


def test_read_feature_table_groups_levels(tmp_path):
    path = tmp_path / "features.csv"
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["roi_id", "L", "label", "f1", "f2"])
        w.writeheader()
        w.writerow({"roi_id": 1, "L": 8, "label": "ggo", "f1": 0.1, "f2": 1})
        w.writerow({"roi_id": 2, "L": 8, "label": "granuloma", "f1": 0.3, "f2": 2})
        w.writerow({"roi_id": 1, "L": 16, "label": "ggo", "f1": 0.2, "f2": 3})
        w.writerow({"roi_id": 3, "L": 16, "label": "", "f1": 0.5, "f2": 4})
    tables = read_feature_table(path, ["f1", "f2"])
    assert sorted(tables) == [8, 16]
    assert len(tables[8]) == 2 and len(tables[16]) == 1
    assert tables[8].X.tolist() == [[0.1, 1.0], [0.3, 2.0]]
