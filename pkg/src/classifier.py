"""
Lesion-type classification with a random forest.

Trees are grown on bootstrap samples with Gini impurity; each node looks at
``max_features`` features drawn without replacement and splits at the
midpoint between consecutive distinct values. Tree t of a forest seeded
with s draws everything from ``default_rng(s + t)``, bootstrap first.

Model selection is Monte-Carlo cross validation: repeated stratified 80/20
splits, Tomek-link cleaning on the train side only, weighted F1 on the
held-out side.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import stats
from scipy.spatial.distance import cdist
from sklearn.metrics import f1_score
from sklearn.model_selection import ParameterGrid, StratifiedShuffleSplit

from src.errors import ConfigError, FeatureArityError, LengthMismatch, SingleClass, StratificationError
from src.io_formats import read_report, write_report

logger = logging.getLogger(__name__)

LESION_CLASSES = ("conglomeration", "consolidation", "ggo", "granuloma", "tree_in_bud")
SPLIT_TIE_EPS = 1e-12
FOREST_SEED_STRIDE = 100_000
SCORE_TAIL = ["mean_wf1", "std_wf1"]


class ForestParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_trees: int = Field(100, ge=1)
    min_samples_split: int = Field(2, ge=2)
    max_features: Union[int, Literal["sqrt", "all"]] = "sqrt"

    def features_per_node(self, n_features: int) -> int:
        if self.max_features == "sqrt":
            return max(1, int(math.sqrt(n_features)))
        if self.max_features == "all":
            return n_features
        if not 1 <= self.max_features <= n_features:
            raise ConfigError(f"max_features={self.max_features} outside 1..{n_features}")
        return int(self.max_features)


class CvParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    grid: Dict[str, List[Any]] = Field(
        default_factory=lambda: {
            "n_trees": [25, 50, 100],
            "min_samples_split": [2, 5],
            "max_features": ["sqrt", "all"],
        }
    )
    repeats: int = Field(100, ge=1)
    train_frac: float = Field(0.8, gt=0, lt=1)
    tomek: bool = True
    seed: int = 0
    n_jobs: int = Field(1, ge=1)


class ClassifierParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    forest: ForestParams = Field(default_factory=ForestParams)
    cv: CvParams = Field(default_factory=CvParams)


# ------------------------------- dataset ----------------------------------------


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: List[str] = field(default_factory=list)
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y).astype(str)
        if self.X.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.X.shape}")
        if self.X.shape[0] != self.y.shape[0]:
            raise LengthMismatch(f"{self.X.shape[0]} feature rows vs {self.y.shape[0]} labels")
        if not np.isfinite(self.X).all():
            raise ValueError("features contain non-finite values")
        if not self.feature_names:
            self.feature_names = [f"x{i}" for i in range(self.X.shape[1])]
        if self.mean is None:
            self.mean = self.X.mean(axis=0) if len(self) else np.zeros(self.n_features)
        if self.std is None:
            self.std = self.X.std(axis=0) if len(self) else np.ones(self.n_features)

    def __len__(self) -> int:
        return int(self.X.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.X.shape[1])

    @property
    def classes(self) -> List[str]:
        return sorted(set(self.y.tolist()))

    def class_counts(self) -> Dict[str, int]:
        names, counts = np.unique(self.y, return_counts=True)
        return {str(n): int(c) for n, c in zip(names, counts)}

    def standardized(self) -> np.ndarray:
        scale = np.where(self.std > 0, self.std, 1.0)
        return (self.X - self.mean) / scale

    def subset(self, index: np.ndarray) -> "Dataset":
        return Dataset(self.X[index], self.y[index], list(self.feature_names))

    def select_features(self, columns: Sequence[int]) -> "Dataset":
        cols = list(columns)
        return Dataset(self.X[:, cols], self.y.copy(), [self.feature_names[c] for c in cols])

    @classmethod
    def from_rows(cls, rows: Iterable[Mapping[str, Any]], feature_names: Sequence[str]) -> "Dataset":
        rows = list(rows)
        X = np.array([[float(r[n]) for n in feature_names] for r in rows], dtype=np.float64).reshape(-1, len(feature_names))
        y = np.array([str(r["label"]) for r in rows])
        return cls(X, y, list(feature_names))


def read_feature_table(path: str | Path, feature_names: Sequence[str]) -> Dict[int, Dataset]:
    """Feature CSV grouped by quantization level; rows without a label are skipped."""
    by_level: Dict[int, List[Dict[str, str]]] = {}
    for row in read_report(path):
        if not row.get("label"):
            continue
        by_level.setdefault(int(row["L"]), []).append(row)
    return {L: Dataset.from_rows(rows, feature_names) for L, rows in sorted(by_level.items())}


# ------------------------------- tomek links -----------------------------------


def tomek_links(ds: Dataset) -> List[Tuple[int, int]]:
    """Mutual nearest neighbours (Euclidean, z-scored) carrying different labels."""
    if len(ds) < 2:
        return []
    z = ds.standardized()
    d = cdist(z, z)
    np.fill_diagonal(d, np.inf)
    nn = np.argmin(d, axis=1)
    links = []
    for a, b in enumerate(nn):
        if a < b and nn[b] == a and ds.y[a] != ds.y[b]:
            links.append((a, int(b)))
    return links


def tomek_links_filter(ds: Dataset) -> Dataset:
    counts = ds.class_counts()
    drop = set()
    for a, b in tomek_links(ds):
        ca, cb = counts[ds.y[a]], counts[ds.y[b]]
        if ca > cb:
            drop.add(a)
        elif cb > ca:
            drop.add(b)
    if not drop:
        return ds
    keep = np.array([i for i in range(len(ds)) if i not in drop], dtype=np.int64)
    logger.debug("tomek filter removed %d of %d rows", len(drop), len(ds))
    return ds.subset(keep)


# ------------------------------- trees ------------------------------------------


@dataclass
class Tree:
    feature: np.ndarray  # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # (n_nodes, n_classes) bootstrap class counts
    decrease: np.ndarray  # sample-weighted impurity decrease per node

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row; x <= threshold goes left."""
        nodes = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[nodes] >= 0
        while active.any():
            idx = np.nonzero(active)[0]
            n = nodes[idx]
            go_left = X[idx, self.feature[n]] <= self.threshold[n]
            nodes[idx] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[nodes] >= 0
        return nodes

    def predict_index(self, X: np.ndarray) -> np.ndarray:
        # argmax keeps the first maximum: lexicographically first class
        return np.argmax(self.value[self.apply(X)], axis=1)

    def to_dict(self) -> Dict[str, list]:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "decrease": self.decrease.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, list]) -> "Tree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            value=np.asarray(d["value"], dtype=np.float64),
            decrease=np.asarray(d["decrease"], dtype=np.float64),
        )


def gini(counts: np.ndarray) -> float:
    n = counts.sum()
    if n == 0:
        return 0.0
    return float(1.0 - np.sum((counts / n) ** 2))


def _best_split(X: np.ndarray, y: np.ndarray, n_classes: int, features: Sequence[int]) -> Optional[Tuple[int, float]]:
    """Lowest weighted child Gini; ties go to the lower feature, then the lower threshold."""
    n = y.size
    best_score, best = np.inf, None
    onehot = np.eye(n_classes)
    nl = np.arange(1, n, dtype=np.float64)
    nr = n - nl
    for f in sorted(features):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        valid = xs[1:] > xs[:-1]
        if not valid.any():
            continue
        left = np.cumsum(onehot[y[order]], axis=0)[:-1]
        right = left[-1] + onehot[y[order[-1]]] - left
        gl = 1.0 - np.sum((left / nl[:, None]) ** 2, axis=1)
        gr = 1.0 - np.sum((right / nr[:, None]) ** 2, axis=1)
        score = (nl * gl + nr * gr) / n
        score[~valid] = np.inf
        i = int(np.argmin(score))
        if score[i] < best_score - SPLIT_TIE_EPS:
            thr = 0.5 * (xs[i] + xs[i + 1])
            if thr >= xs[i + 1]:
                thr = xs[i]
            best_score, best = score[i], (f, float(thr))
    return best


def grow_tree(
    X: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    max_features: int,
    min_samples_split: int,
    rng: np.random.Generator,
) -> Tree:
    """Grow one tree on (X, y) with y holding class indices."""
    n_total = y.size
    feature: List[int] = []
    threshold: List[float] = []
    left: List[int] = []
    right: List[int] = []
    value: List[np.ndarray] = []
    decrease: List[float] = []

    def new_node(rows: np.ndarray) -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(np.bincount(y[rows], minlength=n_classes).astype(np.float64))
        decrease.append(0.0)
        return len(feature) - 1

    stack = [(new_node(np.arange(n_total)), np.arange(n_total))]
    while stack:
        node, rows = stack.pop()
        counts = value[node]
        if rows.size < min_samples_split or np.count_nonzero(counts) == 1:
            continue
        features = rng.choice(X.shape[1], size=max_features, replace=False)
        split = _best_split(X[rows], y[rows], n_classes, features)
        if split is None:
            continue
        f, thr = split
        go_left = X[rows, f] <= thr
        lrows, rrows = rows[go_left], rows[~go_left]
        feature[node], threshold[node] = f, thr
        left[node] = new_node(lrows)
        right[node] = new_node(rrows)
        decrease[node] = (
            rows.size * gini(counts) - lrows.size * gini(value[left[node]]) - rrows.size * gini(value[right[node]])
        ) / n_total
        # right pushed first so the left subtree gets the lower node ids
        stack.append((right[node], rrows))
        stack.append((left[node], lrows))

    return Tree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=np.vstack(value),
        decrease=np.asarray(decrease, dtype=np.float64),
    )


# ------------------------------- forest -----------------------------------------


@dataclass
class ForestModel:
    trees: List[Tree]
    classes: List[str]
    params: ForestParams
    seed: int
    feature_names: List[str]
    n_train: int

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "classes": list(self.classes),
            "params": self.params.model_dump(),
            "seed": self.seed,
            "feature_names": list(self.feature_names),
            "n_train": self.n_train,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ForestModel":
        return cls(
            trees=[Tree.from_dict(t) for t in d["trees"]],
            classes=list(d["classes"]),
            params=ForestParams(**d["params"]),
            seed=int(d["seed"]),
            feature_names=list(d["feature_names"]),
            n_train=int(d["n_train"]),
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict()), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ForestModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def bootstrap_indices(n_samples: int, seed: int, tree_index: int) -> np.ndarray:
    return np.random.default_rng(seed + tree_index).integers(0, n_samples, size=n_samples)


def train_forest(ds: Dataset, hyper: ForestParams | None = None, seed: int = 0, n_jobs: int = 1) -> ForestModel:
    hyper = hyper or ForestParams()
    classes = ds.classes
    if len(classes) < 2:
        raise SingleClass(f"training needs two classes, got {classes}")
    m = hyper.features_per_node(ds.n_features)
    y = np.searchsorted(np.asarray(classes), ds.y)
    n = len(ds)

    def one_tree(t: int) -> Tree:
        rng = np.random.default_rng(seed + t)
        idx = rng.integers(0, n, size=n)
        return grow_tree(ds.X[idx], y[idx], len(classes), m, hyper.min_samples_split, rng)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trees = list(pool.map(one_tree, range(hyper.n_trees)))
    else:
        trees = [one_tree(t) for t in range(hyper.n_trees)]
    logger.debug("trained %d trees on %d rows, %d features", len(trees), n, ds.n_features)
    return ForestModel(trees, classes, hyper, seed, list(ds.feature_names), n)


def _votes(model: ForestModel, X: np.ndarray) -> np.ndarray:
    votes = np.zeros((X.shape[0], len(model.classes)), dtype=np.float64)
    rows = np.arange(X.shape[0])
    for tree in model.trees:
        votes[rows, tree.predict_index(X)] += 1
    return votes


def predict(model: ForestModel, features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Majority vote over trees; returns labels and per-class vote fractions."""
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if X.shape[1] != model.n_features:
        raise FeatureArityError(f"model expects {model.n_features} features, got {X.shape[1]}")
    votes = _votes(model, X)
    labels = np.asarray(model.classes)[np.argmax(votes, axis=1)]
    return labels, votes / len(model.trees)


def gini_importance(model: ForestModel) -> np.ndarray:
    total = np.zeros(model.n_features, dtype=np.float64)
    for tree in model.trees:
        split = tree.feature >= 0
        np.add.at(total, tree.feature[split], tree.decrease[split])
    s = total.sum()
    if s <= 0:
        return np.full(model.n_features, 1.0 / model.n_features)
    return total / s


def importance_ranking(model: ForestModel) -> List[int]:
    imp = gini_importance(model)
    return sorted(range(imp.size), key=lambda i: (-imp[i], i))


# ------------------------------- scoring ----------------------------------------


def weighted_f1(preds: Sequence[str], labels: Sequence[str]) -> float:
    preds = np.asarray(preds).astype(str)
    labels = np.asarray(labels).astype(str)
    if preds.shape != labels.shape:
        raise LengthMismatch(f"{preds.size} predictions vs {labels.size} labels")
    if labels.size == 0:
        raise ValueError("weighted F1 of an empty set")
    return float(f1_score(labels, preds, average="weighted", zero_division=0))


def oob_weighted_f1(model: ForestModel, ds: Dataset) -> float:
    """Each row voted on only by the trees whose bootstrap left it out."""
    if len(ds) != model.n_train:
        raise LengthMismatch(f"model trained on {model.n_train} rows, dataset has {len(ds)}")
    votes = np.zeros((len(ds), len(model.classes)), dtype=np.float64)
    rows = np.arange(len(ds))
    for t, tree in enumerate(model.trees):
        oob = np.ones(len(ds), dtype=bool)
        oob[bootstrap_indices(len(ds), model.seed, t)] = False
        votes[rows[oob], tree.predict_index(ds.X[oob])] += 1
    seen = votes.sum(axis=1) > 0
    preds = np.asarray(model.classes)[np.argmax(votes[seen], axis=1)]
    return weighted_f1(preds, ds.y[seen])


# ------------------------------- cross validation -------------------------------


@dataclass
class CvResult:
    best: ForestParams
    points: List[ForestParams]
    scores: List[np.ndarray]
    level: Optional[int] = None
    n_features: int = 0

    @property
    def best_mean(self) -> float:
        return float(np.mean(self.scores[self.points.index(self.best)]))

    def table(self) -> List[Dict[str, Any]]:
        rows = []
        for p, s in zip(self.points, self.scores):
            row: Dict[str, Any] = {"L": self.level if self.level is not None else "", "n_features": self.n_features}
            row.update(p.model_dump())
            row["mean_wf1"] = float(np.mean(s))
            row["std_wf1"] = float(np.std(s))
            rows.append(row)
        return rows


def _splits(ds: Dataset, repeats: int, train_frac: float, seed: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    small = {c: n for c, n in ds.class_counts().items() if n < 2}
    if small:
        raise StratificationError(f"classes with fewer than 2 members: {small}")
    sss = StratifiedShuffleSplit(n_splits=repeats, train_size=train_frac, random_state=seed)
    try:
        return list(sss.split(ds.X, ds.y))
    except ValueError as e:
        raise StratificationError(str(e)) from e


def _cv_scores(ds: Dataset, hyper: ForestParams, splits, seed: int, tomek: bool, n_jobs: int = 1) -> np.ndarray:
    scores = np.empty(len(splits), dtype=np.float64)
    for r, (train, test) in enumerate(splits):
        train_ds = ds.subset(train)
        if tomek:
            train_ds = tomek_links_filter(train_ds)
        model = train_forest(train_ds, hyper, seed=seed + r * FOREST_SEED_STRIDE, n_jobs=n_jobs)
        preds, _ = predict(model, ds.X[test])
        scores[r] = weighted_f1(preds, ds.y[test])
    return scores


def grid_search_cv(
    ds: Dataset,
    grid: Mapping[str, Sequence[Any]] | None = None,
    repeats: int = 100,
    train_frac: float = 0.8,
    seed: int = 0,
    tomek: bool = True,
    level: Optional[int] = None,
    n_jobs: int = 1,
) -> CvResult:
    """Mean weighted F1 over repeated stratified splits for every grid point; ties prefer fewer trees."""
    grid = dict(grid) if grid is not None else CvParams().grid
    points = [ForestParams(**p) for p in ParameterGrid(grid)]
    if not points:
        raise ConfigError("empty hyper-parameter grid")
    splits = _splits(ds, repeats, train_frac, seed)
    scores = []
    for p in points:
        s = _cv_scores(ds, p, splits, seed, tomek, n_jobs)
        logger.info("L=%s %s mean_wf1=%.4f std=%.4f", level, p.model_dump(), s.mean(), s.std())
        scores.append(s)
    best_i = min(range(len(points)), key=lambda i: (-float(np.mean(scores[i])), points[i].n_trees, i))
    return CvResult(points[best_i], points, scores, level, ds.n_features)


def feature_count_curve(
    ds: Dataset,
    hyper: ForestParams,
    ranking: Sequence[int],
    ks: Iterable[int],
    repeats: int = 100,
    seed: int = 0,
    train_frac: float = 0.8,
    tomek: bool = True,
) -> List[Dict[str, float]]:
    """Mean/std weighted F1 training on the top-k features of ``ranking``."""
    splits = _splits(ds, repeats, train_frac, seed)
    out = []
    for k in ks:
        sub = ds.select_features(list(ranking)[:k])
        h = hyper
        if isinstance(hyper.max_features, int) and hyper.max_features > k:
            h = hyper.model_copy(update={"max_features": k})
        s = _cv_scores(sub, h, splits, seed, tomek)
        out.append({"k": int(k), "mean_wf1": float(s.mean()), "std_wf1": float(s.std())})
    return out


def anova_across_levels(scores_by_level: Mapping[int, Sequence[float]]) -> Dict[str, float]:
    """One-way ANOVA of CV scores across quantization levels."""
    groups = [np.asarray(v, dtype=np.float64) for _, v in sorted(scores_by_level.items())]
    if len(groups) < 2:
        raise ValueError("ANOVA needs at least two levels")
    res = stats.f_oneway(*groups)
    return {"F": float(res.statistic), "p_value": float(res.pvalue), "n_levels": len(groups)}


def write_score_table(rows: Sequence[Mapping[str, Any]], path: str | Path) -> Path:
    columns = ["L", "n_features", "k"] + list(ForestParams.model_fields) + SCORE_TAIL
    return write_report(rows, columns, path)
