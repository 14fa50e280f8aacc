"""Bagged Gini decision trees, one binary forest per fat class.

Defaults follow Weka 3.6's RandomForest: 10 trees, floor(log2(k) + 1) random
features per node, unlimited depth. Every random draw comes from
``numpy.random.default_rng(seed + tree_index)``, so a (dataset, seed, config)
triple fixes every tree regardless of how many threads train them.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import quantify
from .errors import CardiacFatError, ModelFormatError, SchemaMismatch
from .features import CLASSES, Dataset, NeighborhoodSpec, feature_matrix, minmax_apply, minmax_fit
from .imaging import FatImage, atomic_write_bytes

logger = logging.getLogger(__name__)

MODEL_FORMAT = "cardiac-fat-forest"
MODEL_VERSION = 1


@dataclass(eq=False)
class Tree:
    """Flat binary tree; node 0 is the root and ``feature == -1`` marks a leaf.

    Internal nodes send ``x[feature] <= threshold`` left. Leaves keep the
    positive and negative training counts that reached them.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, int)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def leaf_index(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            active = f >= 0
            if not active.any():
                return node
            r, n = rows[active], node[active]
            go_left = X[r, f[active]] <= self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])

    def predict(self, X: np.ndarray) -> np.ndarray:
        leaf = self.leaf_index(np.asarray(X, dtype=np.float64))
        return self.pos[leaf] >= self.neg[leaf]

    def to_json(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "pos": self.pos.tolist(),
            "neg": self.neg.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Tree":
        tree = cls(
            np.array(d["feature"], np.int64),
            np.array(d["threshold"], np.float64),
            np.array(d["left"], np.int64),
            np.array(d["right"], np.int64),
            np.array(d["pos"], np.int64),
            np.array(d["neg"], np.int64),
        )
        n = tree.n_nodes
        if n == 0 or any(len(a) != n for a in (tree.threshold, tree.left, tree.right, tree.pos, tree.neg)):
            raise ModelFormatError("tree arrays have inconsistent lengths")
        internal = tree.feature >= 0
        kids = np.concatenate([tree.left[internal], tree.right[internal]])
        if kids.size and (kids.min() <= 0 or kids.max() >= n):
            raise ModelFormatError("tree child index out of range")
        if not np.all(np.isfinite(tree.threshold)):
            raise ModelFormatError("non-finite split threshold")
        leaves = ~internal
        if np.any(tree.pos[leaves] + tree.neg[leaves] <= 0) or np.any(tree.pos < 0) or np.any(tree.neg < 0):
            raise ModelFormatError("leaf counts must be non-negative and not both zero")
        return tree


def _best_split(x: np.ndarray, y: np.ndarray, min_leaf: int):
    """Best Gini split of one feature: (score, threshold) or None.

    ``score`` is sum over children of (pos^2 + neg^2) / size, which grows as
    the weighted Gini impurity shrinks.
    """
    n = len(x)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ys = y[order]
    pos_left = np.cumsum(ys)[:-1]
    n_left = np.arange(1, n)
    n_right = n - n_left
    ok = (xs[:-1] < xs[1:]) & (n_left >= min_leaf) & (n_right >= min_leaf)
    if not ok.any():
        return None
    total_pos = pos_left[-1] + ys[-1]
    pos_right = total_pos - pos_left
    neg_left = n_left - pos_left
    neg_right = n_right - pos_right
    score = (pos_left**2 + neg_left**2) / n_left + (pos_right**2 + neg_right**2) / n_right
    score = np.where(ok, score, -np.inf)
    i = int(np.argmax(score))
    lo, hi = xs[i], xs[i + 1]
    thr = lo + (hi - lo) / 2.0
    if not lo <= thr < hi:
        thr = lo
    return float(score[i]), float(thr)


def grow_tree(
    X: np.ndarray,
    y: np.ndarray,
    rng: np.random.Generator,
    feature_subset_size: int,
    min_leaf: int = 1,
) -> Tree:
    """Grow an unpruned Gini tree on (X, y).

    Each node draws a random ordering of the features and scores the first
    ``feature_subset_size``; if none of them reduces impurity the remaining
    features are tried in the same random order before the node becomes a leaf.
    """
    n_features = X.shape[1]
    y = y.astype(np.int64)
    feature, threshold, left, right, pos, neg = [], [], [], [], [], []

    def new_node():
        for a in (feature, threshold, left, right, pos, neg):
            a.append(0)
        feature[-1] = -1
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.arange(len(y)))]
    while stack:
        node, idx = stack.pop()
        yi = y[idx]
        n = len(idx)
        p = int(yi.sum())
        pos[node], neg[node] = p, n - p
        if p == 0 or p == n or n < 2 * min_leaf:
            continue
        parent = (p * p + (n - p) ** 2) / n
        tol = 1e-12 * max(1.0, parent)
        best = None
        order = rng.permutation(n_features)
        for rank, f in enumerate(order):
            if rank >= feature_subset_size and best is not None:
                break
            found = _best_split(X[idx, f], yi, min_leaf)
            if found is not None and found[0] > parent + tol and (best is None or found[0] > best[0]):
                best = (found[0], found[1], int(f))
        if best is None:
            continue
        _, thr, f = best
        go_left = X[idx, f] <= thr
        feature[node], threshold[node] = f, thr
        left[node] = new_node()
        right[node] = new_node()
        # push right first so the left subtree is numbered first
        stack.append((right[node], idx[~go_left]))
        stack.append((left[node], idx[go_left]))
    return Tree(
        np.array(feature, np.int64),
        np.array(threshold, np.float64),
        np.array(left, np.int64),
        np.array(right, np.int64),
        np.array(pos, np.int64),
        np.array(neg, np.int64),
    )


def default_subset_size(n_features: int) -> int:
    return int(math.floor(math.log2(n_features) + 1))


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 10
    feature_subset_size: int | None = None
    min_leaf: int = 1
    seed: int = 1
    normalize: bool = False
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_trees < 1:
            raise CardiacFatError("a forest needs at least one tree")
        if self.min_leaf < 1:
            raise CardiacFatError("min_leaf must be at least 1")

    def subset_size(self, n_features: int) -> int:
        k = self.feature_subset_size or default_subset_size(n_features)
        if not 1 <= k <= n_features:
            raise CardiacFatError(f"feature_subset_size {k} outside 1..{n_features}")
        return k


@dataclass(eq=False)
class Forest:
    trees: list
    trained_class: str
    feature_names: tuple
    config: ForestConfig
    schema_hash: str = ""
    norm_lo: np.ndarray | None = None
    norm_span: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def _prepare(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != len(self.feature_names):
            raise SchemaMismatch(
                f"forest expects {len(self.feature_names)} features, got {X.shape[1]}"
            )
        if self.norm_lo is not None:
            X = minmax_apply(X, self.norm_lo, self.norm_span)
        return X

    def predict_score(self, X) -> np.ndarray:
        """Fraction of trees voting positive, per row."""
        X = self._prepare(X)
        votes = np.zeros(len(X))
        for tree in self.trees:
            votes += tree.predict(X)
        return votes / len(self.trees)

    def predict(self, X) -> np.ndarray:
        return self.predict_score(X) >= 0.5


def predict_score(forest: Forest, fv) -> float | np.ndarray:
    """Vote fraction for one feature vector (float) or a matrix of them (array)."""
    scores = forest.predict_score(fv)
    return float(scores[0]) if np.ndim(fv) == 1 else scores


def _fit_arrays(X, config: ForestConfig):
    if config.normalize:
        lo, span = minmax_fit(X)
        return minmax_apply(X, lo, span), lo, span
    return X, None, None


def train_tree(
    ds: Dataset,
    class_name: str,
    seed: int = 1,
    feature_subset_size: int | None = None,
    min_leaf: int = 1,
) -> Tree:
    """Single tree on the whole dataset (no bootstrap)."""
    if len(ds) == 0:
        raise CardiacFatError("cannot train on an empty dataset")
    k = ForestConfig(feature_subset_size=feature_subset_size).subset_size(ds.X.shape[1])
    return grow_tree(ds.X, ds.labels(class_name), np.random.default_rng(seed), k, min_leaf)


def train_forest(
    ds: Dataset,
    class_name: str,
    config: ForestConfig | None = None,
    threads: int = 1,
    schema_hash: str = "",
) -> Forest:
    config = config or ForestConfig()
    if len(ds) == 0:
        raise CardiacFatError("cannot train on an empty dataset")
    X, lo, span = _fit_arrays(ds.X, config)
    y = ds.labels(class_name)
    k = config.subset_size(X.shape[1])
    n = len(y)

    def one(i: int) -> Tree:
        rng = np.random.default_rng(config.seed + i)
        idx = rng.integers(0, n, n) if config.bootstrap else np.arange(n)
        return grow_tree(X[idx], y[idx], rng, k, config.min_leaf)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trees = list(pool.map(one, range(config.n_trees)))
    else:
        trees = [one(i) for i in range(config.n_trees)]
    logger.info("trained %d %s trees on %d rows", len(trees), class_name, n)
    return Forest(trees, class_name, tuple(ds.feature_names), config, schema_hash, lo, span)


# --- persistence -----------------------------------------------------------


def forest_to_json(forest: Forest) -> dict:
    cfg = forest.config
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "trained_class": forest.trained_class,
        "schema_hash": forest.schema_hash,
        "feature_names": list(forest.feature_names),
        "config": {
            "n_trees": cfg.n_trees,
            "feature_subset_size": cfg.feature_subset_size,
            "min_leaf": cfg.min_leaf,
            "seed": cfg.seed,
            "normalize": cfg.normalize,
            "bootstrap": cfg.bootstrap,
        },
        "normalization": None
        if forest.norm_lo is None
        else {"lo": forest.norm_lo.tolist(), "span": forest.norm_span.tolist()},
        "extras": forest.extras,
        "trees": [t.to_json() for t in forest.trees],
    }


def save_model(forest: Forest, path) -> None:
    text = json.dumps(forest_to_json(forest), sort_keys=True, separators=(",", ":"))
    atomic_write_bytes(path, (text + "\n").encode())


def load_model(path, expected_schema: str | None = None) -> Forest:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except FileNotFoundError:
        raise ModelFormatError(f"missing model file: {path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"{path}: cannot parse model ({exc})") from None
    try:
        if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
            raise ModelFormatError(f"{path}: not a version {MODEL_VERSION} {MODEL_FORMAT} file")
        if d["trained_class"] not in CLASSES:
            raise ModelFormatError(f"{path}: unknown class {d['trained_class']!r}")
        config = ForestConfig(**d["config"])
        trees = [Tree.from_json(t) for t in d["trees"]]
        if not trees:
            raise ModelFormatError(f"{path}: model has no trees")
        names = tuple(d["feature_names"])
        for t in trees:
            if t.feature.max() >= len(names):
                raise ModelFormatError(f"{path}: split on unknown feature")
        norm = d.get("normalization")
        lo = np.array(norm["lo"], np.float64) if norm else None
        span = np.array(norm["span"], np.float64) if norm else None
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"{path}: malformed model ({exc!r})") from None
    forest = Forest(trees, d["trained_class"], names, config, d.get("schema_hash", ""), lo, span, d.get("extras", {}))
    if expected_schema is not None and forest.schema_hash != expected_schema:
        raise SchemaMismatch(
            f"{path}: model schema {forest.schema_hash} does not match extractor schema {expected_schema}"
        )
    return forest


# --- segmentation ----------------------------------------------------------


def merge_priority(epi: bool, med: bool, peri: bool) -> tuple[bool, bool]:
    """Fat predictions win; a pericardium-only pixel joins both fat classes."""
    if epi or med:
        return epi, med
    return peri, peri


@dataclass(eq=False)
class SegmentationResult:
    epicardial: np.ndarray
    mediastinal: np.ndarray
    scores: dict

    @property
    def yellow(self) -> np.ndarray:
        return self.epicardial & self.mediastinal


def _check_forests(forests, spec: NeighborhoodSpec) -> dict:
    if not isinstance(forests, dict):
        forests = dict(zip(CLASSES, forests))
    missing = [c for c in CLASSES if c not in forests]
    if missing:
        raise CardiacFatError(f"missing forest for {', '.join(missing)}")
    expected = spec.schema_hash()
    for name, f in forests.items():
        if f.schema_hash and f.schema_hash != expected:
            raise SchemaMismatch(
                f"{name} model schema {f.schema_hash} does not match extractor schema {expected}"
            )
        if tuple(f.feature_names) != tuple(spec.names):
            raise SchemaMismatch(f"{name} model was trained on different feature columns")
    return forests


def segment_slice(img: FatImage, z: int, forests, spec: NeighborhoodSpec | None = None) -> SegmentationResult:
    """Classify every fat pixel of a slice and merge the three binary votes."""
    spec = spec or NeighborhoodSpec()
    forests = _check_forests(forests, spec)
    shape = img.gray.shape
    scores = {c: np.zeros(shape) for c in CLASSES}
    epi = np.zeros(shape, bool)
    med = np.zeros(shape, bool)
    coords, X = feature_matrix(img, z, spec)
    if len(X):
        ys, xs = coords[:, 0], coords[:, 1]
        votes = {c: forests[c].predict_score(X) for c in CLASSES}
        for c in CLASSES:
            scores[c][ys, xs] = votes[c]
        e = votes["epicardial"] >= 0.5
        m = votes["mediastinal"] >= 0.5
        p = votes["pericardium"] >= 0.5
        lone = ~(e | m)
        epi[ys, xs] = e | (lone & p)
        med[ys, xs] = m | (lone & p)
    return SegmentationResult(epi, med, scores)


def dilate(mask: np.ndarray, fat: np.ndarray | None = None, iterations: int = 1) -> np.ndarray:
    """3x3 binary dilation, repeated; new pixels are limited to ``fat`` when given."""
    out = np.asarray(mask, bool).copy()
    allowed = None if fat is None else np.asarray(fat, bool)
    H, W = out.shape
    for _ in range(iterations):
        grown = out.copy()
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy == 0 and dx == 0:
                    continue
                grown[max(0, dy) : H + min(0, dy), max(0, dx) : W + min(0, dx)] |= out[
                    max(0, -dy) : H + min(0, -dy), max(0, -dx) : W + min(0, -dx)
                ]
        if allowed is not None:
            grown &= allowed
        out |= grown
    return out


# --- evaluation ------------------------------------------------------------


def _confusion_from_labels(pred: np.ndarray, truth: np.ndarray) -> quantify.ConfusionMatrix:
    return quantify.confusion(pred, truth)


def evaluate(
    ds: Dataset,
    class_name: str,
    config: ForestConfig | None = None,
    mode: str = "split66",
    seed: int = 1,
    threads: int = 1,
) -> dict:
    """Hold-out metrics for one class.

    ``split66`` trains on a seeded two-thirds shuffle and tests on the rest.
    ``kfold10`` pools the confusion counts of ten seeded folds and also lists
    each fold's accuracy.
    """
    config = config or ForestConfig()
    n = len(ds)
    y = ds.labels(class_name)
    perm = np.random.default_rng(seed).permutation(n)
    if mode == "split66":
        cut = (2 * n) // 3
        if cut == 0 or cut == n:
            raise CardiacFatError(f"dataset of {n} rows is too small for a 66% split")
        train, test = perm[:cut], perm[cut:]
        forest = train_forest(ds.subset(train), class_name, config, threads)
        cm = _confusion_from_labels(forest.predict(ds.X[test]), y[test])
        report = quantify.class_report(cm)
        report["fold_accuracy"] = [report["accuracy"]]
    elif mode == "kfold10":
        if n < 10:
            raise CardiacFatError(f"10-fold cross-validation needs at least 10 rows, got {n}")
        folds = np.array_split(perm, 10)
        cm = quantify.ConfusionMatrix(0, 0, 0, 0)
        fold_acc = []
        for k, test in enumerate(folds):
            train = np.concatenate([f for j, f in enumerate(folds) if j != k])
            forest = train_forest(ds.subset(train), class_name, config, threads)
            part = _confusion_from_labels(forest.predict(ds.X[test]), y[test])
            fold_acc.append(quantify.accuracy(part))
            cm = cm + part
        report = quantify.class_report(cm)
        report["fold_accuracy"] = fold_acc
    else:
        raise CardiacFatError(f"unknown evaluation mode {mode!r}; use split66 or kfold10")
    report["mean_fold_accuracy"] = float(np.mean(report["fold_accuracy"]))
    report["mode"] = mode
    report["class"] = class_name
    return report
