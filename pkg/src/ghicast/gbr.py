"""Gradient-boosted regression trees for squared loss.

Trees are grown by exact greedy search over midpoints between sorted unique
feature values. Training rows are put in a canonical order first, so the
fitted model does not depend on how the rows were supplied.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class GbrConfig:
    n_trees: int = 500
    max_depth: int = 3
    learning_rate: float = 0.1
    min_leaf: int = 5
    subsample: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 0 or self.max_depth < 0 or self.min_leaf < 1:
            raise ValueError("n_trees and max_depth must be >= 0, min_leaf >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if not 0 < self.subsample <= 1:
            raise ValueError("subsample must lie in (0, 1]")


@dataclass(frozen=True)
class Tree:
    """Flat binary tree; ``feature[i] < 0`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray

    def predict(self, X):
        node = np.zeros(len(X), dtype=int)
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return self.value[node]
            rows = np.flatnonzero(inner)
            go_left = X[rows, f[rows]] <= self.threshold[node[rows]]
            node[rows] = np.where(go_left, self.left[node[rows]], self.right[node[rows]])

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "value", "gain")}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["feature"], int), np.array(d["threshold"], float), np.array(d["left"], int),
                   np.array(d["right"], int), np.array(d["value"], float), np.array(d["gain"], float))


@dataclass(frozen=True)
class GbrModel:
    trees: tuple
    learning_rate: float
    init_value: float
    n_features: int
    config: GbrConfig
    train_loss: tuple = ()
    card: dict = field(default_factory=dict)

    def predict(self, X):
        X = np.asarray(X, float)
        if X.ndim == 1:
            X = X.reshape(-1, self.n_features) if X.size else X.reshape(0, self.n_features)
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} columns, got {X.shape[1]}")
        out = np.full(len(X), self.init_value)
        for t in self.trees:
            out += self.learning_rate * t.predict(X)
        return out


def _best_split(X, r, rows, orders, min_leaf):
    """Best (gain, feature, threshold, left_rows, right_rows) for one node, or None."""
    n = len(rows)
    if n < 2 * min_leaf:
        return None
    in_node = np.zeros(len(r), bool)
    in_node[rows] = True
    total = r[rows].sum()
    base = total * total / n
    best = None
    for j, order in enumerate(orders):
        idx = order[in_node[order]]
        x = X[idx, j]
        cs = np.cumsum(r[idx])
        nl = np.arange(1, n)
        ok = (x[1:] > x[:-1]) & (nl >= min_leaf) & (n - nl >= min_leaf)
        if not ok.any():
            continue
        sl = cs[:-1]
        gain = sl * sl / nl + (total - sl) ** 2 / (n - nl) - base
        gain = np.where(ok, gain, -np.inf)
        k = int(np.argmax(gain))
        g = gain[k]
        if best is None or g > best[0]:
            thr = 0.5 * (x[k] + x[k + 1])
            if not x[k] < thr:   # midpoint rounded onto the left value
                thr = x[k]
            best = (float(g), j, float(thr), idx[: k + 1], idx[k + 1:])
    if best is None or not best[0] > 1e-12 * max(1.0, float(r[rows] @ r[rows])):
        return None
    return best


def _grow(X, r, rows, orders, cfg):
    feature, threshold, left, right, value, gain = [], [], [], [], [], []

    def node(rows, depth):
        i = len(feature)
        for lst, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1),
                       (value, float(r[rows].mean())), (gain, 0.0)):
            lst.append(v)
        if depth >= cfg.max_depth:
            return i
        split = _best_split(X, r, rows, orders, cfg.min_leaf)
        if split is None:
            return i
        g, j, thr, lrows, rrows = split
        feature[i], threshold[i], gain[i] = j, thr, g
        left[i] = node(np.sort(lrows), depth + 1)
        right[i] = node(np.sort(rrows), depth + 1)
        return i

    node(rows, 0)
    return Tree(np.array(feature), np.array(threshold), np.array(left), np.array(right),
                np.array(value), np.array(gain))


def _canonical(X, y):
    keys = [y] + [X[:, j] for j in range(X.shape[1] - 1, -1, -1)]
    order = np.lexsort(keys)
    return X[order], y[order]


def fit(X, y, cfg: GbrConfig = GbrConfig()) -> GbrModel:
    X = np.asarray(X, float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, float)
    n, d = X.shape
    if n < 2 * cfg.min_leaf:
        raise ValueError(f"need at least {2 * cfg.min_leaf} rows for min_leaf={cfg.min_leaf}")
    X, y = _canonical(X, y)
    init = math.fsum(y) / n
    F = np.full(n, init)
    losses = [float(np.mean((y - F) ** 2))]
    trees = []
    orders = [np.argsort(X[:, j], kind="stable") for j in range(d)]
    rng = np.random.default_rng(cfg.seed)
    if cfg.max_depth > 0:
        for _ in range(cfg.n_trees):
            r = y - F
            if cfg.subsample < 1:
                rows = np.sort(rng.choice(n, max(2 * cfg.min_leaf, int(cfg.subsample * n)), replace=False))
            else:
                rows = np.arange(n)
            tree = _grow(X, r, rows, orders, cfg)
            if (tree.feature < 0).all():
                break
            trees.append(tree)
            F = F + cfg.learning_rate * tree.predict(X)
            losses.append(float(np.mean((y - F) ** 2)))
    if not trees and np.ptp(y) > 0 and cfg.max_depth > 0 and cfg.n_trees > 0:
        logger.warning("no informative split found; model is the constant mean")
    return GbrModel(tuple(trees), cfg.learning_rate, init, d, cfg, tuple(losses),
                    {"n_train": n, "n_trees_built": len(trees)})


def predict(model: GbrModel, X):
    return model.predict(X)


def importance(model: GbrModel) -> np.ndarray:
    """Share of total squared-error reduction attributed to each feature."""
    scores = np.zeros(model.n_features)
    for t in model.trees:
        inner = t.feature >= 0
        np.add.at(scores, t.feature[inner], t.gain[inner])
    if scores.sum() <= 0:
        logger.warning("model has no splits; importance is uniform")
        return np.full(model.n_features, 1.0 / model.n_features)
    return scores / scores.sum()


def save_model(model: GbrModel, path) -> Path:
    path = Path(path)
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "gbr",
        "init_value": model.init_value,
        "learning_rate": model.learning_rate,
        "n_features": model.n_features,
        "config": model.config.__dict__,
        "train_loss": list(model.train_loss),
        "card": model.card,
        "trees": [t.to_dict() for t in model.trees],
    }
    path.write_text(json.dumps(doc, sort_keys=True))
    return path


def load_model(path) -> GbrModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != FORMAT_VERSION or doc.get("kind") != "gbr":
        raise ValueError(f"unsupported model file: {doc.get('kind')} v{doc.get('format_version')}")
    return GbrModel(tuple(Tree.from_dict(t) for t in doc["trees"]), doc["learning_rate"], doc["init_value"],
                    doc["n_features"], GbrConfig(**doc["config"]), tuple(doc["train_loss"]), doc["card"])
