"""
Random forest of Gini decision trees over dense numpy features.

Trees are stored as flat arrays (feature, threshold, left, right, value) so
prediction walks every row in lockstep and the model serialises to JSON.
"""
import logging
from dataclasses import dataclass
from typing import List, Mapping

import numpy as np

from .exceptions import TrainingError

logger = logging.getLogger(__name__)

LEAF = -1


@dataclass
class TreeArrays:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row."""
        nodes = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            feature = self.feature[nodes]
            active = feature != LEAF
            if not active.any():
                return nodes
            go_left = X[rows[active], feature[active]] <= self.threshold[nodes[active]]
            nodes[active] = np.where(go_left, self.left[nodes[active]], self.right[nodes[active]])

    def vote(self, X: np.ndarray) -> np.ndarray:
        # argmax keeps the lowest label on ties
        return np.argmax(self.value[self.apply(X)], axis=1)

    def to_dict(self) -> dict:
        return {
            'feature': self.feature.tolist(),
            'threshold': self.threshold.tolist(),
            'left': self.left.tolist(),
            'right': self.right.tolist(),
            'value': self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> 'TreeArrays':
        return cls(
            feature=np.asarray(data['feature'], dtype=np.int64),
            threshold=np.asarray(data['threshold'], dtype=np.float64),
            left=np.asarray(data['left'], dtype=np.int64),
            right=np.asarray(data['right'], dtype=np.int64),
            value=np.asarray(data['value'], dtype=np.float64),
        )


def gini(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts / total
    return float(1.0 - np.sum(p * p))


def _best_split(X, y, indices, features, n_classes, min_leaf):
    n = len(indices)
    labels = y[indices]
    total = np.bincount(labels, minlength=n_classes).astype(np.float64)
    best_cost, best_feature, best_threshold = np.inf, None, None
    n_left = np.arange(1, n, dtype=np.float64)
    n_right = n - n_left
    size_ok = (n_left >= min_leaf) & (n_right >= min_leaf)
    eye = np.eye(n_classes)
    for feature in features:
        values = X[indices, feature]
        order = np.argsort(values, kind='mergesort')
        ordered = values[order]
        valid = size_ok & (ordered[1:] > ordered[:-1])
        if not valid.any():
            continue
        left_counts = np.cumsum(eye[labels[order]], axis=0)[:-1]
        right_counts = total - left_counts
        gini_left = 1.0 - np.sum((left_counts / n_left[:, None]) ** 2, axis=1)
        gini_right = 1.0 - np.sum((right_counts / n_right[:, None]) ** 2, axis=1)
        cost = (n_left * gini_left + n_right * gini_right) / n
        cost[~valid] = np.inf
        position = int(np.argmin(cost))
        if cost[position] < best_cost:
            best_cost = float(cost[position])
            best_feature = int(feature)
            best_threshold = float((ordered[position] + ordered[position + 1]) / 2.0)
    return best_cost, best_feature, best_threshold


def grow_tree(X: np.ndarray, y: np.ndarray, n_classes: int, max_depth: int, max_features: int,
              min_leaf: int, rng) -> TreeArrays:
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(indices):
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        value.append(np.bincount(y[indices], minlength=n_classes).astype(np.float64))
        return len(feature) - 1

    root = new_node(np.arange(len(y)))
    stack = [(root, np.arange(len(y)), 0)]
    while stack:
        node, indices, depth = stack.pop()
        counts = value[node]
        impurity = gini(counts)
        if depth >= max_depth or impurity == 0.0 or len(indices) < 2 * min_leaf:
            continue
        candidates = rng.choice(X.shape[1], size=max_features, replace=False)
        cost, split_feature, split_threshold = _best_split(X, y, indices, candidates, n_classes, min_leaf)
        if split_feature is None or cost >= impurity - 1e-12:
            continue
        goes_left = X[indices, split_feature] <= split_threshold
        left_node = new_node(indices[goes_left])
        right_node = new_node(indices[~goes_left])
        feature[node] = split_feature
        threshold[node] = split_threshold
        left[node] = left_node
        right[node] = right_node
        stack.append((right_node, indices[~goes_left], depth + 1))
        stack.append((left_node, indices[goes_left], depth + 1))

    counts = np.vstack(value)
    return TreeArrays(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=counts / counts.sum(axis=1, keepdims=True),
    )


def resolve_max_features(max_features, n_features: int) -> int:
    if max_features == 'sqrt':
        return max(1, int(np.sqrt(n_features)))
    if max_features == 'log2':
        return max(1, int(np.log2(n_features)))
    if max_features is None or max_features == 'all':
        return n_features
    return max(1, min(int(max_features), n_features))


class RandomForest:
    """Bagged Gini trees; each tree owns a child SeedSequence of the forest seed."""

    def __init__(self, n_trees: int = 100, max_depth: int = 12, max_features='sqrt',
                 min_samples_leaf: int = 1, bootstrap: bool = True, seed: int = 0):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.max_features = max_features
        self.min_samples_leaf = min_samples_leaf
        self.bootstrap = bootstrap
        self.seed = seed
        self.n_classes = 0
        self.trees: List[TreeArrays] = []

    def fit(self, X: np.ndarray, y: np.ndarray) -> 'RandomForest':
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if len(np.unique(y)) < 2:
            raise TrainingError("training data contains a single class", classes=np.unique(y).tolist())
        self.n_classes = int(y.max()) + 1
        max_features = resolve_max_features(self.max_features, X.shape[1])
        self.trees = []
        for child in np.random.SeedSequence(self.seed).spawn(self.n_trees):
            rng = np.random.default_rng(child)
            rows = rng.integers(0, len(y), len(y)) if self.bootstrap else np.arange(len(y))
            self.trees.append(grow_tree(
                X[rows], y[rows], self.n_classes, self.max_depth, max_features, self.min_samples_leaf, rng,
            ))
        logger.debug(f"grew {self.n_trees} trees over {X.shape[0]} rows x {X.shape[1]} features")
        return self

    def votes(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        tally = np.zeros((X.shape[0], self.n_classes), dtype=np.int64)
        rows = np.arange(X.shape[0])
        for tree in self.trees:
            np.add.at(tally, (rows, tree.vote(X)), 1)
        return tally

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.votes(X), axis=1)

    def to_dict(self) -> dict:
        return {
            'n_trees': self.n_trees,
            'max_depth': self.max_depth,
            'max_features': self.max_features,
            'min_samples_leaf': self.min_samples_leaf,
            'bootstrap': self.bootstrap,
            'seed': self.seed,
            'n_classes': self.n_classes,
            'trees': [tree.to_dict() for tree in self.trees],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> 'RandomForest':
        forest = cls(
            n_trees=data['n_trees'],
            max_depth=data['max_depth'],
            max_features=data['max_features'],
            min_samples_leaf=data['min_samples_leaf'],
            bootstrap=data['bootstrap'],
            seed=data['seed'],
        )
        forest.n_classes = data['n_classes']
        forest.trees = [TreeArrays.from_dict(tree) for tree in data['trees']]
        return forest
