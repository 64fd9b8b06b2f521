"""Probability forest built from CART-style trees.

Trees split on the summed-child-SSE criterion, which for 0/1 responses is
the Gini impurity criterion up to a constant factor, so the same machinery
serves both the hazard classifier and the mean-outcome regressor. Leaf
predictions are response means; forest predictions average the trees.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels


@dataclass
class _Tree:
    # flat array representation: node i splits on feature[i] at threshold[i];
    # children in left/right; leaves have feature[i] == -1 and value[i] set
    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)

    def add_node(self):
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        return len(self.feature) - 1

    def predict(self, x):
        feature = np.asarray(self.feature)
        threshold = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        value = np.asarray(self.value)
        out = np.empty(x.shape[0])
        for i in range(x.shape[0]):
            node = 0
            while feature[node] >= 0:
                node = left[node] if x[i, feature[node]] <= threshold[node] else right[node]
            out[i] = value[node]
        return out


def _grow_tree(x, y, min_leaf, mtry, rng):
    n, p = x.shape
    tree = _Tree()

    def build(idx):
        node = tree.add_node()
        y_node = y[idx]
        tree.value[node] = float(y_node.mean())
        if len(idx) < 2 * min_leaf or np.all(y_node == y_node[0]):
            return node
        feats = np.sort(rng.choice(p, size=min(mtry, p), replace=False))
        xsub = np.ascontiguousarray(x[np.ix_(idx, feats)])
        j, thresh, _score = kernels.best_split_node(xsub, np.ascontiguousarray(y_node), min_leaf)
        if j < 0:
            return node
        feat = int(feats[j])
        go_left = x[idx, feat] <= thresh
        tree.feature[node] = feat
        tree.threshold[node] = float(thresh)
        tree.left[node] = build(idx[go_left])
        tree.right[node] = build(idx[~go_left])
        return node

    build(np.arange(n))
    return tree


@dataclass
class Forest:
    trees: list[_Tree]
    n_features: int

    def predict(self, x):
        x = np.asarray(x, dtype=float)
        acc = np.zeros(x.shape[0])
        for tree in self.trees:
            acc += tree.predict(x)
        return acc / len(self.trees)


def fit_forest(x, y, n_trees=200, mtry=None, min_leaf=10, subsample=0.8, seed=0):
    """Fit a forest of CART trees.

    Each tree sees a subsample drawn WITHOUT replacement and its own RNG
    stream spawned from ``seed``, so tree t is reproducible in isolation
    and fitting parallelizes without changing results.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = x.shape
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    if mtry is None:
        mtry = int(np.ceil(np.sqrt(p)))
    n_sub = max(2 * min_leaf, int(round(subsample * n)))
    n_sub = min(n_sub, n)

    streams = np.random.SeedSequence(seed).spawn(n_trees)
    trees = []
    for ss in streams:
        rng = np.random.default_rng(ss)
        rows = rng.choice(n, size=n_sub, replace=False) if n_sub < n else np.arange(n)
        trees.append(_grow_tree(x[rows], y[rows], min_leaf, mtry, rng))
    return Forest(trees=trees, n_features=p)
