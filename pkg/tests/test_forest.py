import numpy as np
import pytest

from strat_tte.forest import fit_forest


def oracle_tree_predict(x_train, y_train, x_query, min_leaf):
    """Independently coded exhaustive-split CART: every feature, every
    midpoint between distinct sorted values, summed-child-SSE criterion,
    strict improvement, ties to the first feature then lowest threshold."""

    def sse(v):
        # sum y^2 - (sum y)^2 / n: exact in floats for 0/1 responses, so
        # score ties resolve identically to the library's cumulative-sum scan
        if len(v) == 0:
            return 0.0
        return float(np.sum(v * v)) - float(np.sum(v)) ** 2 / len(v)

    def grow(idx):
        y_node = y_train[idx]
        node = {"value": float(y_node.mean()), "feature": None}
        if len(idx) < 2 * min_leaf or np.all(y_node == y_node[0]):
            return node
        best = (np.inf, None, None)
        for j in range(x_train.shape[1]):
            xs = np.sort(np.unique(x_train[idx, j]))
            for lo, hi in zip(xs[:-1], xs[1:]):
                thr = 0.5 * (lo + hi)
                left = x_train[idx, j] <= thr
                if left.sum() < min_leaf or (~left).sum() < min_leaf:
                    continue
                score = sse(y_node[left]) + sse(y_node[~left])
                if score < best[0]:
                    best = (score, j, thr)
        if best[1] is None:
            return node
        _, j, thr = best
        left = x_train[idx, j] <= thr
        node.update(feature=j, threshold=thr,
                    left=grow(idx[left]), right=grow(idx[~left]))
        return node

    root = grow(np.arange(len(y_train)))

    def walk(node, row):
        while node["feature"] is not None:
            node = node["left"] if row[node["feature"]] <= node["threshold"] else node["right"]
        return node["value"]

    return np.array([walk(root, row) for row in x_query])


class TestForest:
    def test_constant_covariate_predicts_overall_fraction(self):
        rng = np.random.default_rng(0)
        x = np.ones((40, 1))
        y = (rng.random(40) < 0.3).astype(float)
        forest = fit_forest(x, y, n_trees=5, min_leaf=1, subsample=1.0, seed=1)
        np.testing.assert_allclose(forest.predict(x), y.mean(), atol=1e-12)

    def test_pure_partition_gives_pure_leaves(self):
        x = np.linspace(0, 1, 30).reshape(-1, 1)
        y = (x[:, 0] > 0.5).astype(float)
        forest = fit_forest(x, y, n_trees=1, min_leaf=1, subsample=1.0, seed=0)
        preds = forest.predict(x)
        assert set(np.round(preds, 12)) == {0.0, 1.0}
        np.testing.assert_array_equal(preds, y)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_single_tree_matches_exhaustive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = 50
        x = rng.normal(size=(n, 3))
        y = ((x[:, 0] + 0.5 * x[:, 1] + rng.normal(scale=0.5, size=n)) > 0).astype(float)
        for min_leaf in (1, 5):
            forest = fit_forest(x, y, n_trees=1, mtry=3, min_leaf=min_leaf,
                                subsample=1.0, seed=seed)
            got = forest.predict(x)
            want = oracle_tree_predict(x, y, x, min_leaf)
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_bad_tree_count(self):
        with pytest.raises(ValueError):
            fit_forest(np.ones((10, 1)), np.zeros(10), n_trees=0)

    def test_deterministic_per_seed(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(80, 4))
        y = (rng.random(80) < 0.4).astype(float)
        f1 = fit_forest(x, y, n_trees=20, min_leaf=5, seed=42)
        f2 = fit_forest(x, y, n_trees=20, min_leaf=5, seed=42)
        np.testing.assert_array_equal(f1.predict(x), f2.predict(x))
        f3 = fit_forest(x, y, n_trees=20, min_leaf=5, seed=43)
        assert not np.array_equal(f1.predict(x), f3.predict(x))

    def test_regression_targets(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(200, 3))
        y = 2.0 * x[:, 0] + rng.normal(scale=0.3, size=200)
        forest = fit_forest(x, y, n_trees=50, min_leaf=5, seed=7)
        resid = y - forest.predict(x)
        assert np.mean(resid**2) < np.var(y) * 0.5
