import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.special import expit

from strat_tte.data import TrialDataset, expand_long, parse_dataset
from strat_tte.errors import PositivityError
from strat_tte.nuisance import (EPS_PROB, NuisanceConfig, feature_map_for,
                                fit_censoring_npmle, fit_empirical_hazard,
                                fit_forest_hazard, fit_lasso_hazard, fit_nuisances,
                                fit_pooled_logistic, fit_propensity)
from strat_tte.simulate import DgmConfig, generate_trial, preset_nuisance


def _make_ds(u, delta, arm, stratum, x=None, horizon=None):
    n = len(u)
    x = np.zeros((n, 1)) if x is None else np.asarray(x, float)
    levels = sorted(set(stratum))
    return TrialDataset(
        ids=np.array([f"i{k}" for k in range(n)]),
        x=x,
        stratum_idx=np.array([levels.index(s) for s in stratum]),
        arm=np.asarray(arm, int),
        time=np.asarray(u, int),
        event=np.asarray(delta, int),
        horizon=horizon or int(max(u)),
        covariate_names=[f"x{j + 1}" for j in range(x.shape[1])],
        stratum_levels=[str(s) for s in levels],
    )


class TestCensoringNpmle:
    def test_no_censoring(self):
        ds = _make_ds(u=[1, 2, 3, 2], delta=[1, 1, 1, 1], arm=[0, 1, 0, 1], stratum=[0, 0, 0, 0])
        model = fit_censoring_npmle(expand_long(ds), ds.horizon)
        assert np.all(model.hazard == 0.0)
        assert np.all(model.survivor() == 1.0)

    def test_hand_counted_risk_sets(self):
        # arm 0: risk sets {5, 4, 2} and censor counts {1, 0, 1}
        #   t=1: 5 at risk, 1 censored           -> p_C = 0.2
        #   t=2: 4 at risk, 0 censored, 2 events -> p_C = 0
        #   t=3: 2 at risk, 1 censored           -> p_C = 0.5
        ds = _make_ds(
            u=[1, 2, 2, 3, 3, 1, 1],
            delta=[0, 1, 1, 1, 0, 1, 1],
            arm=[0, 0, 0, 0, 0, 1, 1],
            stratum=[0] * 7,
        )
        model = fit_censoring_npmle(expand_long(ds), ds.horizon)
        np.testing.assert_allclose(model.hazard[:, 0], [0.2, 0.0, 0.5])
        surv = model.survivor()
        np.testing.assert_allclose(surv[:, 0], [1.0, 0.8, 0.8])

    def test_empty_risk_set_is_zero(self):
        ds = _make_ds(u=[1, 1, 1, 1], delta=[1, 0, 1, 0], arm=[0, 0, 1, 1],
                      stratum=[0] * 4, horizon=4)
        model = fit_censoring_npmle(expand_long(ds), ds.horizon)
        assert np.all(model.hazard[1:, :] == 0.0)

    def test_matches_direct_product_limit(self, dataset_factory):
        # the implied censoring survivor curve equals a from-scratch
        # product-limit computation on censoring events
        rng = np.random.default_rng(8)
        for _ in range(10):
            ds = dataset_factory(rng, n=40, horizon=5)
            model = fit_censoring_npmle(expand_long(ds), ds.horizon)
            surv = model.survivor()
            for a in (0, 1):
                s = 1.0
                for t in range(1, ds.horizon + 1):
                    np.testing.assert_allclose(surv[t - 1, a], s, atol=1e-12)
                    risk = ((ds.arm == a) & (ds.time >= t)).sum()
                    cens = ((ds.arm == a) & (ds.time == t) & (ds.event == 0)).sum()
                    if risk > 0:
                        s *= 1.0 - cens / risk


class TestPropensity:
    def test_intercept_only_is_cell_fraction(self):
        ds = _make_ds(u=[1] * 10, delta=[1] * 10, arm=[1, 1, 1, 0, 0, 0, 0, 0, 0, 0],
                      stratum=[0] * 10)
        model = fit_propensity(ds)
        np.testing.assert_allclose(model.predict(ds, 1), 0.3)
        np.testing.assert_allclose(model.predict(ds, 0), 0.7)

    def test_design_override(self):
        ds = _make_ds(u=[1] * 4, delta=[1] * 4, arm=[0, 1, 0, 1], stratum=[0] * 4)
        model = fit_propensity(ds, design_p=0.5)
        np.testing.assert_allclose(model.predict(ds, 1), 0.5)

    def test_single_arm_stratum_raises(self):
        ds = _make_ds(u=[1] * 4, delta=[1] * 4, arm=[1, 1, 0, 1], stratum=[0, 0, 1, 1])
        with pytest.raises(PositivityError):
            fit_propensity(ds)

    def test_covariate_model_matches_newton_oracle(self):
        rng = np.random.default_rng(3)
        n = 120
        x = rng.normal(size=(n, 2))
        arm = (rng.random(n) < expit(0.4 * x[:, 0] - 0.2 * x[:, 1])).astype(int)
        ds = _make_ds(u=[1] * n, delta=[1] * n, arm=arm, stratum=[0] * n, x=x)
        model = fit_propensity(ds, covariates=["x1", "x2"])

        design = np.column_stack([np.ones(n), x])

        def nll(b):
            eta = design @ b
            return float(np.sum(np.logaddexp(0, eta) - arm * eta))

        res = minimize(nll, np.zeros(3), method="BFGS", options={"gtol": 1e-12})
        b = res.x
        for _ in range(40):
            p = expit(design @ b)
            g = design.T @ (arm - p)
            if np.max(np.abs(g)) < 1e-12:
                break
            h = design.T @ (design * (p * (1 - p))[:, None])
            b = b + np.linalg.solve(h, g)
        np.testing.assert_allclose(model.betas[0], b, atol=1e-8)


class TestHazardModels:
    def test_empirical_matches_event_fractions(self):
        ds = _make_ds(u=[1, 2, 2, 3, 1, 3], delta=[1, 0, 1, 1, 0, 1],
                      arm=[0, 0, 0, 0, 1, 1], stratum=[0] * 6)
        model = fit_empirical_hazard(ds, expand_long(ds))
        # arm 0 risk sets: t1 {4}, t2 {3}, t3 {1}; events {1, 1, 1}
        np.testing.assert_allclose(model.table[:, 0], [0.25, 1 / 3, 1.0])
        grid = model.predict_grid(ds, 0)
        assert grid.shape == (6, 3)
        np.testing.assert_allclose(grid[0], model.table[:, 0])

    def test_model_predictions_respect_truncation(self):
        ds = generate_trial(DgmConfig(n=150, seed=5))
        pt = expand_long(ds)
        fmap = feature_map_for(ds, covariates=["x1", "x3", "x5"])
        model = fit_pooled_logistic(ds, pt, fmap)
        for a in (0, 1):
            grid = model.predict_grid(ds, a)
            assert grid.min() >= EPS_PROB
            assert grid.max() <= 1 - EPS_PROB

    def test_pooled_logistic_score_equation(self):
        ds = generate_trial(DgmConfig(n=200, seed=9))
        pt = expand_long(ds)
        fmap = feature_map_for(ds, covariates=["x1", "x2"])
        model = fit_pooled_logistic(ds, pt, fmap)
        design = fmap.build(pt.t, pt.arm, ds.x[pt.subject], pt.stratum_idx)
        resid = pt.event - expit(design @ model.beta)
        assert np.max(np.abs(design.T @ resid)) < 1e-6 * len(pt)

    def test_lasso_limits(self):
        ds = generate_trial(DgmConfig(n=150, seed=11))
        pt = expand_long(ds)
        fmap = feature_map_for(ds, covariates=["x1", "x2", "x3"])
        big = fit_lasso_hazard(ds, pt, fmap, lambda_grid=np.array([1e5]), cv_folds=0)
        penalized = fmap.penalty_mask
        assert np.all(big.beta[penalized] == 0.0)
        small = fit_lasso_hazard(ds, pt, fmap, lambda_grid=np.array([0.0]), cv_folds=0)
        mle = fit_pooled_logistic(ds, pt, fmap)
        np.testing.assert_allclose(small.beta, mle.beta, atol=1e-5)

    def test_forest_hazard_runs_and_truncates(self):
        ds = generate_trial(DgmConfig(n=120, seed=13))
        pt = expand_long(ds)
        fmap = feature_map_for(ds, covariates=["x1", "x3"], time_dummies=False,
                               intercept=False, drop_first_stratum=False)
        model = fit_forest_hazard(ds, pt, fmap, n_trees=10, min_node=5, seed=3)
        grid = model.predict_grid(ds, 1)
        assert grid.min() >= EPS_PROB and grid.max() <= 1 - EPS_PROB

    def test_deterministic_predictions(self):
        ds = generate_trial(DgmConfig(n=100, seed=21))
        pt = expand_long(ds)
        fmap = feature_map_for(ds, covariates=["x1", "x2"])
        a = fit_lasso_hazard(ds, pt, fmap, cv_folds=3, seed=5).predict_grid(ds, 1)
        b = fit_lasso_hazard(ds, pt, fmap, cv_folds=3, seed=5).predict_grid(ds, 1)
        np.testing.assert_array_equal(a, b)


class TestFeatureMap:
    def test_columns_and_penalty_mask(self):
        ds = generate_trial(DgmConfig(n=50, seed=2))
        fmap = feature_map_for(ds, covariates=["x1"], interactions=(("t", "a"),))
        # intercept, t=2..4 dummies, a, w:2..4, x1, t*a; the complete dummy
        # set spans linear time so no separate "t" column is emitted
        assert fmap.names[0] == "(intercept)"
        assert "t=2" in fmap.names and "t=4" in fmap.names
        assert "t" not in fmap.names
        assert fmap.names[-1] == "t*a"
        assert not fmap.penalty_mask[0]
        assert not fmap.penalty_mask[fmap.names.index("t=3")]
        assert fmap.penalty_mask[fmap.names.index("a")]
        assert fmap.penalty_mask[-1]
        pt = expand_long(ds)
        design = fmap.build(pt.t, pt.arm, ds.x[pt.subject], pt.stratum_idx)
        assert design.shape == (len(pt), fmap.n_columns)
        col_ta = design[:, -1]
        np.testing.assert_array_equal(col_ta, pt.t * pt.arm)

    def test_triple_interaction(self):
        ds = generate_trial(DgmConfig(n=50, seed=2))
        fmap = feature_map_for(ds, covariates=[], interactions=(("t", "a", "w:4"),))
        pt = expand_long(ds)
        design = fmap.build(pt.t, pt.arm, ds.x[pt.subject], pt.stratum_idx)
        expected = pt.t * pt.arm * (pt.stratum_idx == 3)
        np.testing.assert_array_equal(design[:, -1], expected)


class TestCrossFitting:
    def test_out_of_fold_structure(self):
        ds = generate_trial(DgmConfig(n=200, seed=31))
        cfg = NuisanceConfig(kind="pooled", covariates=["x1", "x3"])
        bundle = fit_nuisances(ds, cfg, n_folds=2, fold_seed=7)
        assert bundle.n_folds == 2
        assert set(np.unique(bundle.fold_index)) == {0, 1}
        grid = bundle.hazard_grid(ds, 1)
        assert grid.shape == (ds.n, ds.horizon)
        assert np.all((grid > 0) & (grid < 1))

    @pytest.mark.slow
    def test_lasso_selects_signal_covariates(self):
        # the generating hazard carries signal on x1, x3, x5; the selected
        # active set must contain all three in at least 90% of replications
        hits = 0
        n_reps = 100
        for rep in range(n_reps):
            ds = generate_trial(DgmConfig(n=1000, seed=10_000 + rep))
            cfg = preset_nuisance("all", "lasso", seed=rep)
            bundle = fit_nuisances(ds, cfg, n_folds=1)
            chosen = set(bundle.hazard_models[0].selected_covariates())
            if {"x1", "x3", "x5"} <= chosen:
                hits += 1
        assert hits >= 0.9 * n_reps, f"signal recovered in only {hits}/{n_reps}"
