"""AIPW and TMLE for the average treatment effect of a scalar outcome under
stratified randomization, with difference-of-means and ANCOVA baselines.

The stratified variance subtracts a between-stratum variance of stratum-arm
residual means from the usual E_n[psi^2]; the subtraction is a scaled
variance, so the ordering v_stratified <= v_simple holds on every dataset.
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit, logit, ndtr, ndtri
from scipy.stats import norm

from .data import SchemaConfig, assign_folds
from .errors import DataValidationError, PositivityError, SchemaError
from .forest import fit_forest
from .logistic import fit_lasso_linear
from .nuisance import fit_propensity
from .tmle import VARIANCE_FLOOR, between_stratum_correction, solve_fluctuation


@dataclass
class MeanTrialDataset:
    ids: np.ndarray
    x: np.ndarray
    stratum_idx: np.ndarray
    arm: np.ndarray
    y: np.ndarray
    covariate_names: list[str]
    stratum_levels: list[str]

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def n_strata(self) -> int:
        return len(self.stratum_levels)

    def check(self):
        if not np.all(np.isfinite(self.y)):
            raise DataValidationError("outcome contains non-finite values")
        for k, w in enumerate(self.stratum_levels):
            in_w = self.stratum_idx == k
            for a in (0, 1):
                if not np.any(in_w & (self.arm == a)):
                    raise PositivityError(f"stratum '{w}' has no subjects in arm {a}")


def parse_mean_dataset(csv_bytes: bytes, schema: SchemaConfig | None = None,
                       outcome_col: str = "y") -> MeanTrialDataset:
    """Same CSV schema as the survival dataset minus (time, event), plus a
    real outcome column."""
    schema = schema or SchemaConfig()
    text = csv_bytes.decode("utf-8") if isinstance(csv_bytes, (bytes, bytearray)) else str(csv_bytes)
    if not text.strip():
        raise SchemaError("empty CSV input")
    df = pd.read_csv(io.StringIO(text), dtype={schema.id: str, schema.stratum: str})
    required = [schema.id, schema.stratum, schema.arm, outcome_col]
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise SchemaError(f"missing required columns: {missing}")
    arm = pd.to_numeric(df[schema.arm], errors="coerce")
    if arm.isna().any() or not set(arm.unique()) <= {0, 1}:
        raise DataValidationError(f"column '{schema.arm}' must be binary")
    y = pd.to_numeric(df[outcome_col], errors="coerce")
    if y.isna().any():
        raise DataValidationError(f"missing or non-numeric outcome '{outcome_col}'")
    if schema.covariates is None:
        cov_names = [c for c in df.columns if c not in required]
    else:
        cov_names = list(schema.covariates)
        absent = [c for c in cov_names if c not in df.columns]
        if absent:
            raise SchemaError(f"missing covariate columns: {absent}")
    x = np.empty((df.shape[0], len(cov_names)))
    for k, c in enumerate(cov_names):
        vals = pd.to_numeric(df[c], errors="coerce")
        if vals.isna().any():
            raise DataValidationError(f"missing or non-numeric covariate '{c}'")
        x[:, k] = vals.to_numpy(dtype=float)
    stratum_raw = df[schema.stratum].astype(str).to_numpy()
    levels = list(dict.fromkeys(stratum_raw))
    level_of = {w: k for k, w in enumerate(levels)}
    ds = MeanTrialDataset(
        ids=df[schema.id].to_numpy(dtype=str),
        x=x,
        stratum_idx=np.array([level_of[w] for w in stratum_raw], dtype=int),
        arm=arm.to_numpy(dtype=int),
        y=y.to_numpy(dtype=float),
        covariate_names=cov_names,
        stratum_levels=levels,
    )
    ds.check()
    return ds


@dataclass
class AteResult:
    estimate: float
    variance_simple: float
    variance_stratified: float
    correction: float
    ci_low: float
    ci_high: float
    p_value: float
    method: str
    flavor: str = "stratified"
    metadata: dict = field(default_factory=dict)


def _result(estimate, v_simple, correction, n, method, alpha, flavor, metadata=None):
    v_strat = v_simple - correction
    if v_strat < VARIANCE_FLOOR:
        warnings.warn(f"stratified variance floored at {VARIANCE_FLOOR:g}", stacklevel=3)
        v_strat = VARIANCE_FLOOR
    v_used = v_strat if flavor == "stratified" else v_simple
    se = float(np.sqrt(v_used / n)) if v_used > 0 else 0.0
    z = ndtri(1.0 - alpha / 2.0)
    p_value = float(2.0 * (1.0 - ndtr(abs(estimate) / se))) if se > 0 else (1.0 if estimate == 0 else 0.0)
    return AteResult(
        estimate=float(estimate),
        variance_simple=float(v_simple),
        variance_stratified=float(v_strat),
        correction=float(correction),
        ci_low=float(estimate - z * se),
        ci_high=float(estimate + z * se),
        p_value=p_value,
        method=method,
        flavor=flavor,
        metadata=metadata or {},
    )


def _fit_outcome_models(ds: MeanTrialDataset, model: str, n_folds: int, seed: int):
    """Out-of-fold predictions hhat_a(X_i) for both arms.

    model: 'ols' | 'lasso' | 'forest' | 'zero' | 'strata' (saturated stratum
    means, used by tests to reproduce the stratified difference of means).
    """
    n = ds.n
    preds = {0: np.zeros(n), 1: np.zeros(n)}
    if model == "zero":
        return preds
    if n_folds <= 1:
        fold_index = np.zeros(n, dtype=int)
    else:
        fold_index = assign_folds(ds, n_folds, seed).fold_index(ds)
    for j in np.unique(fold_index):
        test = fold_index == j if n_folds > 1 else np.ones(n, dtype=bool)
        train = ~test if n_folds > 1 else np.ones(n, dtype=bool)
        for a in (0, 1):
            rows = train & (ds.arm == a)
            if rows.sum() < 2:
                raise PositivityError(f"fewer than 2 training subjects in arm {a}")
            if model == "strata":
                vals = np.zeros(n)
                for k in range(ds.n_strata):
                    sel = rows & (ds.stratum_idx == k)
                    if not sel.any():
                        raise PositivityError(f"no arm-{a} training subjects in stratum {k}")
                    vals[ds.stratum_idx == k] = ds.y[sel].mean()
                preds[a][test] = vals[test]
            elif model == "ols":
                design = np.column_stack([np.ones(rows.sum()), ds.x[rows]])
                beta, *_ = np.linalg.lstsq(design, ds.y[rows], rcond=None)
                full = np.column_stack([np.ones(n), ds.x])
                preds[a][test] = (full @ beta)[test]
            elif model == "lasso":
                mu = ds.x[rows].mean(axis=0)
                sd = ds.x[rows].std(axis=0)
                sd = np.where(sd > 0, sd, 1.0)
                xs = np.column_stack([np.ones(rows.sum()), (ds.x[rows] - mu) / sd])
                mask = np.array([False] + [True] * ds.x.shape[1])
                sub_folds = np.arange(rows.sum()) % 5
                res = fit_lasso_linear(xs, ds.y[rows], mask, fold_index=sub_folds)
                full = np.column_stack([np.ones(n), (ds.x - mu) / sd])
                preds[a][test] = (full @ res.beta)[test]
            elif model == "forest":
                forest = fit_forest(ds.x[rows], ds.y[rows], n_trees=200, min_leaf=10,
                                    subsample=0.8, seed=seed + a)
                preds[a][test] = forest.predict(ds.x[test])
            else:
                raise ValueError(f"unknown outcome model '{model}'")
    return preds


def _propensity_vector(ds: MeanTrialDataset, spec, design_p):
    """P(A=1|X) under the requested propensity specification."""
    if design_p is not None:
        return np.full(ds.n, float(design_p))
    covs = None
    if spec == "covariates":
        covs = ds.covariate_names
    model = fit_propensity(ds, covariates=covs)
    return model.predict(ds, 1)


def _aipw_components(ds, preds, p1):
    a = ds.arm
    p0 = 1.0 - p1
    c1 = a / p1 * (ds.y - preds[1]) + preds[1]
    c0 = (1 - a) / p0 * (ds.y - preds[0]) + preds[0]
    theta = float(np.mean(c1) - np.mean(c0))
    psi = (c1 - c0) - theta
    return theta, psi


def _stratified_variance(ds, psi, resid1, resid0, p_corr):
    v_simple = float(np.mean(psi**2))
    correction = between_stratum_correction(
        ds.stratum_idx, ds.arm, ds.n_strata, p_corr, {1: resid1, 0: -resid0}
    )
    return v_simple, correction


def aipw_ate(ds: MeanTrialDataset, outcome_model: str = "ols", n_folds: int = 1,
             seed: int = 0, propensity: str = "strata", design_p: float | None = None,
             alpha: float = 0.05, flavor: str = "stratified") -> AteResult:
    """Augmented inverse-probability-weighted ATE.

    ``propensity``: 'strata' = within-stratum empirical arm fraction,
    'covariates' = per-stratum logistic in all covariates (a deliberately
    overparameterized choice used to study propensity misspecification);
    ``design_p`` overrides with the known randomization probability.
    """
    ds.check()
    preds = _fit_outcome_models(ds, outcome_model, n_folds, seed)
    p1 = _propensity_vector(ds, propensity, design_p)
    theta, psi = _aipw_components(ds, preds, p1)
    p_corr = design_p if design_p is not None else float(np.mean(ds.arm))
    v_simple, correction = _stratified_variance(ds, psi, ds.y - preds[1], ds.y - preds[0], p_corr)
    meta = {"outcome_model": outcome_model, "folds": n_folds, "propensity": propensity,
            "eif_mean": float(np.mean(psi)),
            "misspec_term_omitted": propensity == "covariates"}
    return _result(theta, v_simple, correction, ds.n, "aipw", alpha, flavor, meta)


def tmle_ate(ds: MeanTrialDataset, outcome_model: str = "ols", n_folds: int = 1,
             seed: int = 0, propensity: str = "strata", design_p: float | None = None,
             alpha: float = 0.05, flavor: str = "stratified") -> AteResult:
    """Targeted ATE: outcomes are min-max rescaled into [0.005, 0.995], each
    arm's prediction is fluctuated along the clever covariate 1{A=a}/p_a, and
    the fluctuated plug-in contrast is back-transformed."""
    ds.check()
    preds = _fit_outcome_models(ds, outcome_model, n_folds, seed)
    p1 = _propensity_vector(ds, propensity, design_p)
    y_min, y_max = float(ds.y.min()), float(ds.y.max())
    span = y_max - y_min
    if span < 1e-12:
        meta = {"outcome_model": outcome_model, "degenerate_outcome": True}
        return _result(0.0, 0.0, 0.0, ds.n, "tmle", alpha, flavor, meta)

    def scale(v):
        return 0.005 + 0.99 * (v - y_min) / span

    def unscale(v):
        return y_min + (v - 0.005) * span / 0.99

    ys = scale(ds.y)
    epsilons = {}
    updated = {}
    for a in (0, 1):
        pa = p1 if a == 1 else 1.0 - p1
        hs = np.clip(scale(preds[a]), 1e-4, 1.0 - 1e-4)
        clever = (ds.arm == a) / pa
        rows = ds.arm == a
        eps = solve_fluctuation(logit(hs[rows]), clever[rows], ys[rows])
        epsilons[a] = eps
        updated[a] = unscale(expit(logit(hs) + eps / pa))

    theta, psi = _aipw_components(ds, updated, p1)
    p_corr = design_p if design_p is not None else float(np.mean(ds.arm))
    v_simple, correction = _stratified_variance(
        ds, psi, ds.y - updated[1], ds.y - updated[0], p_corr
    )
    meta = {"outcome_model": outcome_model, "folds": n_folds, "propensity": propensity,
            "epsilons": epsilons, "eif_mean": float(np.mean(psi)),
            "outcome_scaling": [y_min, y_max]}
    return _result(theta, v_simple, correction, ds.n, "tmle", alpha, flavor, meta)


def baselines(ds: MeanTrialDataset, which: str, alpha: float = 0.05) -> AteResult:
    """Unadjusted and ANCOVA comparators.

    'dom' = difference of arm means with the two-sample variance;
    'ancova-full' = OLS on [1, A, X]; 'ancova-strata' = OLS on
    [1, A, stratum dummies]. ANCOVA variances are HC0 sandwich estimates.
    No stratification correction applies (stratified = simple).
    """
    ds.check()
    a = ds.arm
    n = ds.n
    if which == "dom":
        y1, y0 = ds.y[a == 1], ds.y[a == 0]
        est = float(y1.mean() - y0.mean())
        var1 = float(y1.var(ddof=1)) if len(y1) > 1 else 0.0
        var0 = float(y0.var(ddof=1)) if len(y0) > 1 else 0.0
        se2 = var1 / len(y1) + var0 / len(y0)
        v = n * se2
        return _result(est, v, 0.0, n, "dom", alpha, "simple", {"which": which})
    if which == "ancova-full":
        design = np.column_stack([np.ones(n), a, ds.x])
    elif which == "ancova-strata":
        dummies = np.zeros((n, ds.n_strata - 1))
        for k in range(1, ds.n_strata):
            dummies[:, k - 1] = ds.stratum_idx == k
        design = np.column_stack([np.ones(n), a, dummies])
    else:
        raise ValueError(f"unknown baseline '{which}'")
    r = np.linalg.matrix_rank(design)
    if r < design.shape[1]:
        from .errors import FitError
        raise FitError(f"ANCOVA design is rank deficient (rank {r} < {design.shape[1]})")
    beta, *_ = np.linalg.lstsq(design, ds.y, rcond=None)
    resid = ds.y - design @ beta
    bread = np.linalg.inv(design.T @ design)
    meat = design.T @ (design * resid[:, None] ** 2)
    cov = bread @ meat @ bread
    est = float(beta[1])
    v = float(n * cov[1, 1])
    return _result(est, v, 0.0, n, which, alpha, "simple", {"which": which})


# ---------------------------------------------------------------------------
# Linear outcome generator for the mean-outcome study

@dataclass
class MeanDgmConfig:
    n: int
    d: int = 10
    beta_a: float = 1.0
    snr: float = 3.0
    sigma_eps: float = 1.0
    seed: int = 0
    p: float = 0.5
    randomization: str = "stratified-balanced"


def generate_mean_trial(cfg: MeanDgmConfig) -> MeanTrialDataset:
    """Linear outcome Y = X beta0 + A beta_a + eps with X ~ N(1, I_d).

    The stratum is the quartile bin of the first covariate (so W is a
    function of X and the within-stratum outcome means differ), with four
    equally likely levels. beta0 is constant across coordinates and scaled
    so Var(X beta0) / Var(eps) equals the configured signal-to-noise ratio.
    """
    rng = np.random.default_rng(cfg.seed)
    x = rng.normal(1.0, 1.0, size=(cfg.n, cfg.d))
    cuts = norm.ppf([0.25, 0.5, 0.75], loc=1.0, scale=1.0)
    stratum_idx = np.searchsorted(cuts, x[:, 0])
    beta0 = np.full(cfg.d, np.sqrt(cfg.snr / cfg.d) * cfg.sigma_eps)
    if cfg.randomization == "simple-bernoulli":
        arm = (rng.random(cfg.n) < cfg.p).astype(int)
    else:
        arm = np.zeros(cfg.n, dtype=int)
        for k in range(4):
            members = np.flatnonzero(stratum_idx == k)
            n_treat = len(members) // 2 if cfg.p == 0.5 else int(round(len(members) * cfg.p))
            arm[rng.permutation(members)[:n_treat]] = 1
    y = x @ beta0 + cfg.beta_a * arm + rng.normal(0.0, cfg.sigma_eps, cfg.n)
    ds = MeanTrialDataset(
        ids=np.array([f"m{i:06d}" for i in range(cfg.n)]),
        x=x,
        stratum_idx=stratum_idx.astype(int),
        arm=arm,
        y=y,
        covariate_names=[f"x{j}" for j in range(1, cfg.d + 1)],
        stratum_levels=["q1", "q2", "q3", "q4"],
    )
    ds.check()
    return ds
