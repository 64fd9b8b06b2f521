"""Nuisance estimators: conditional discrete hazard (pooled logistic, lasso,
random forest, or saturated empirical), per-arm censoring NPMLE, and
stratum-wise propensity.

All model-based hazard and propensity predictions are truncated away from
{0, 1} (default bound 0.01) so downstream inverse weights stay bounded. The
saturated empirical hazard is exempt: the product-limit reduction must be
exact, including cells with zero events.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, logit

from .data import PersonTime, TrialDataset, assign_folds, expand_long
from .errors import FitError, PositivityError
from .forest import Forest, fit_forest
from .logistic import fit_lasso_logistic, irls_logistic

EPS_PROB = 0.01          # truncation for hazards and propensities
EPS_CENS_SURV = 0.05     # floor for the cumulative censoring survivor
MAX_TIME_DUMMIES = 30


@dataclass
class FeatureMap:
    """Maps (t, a, X, stratum) person-time rows to a design matrix.

    Time enters as a linear term plus one-hot indicators (reference t=1,
    capped at MAX_TIME_DUMMIES); the stratum enters as one-hot covariates.
    Interaction terms are products of the named columns, tokens drawn from
    't', 'a', 'w:<level>' and covariate names.
    """

    covariate_names: list[str]
    stratum_levels: list[str]
    horizon: int
    covariates: list[str] | None = None        # None = all
    include_stratum: bool = True
    include_arm: bool = True
    time_linear: bool = True
    time_dummies: bool = True
    intercept: bool = True
    drop_first_stratum: bool = True
    interactions: Sequence[tuple[str, ...]] = ()

    def __post_init__(self):
        if self.covariates is None:
            self.covariates = list(self.covariate_names)
        unknown = [c for c in self.covariates if c not in self.covariate_names]
        if unknown:
            raise FitError(f"unknown covariates in feature map: {unknown}")
        self._cov_idx = [self.covariate_names.index(c) for c in self.covariates]
        self._dummy_times = list(range(2, min(self.horizon, MAX_TIME_DUMMIES + 1) + 1)) if self.time_dummies else []
        # a complete dummy set spans the linear term (with the intercept), so
        # the linear column is kept only when the cap truncates coverage
        dummies_complete = self.time_dummies and self.horizon <= MAX_TIME_DUMMIES + 1
        self._use_time_linear = self.time_linear and not (self.intercept and dummies_complete)
        names = ["(intercept)"] if self.intercept else []
        penalized = [False] if self.intercept else []
        if self._use_time_linear:
            names.append("t")
            penalized.append(False)
        for k in self._dummy_times:
            names.append(f"t={k}")
            penalized.append(False)
        if self.include_arm:
            names.append("a")
            penalized.append(True)
        strata = self.stratum_levels[1:] if self.drop_first_stratum else self.stratum_levels
        if self.include_stratum:
            for w in strata:
                names.append(f"w:{w}")
                penalized.append(True)
        for c in self.covariates:
            names.append(c)
            penalized.append(True)
        for combo in self.interactions:
            names.append("*".join(combo))
            penalized.append(True)
        self.names = names
        self.penalty_mask = np.array(penalized, dtype=bool)

    @property
    def n_columns(self) -> int:
        return len(self.names)

    def _token_column(self, token, t, a, x, stratum_idx):
        if token == "t":
            return t.astype(float)
        if token == "a":
            return a.astype(float)
        if token.startswith("w:"):
            level = token[2:]
            k = self.stratum_levels.index(level)
            return (stratum_idx == k).astype(float)
        if token in self.covariate_names:
            return x[:, self.covariate_names.index(token)]
        raise FitError(f"unknown interaction token '{token}'")

    def build(self, t, a, x, stratum_idx) -> np.ndarray:
        t = np.asarray(t)
        a = np.asarray(a)
        m = len(t)
        cols = []
        if self.intercept:
            cols.append(np.ones(m))
        if self._use_time_linear:
            cols.append(t.astype(float))
        for k in self._dummy_times:
            cols.append((t == k).astype(float))
        if self.include_arm:
            cols.append(a.astype(float))
        if self.include_stratum:
            strata = self.stratum_levels[1:] if self.drop_first_stratum else self.stratum_levels
            for w in strata:
                k = self.stratum_levels.index(w)
                cols.append((stratum_idx == k).astype(float))
        for c in self._cov_idx:
            cols.append(x[:, c])
        for combo in self.interactions:
            col = np.ones(m)
            for token in combo:
                col = col * self._token_column(token, t, a, x, stratum_idx)
            cols.append(col)
        return np.column_stack(cols)


def feature_map_for(ds: TrialDataset, **kwargs) -> FeatureMap:
    return FeatureMap(
        covariate_names=ds.covariate_names,
        stratum_levels=ds.stratum_levels,
        horizon=ds.horizon,
        **kwargs,
    )


@dataclass
class HazardModel:
    """Fitted conditional discrete-hazard predictor h(t, a, X)."""

    kind: str                                   # pooled | lasso | forest | empirical
    feature_map: FeatureMap | None = None
    beta: np.ndarray | None = None
    forest: Forest | None = None
    table: np.ndarray | None = None             # (T, 2) for the empirical kind
    eps_trunc: float = EPS_PROB
    lambda_selected: float | None = None
    lambda_grid: np.ndarray | None = None

    def predict_grid(self, ds: TrialDataset, arm: int) -> np.ndarray:
        """Hazard matrix (n, T): entry [i, t-1] = h(t, arm, X_i)."""
        n, T = ds.n, ds.horizon
        if self.kind == "empirical":
            return np.tile(self.table[:, arm], (n, 1))
        out = np.empty((n, T))
        a = np.full(n, arm)
        for t in range(1, T + 1):
            design = self.feature_map.build(np.full(n, t), a, ds.x, ds.stratum_idx)
            if self.kind == "forest":
                out[:, t - 1] = self.forest.predict(design)
            else:
                out[:, t - 1] = expit(design @ self.beta)
        return np.clip(out, self.eps_trunc, 1.0 - self.eps_trunc)

    def selected_covariates(self) -> list[str]:
        if self.beta is None or self.feature_map is None:
            return []
        return [
            name
            for name, b, pen in zip(self.feature_map.names, self.beta, self.feature_map.penalty_mask)
            if pen and b != 0.0
        ]


def fit_pooled_logistic(ds: TrialDataset, pt: PersonTime, fmap: FeatureMap,
                        tol=1e-8, max_iter=100) -> HazardModel:
    """Binomial MLE of the event indicator on the feature map via IRLS."""
    design = fmap.build(pt.t, pt.arm, ds.x[pt.subject], pt.stratum_idx)
    beta = irls_logistic(design, pt.event.astype(float), tol=tol, max_iter=max_iter)
    return HazardModel(kind="pooled", feature_map=fmap, beta=beta)


def fit_lasso_hazard(ds: TrialDataset, pt: PersonTime, fmap: FeatureMap,
                     lambda_grid=None, cv_folds=5, seed=0) -> HazardModel:
    """L1-penalized pooled logistic hazard with CV-selected penalty.

    Penalized columns are standardized internally over the at-risk rows;
    intercept and time terms are never penalized. CV folds are assigned at
    the subject level so one subject's rows never straddle train/test.
    """
    design = fmap.build(pt.t, pt.arm, ds.x[pt.subject], pt.stratum_idx)
    y = pt.event.astype(float)
    mask = fmap.penalty_mask

    mu = design.mean(axis=0)
    sd = design.std(axis=0)
    scale = np.where(mask & (sd > 0), sd, 1.0)
    center = np.where(mask, mu, 0.0)
    xs = (design - center) / scale

    fold_index = None
    if cv_folds and cv_folds > 1:
        subj_folds = assign_folds(ds, cv_folds, seed).fold_index(ds)
        fold_index = subj_folds[pt.subject]

    res = fit_lasso_logistic(xs, y, mask, lambda_grid=lambda_grid, fold_index=fold_index)
    beta_std = res.beta
    beta = beta_std / scale
    if fmap.intercept:
        beta[0] = beta_std[0] - np.sum(beta_std[mask] * center[mask] / scale[mask])
    return HazardModel(
        kind="lasso",
        feature_map=fmap,
        beta=beta,
        lambda_selected=res.lambda_selected,
        lambda_grid=res.lambda_grid,
    )


def fit_forest_hazard(ds: TrialDataset, pt: PersonTime, fmap: FeatureMap,
                      n_trees=200, mtry=None, min_node=10, subsample=0.8,
                      seed=0) -> HazardModel:
    """Probability forest on the person-time rows with (t, a, X) features."""
    design = fmap.build(pt.t, pt.arm, ds.x[pt.subject], pt.stratum_idx)
    forest = fit_forest(
        design, pt.event.astype(float),
        n_trees=n_trees, mtry=mtry, min_leaf=min_node, subsample=subsample, seed=seed,
    )
    return HazardModel(kind="forest", feature_map=fmap, forest=forest)


def fit_empirical_hazard(ds: TrialDataset, pt: PersonTime) -> HazardModel:
    """Saturated per-(t, arm) event fraction among at-risk rows.

    This is the closed form of the intercept-only, time-saturated,
    arm-saturated logistic MLE; it reproduces the product-limit estimator
    exactly, so no truncation is applied.
    """
    T = ds.horizon
    table = np.zeros((T, 2))
    for a in (0, 1):
        sel = pt.arm == a
        risk = np.bincount(pt.t[sel] - 1, minlength=T).astype(float)
        events = np.bincount(pt.t[sel] - 1, weights=pt.event[sel], minlength=T)
        with np.errstate(invalid="ignore"):
            h = np.where(risk > 0, events / np.maximum(risk, 1.0), 0.0)
        table[:, a] = h
    return HazardModel(kind="empirical", table=table, eps_trunc=0.0)


@dataclass
class CensoringModel:
    """Per-arm discrete censoring hazard table (NPMLE)."""

    hazard: np.ndarray    # (T, 2): p_C(t, a)

    def survivor(self) -> np.ndarray:
        """Pi_C(t, a) = prod_{k < t} (1 - p_C(k, a)); equals 1 at t = 1."""
        T = self.hazard.shape[0]
        surv = np.ones((T, 2))
        if T > 1:
            surv[1:, :] = np.cumprod(1.0 - self.hazard[:-1, :], axis=0)
        return surv


def fit_censoring_npmle(pt: PersonTime, horizon: int) -> CensoringModel:
    """p_C(t, a) = censor events at t / at-risk at t, per arm; 0/0 -> 0."""
    table = np.zeros((horizon, 2))
    for a in (0, 1):
        sel = pt.arm == a
        risk = np.bincount(pt.t[sel] - 1, minlength=horizon).astype(float)
        cens = np.bincount(pt.t[sel] - 1, weights=pt.censor[sel], minlength=horizon)
        table[:, a] = np.where(risk > 0, cens / np.maximum(risk, 1.0), 0.0)
    return CensoringModel(hazard=table)


@dataclass
class PropensityModel:
    """Stratum-wise treatment model. Default is the within-stratum empirical
    arm fraction (intercept-only MLE); a fixed design probability or a
    per-stratum logistic in covariates are also supported."""

    kind: str                                  # intercept-only | design | logistic
    stratum_levels: list[str]
    fractions: np.ndarray | None = None        # (n_strata,) for intercept-only
    design_p: float | None = None
    betas: dict[int, np.ndarray] = field(default_factory=dict)
    covariates: list[str] | None = None
    eps_trunc: float = EPS_PROB

    def predict(self, ds: TrialDataset, arm: int) -> np.ndarray:
        """P(A = arm | X_i), truncated to (eps, 1 - eps)."""
        if self.kind == "design":
            p1 = np.full(ds.n, self.design_p)
        elif self.kind == "intercept-only":
            p1 = self.fractions[ds.stratum_idx]
        else:
            p1 = np.empty(ds.n)
            cov_idx = [ds.covariate_names.index(c) for c in self.covariates]
            for k in range(ds.n_strata):
                sel = ds.stratum_idx == k
                if not sel.any():
                    continue
                design = np.column_stack([np.ones(sel.sum()), ds.x[np.ix_(sel, cov_idx)]])
                p1[sel] = expit(design @ self.betas[k])
        p = p1 if arm == 1 else 1.0 - p1
        return np.clip(p, self.eps_trunc, 1.0 - self.eps_trunc)


def fit_propensity(ds: TrialDataset, covariates: list[str] | None = None,
                   design_p: float | None = None) -> PropensityModel:
    """Fit the treatment model stratum by stratum.

    With ``design_p`` set, the known randomization probability overrides
    estimation. With covariates named, a per-stratum logistic MLE is fit;
    otherwise the intercept-only fit gives the empirical arm fraction.
    """
    if design_p is not None:
        return PropensityModel(kind="design", stratum_levels=ds.stratum_levels, design_p=float(design_p))
    fractions = np.empty(ds.n_strata)
    for k in range(ds.n_strata):
        sel = ds.stratum_idx == k
        n_w = int(sel.sum())
        n_1 = int((ds.arm[sel] == 1).sum())
        if n_1 == 0 or n_1 == n_w:
            raise PositivityError(
                f"stratum '{ds.stratum_levels[k]}' has a single arm; propensity undefined"
            )
        fractions[k] = n_1 / n_w
    if covariates is None:
        return PropensityModel(kind="intercept-only", stratum_levels=ds.stratum_levels, fractions=fractions)
    cov_idx = [ds.covariate_names.index(c) for c in covariates]
    betas = {}
    for k in range(ds.n_strata):
        sel = ds.stratum_idx == k
        design = np.column_stack([np.ones(sel.sum()), ds.x[np.ix_(sel, cov_idx)]])
        betas[k] = irls_logistic(design, ds.arm[sel].astype(float))
    return PropensityModel(
        kind="logistic", stratum_levels=ds.stratum_levels, betas=betas, covariates=list(covariates)
    )


@dataclass
class NuisanceConfig:
    """Hazard/censoring/propensity fitting options (JSON-friendly)."""

    kind: str = "pooled"                       # pooled | lasso | forest | empirical
    covariates: list[str] | None = None
    include_stratum: bool = True
    interactions: Sequence[tuple[str, ...]] = ()
    time_dummies: bool = True
    lambda_grid: list[float] | None = None
    cv_folds: int = 5
    n_trees: int = 200
    mtry: int | None = None
    min_node: int = 10
    subsample: float = 0.8
    seed: int = 0
    propensity_covariates: list[str] | None = None
    design_p: float | None = None


@dataclass
class NuisanceBundle:
    """Fitted hazard + censoring NPMLE + propensity, per cross-fitting fold.

    Fold j's models are trained on the subjects outside fold j; subjects in
    fold j receive out-of-fold predictions. J=1 trains on the full sample.
    """

    hazard_models: list[HazardModel]
    censor_models: list[CensoringModel]
    propensity_models: list[PropensityModel]
    fold_index: np.ndarray          # (n,)
    config: NuisanceConfig

    @property
    def n_folds(self) -> int:
        return len(self.hazard_models)

    def hazard_grid(self, ds: TrialDataset, arm: int) -> np.ndarray:
        out = np.empty((ds.n, ds.horizon))
        for j, model in enumerate(self.hazard_models):
            sel = self.fold_index == j
            if sel.any():
                out[sel] = model.predict_grid(ds, arm)[sel]
        return out

    def censor_survivor(self, ds: TrialDataset, arm: int) -> np.ndarray:
        """(n, T) cumulative censoring survivor per subject (own fold's table)."""
        out = np.empty((ds.n, ds.horizon))
        for j, model in enumerate(self.censor_models):
            sel = self.fold_index == j
            if sel.any():
                out[sel] = model.survivor()[:, arm][None, :]
        return out

    def propensity(self, ds: TrialDataset, arm: int) -> np.ndarray:
        out = np.empty(ds.n)
        for j, model in enumerate(self.propensity_models):
            sel = self.fold_index == j
            if sel.any():
                out[sel] = model.predict(ds, arm)[sel]
        return out


def _subset_dataset(ds: TrialDataset, keep: np.ndarray) -> TrialDataset:
    return TrialDataset(
        ids=ds.ids[keep],
        x=ds.x[keep],
        stratum_idx=ds.stratum_idx[keep],
        arm=ds.arm[keep],
        time=ds.time[keep],
        event=ds.event[keep],
        horizon=ds.horizon,
        covariate_names=ds.covariate_names,
        stratum_levels=ds.stratum_levels,
    )


def _fit_hazard(ds_train: TrialDataset, cfg: NuisanceConfig) -> HazardModel:
    pt = expand_long(ds_train)
    if cfg.kind == "empirical":
        return fit_empirical_hazard(ds_train, pt)
    fmap = feature_map_for(
        ds_train,
        covariates=cfg.covariates,
        include_stratum=cfg.include_stratum,
        interactions=cfg.interactions,
        time_dummies=cfg.time_dummies,
    )
    if cfg.kind == "pooled":
        return fit_pooled_logistic(ds_train, pt, fmap)
    if cfg.kind == "lasso":
        grid = None if cfg.lambda_grid is None else np.asarray(cfg.lambda_grid, dtype=float)
        return fit_lasso_hazard(ds_train, pt, fmap, lambda_grid=grid,
                                cv_folds=cfg.cv_folds, seed=cfg.seed)
    if cfg.kind == "forest":
        fmap_forest = feature_map_for(
            ds_train,
            covariates=cfg.covariates,
            include_stratum=cfg.include_stratum,
            time_dummies=False,
            intercept=False,
            drop_first_stratum=False,
        )
        return fit_forest_hazard(ds_train, pt, fmap_forest, n_trees=cfg.n_trees,
                                 mtry=cfg.mtry, min_node=cfg.min_node,
                                 subsample=cfg.subsample, seed=cfg.seed)
    raise FitError(f"unknown hazard kind '{cfg.kind}'")


def fit_nuisances(ds: TrialDataset, cfg: NuisanceConfig, n_folds: int = 1,
                  fold_seed: int = 0) -> NuisanceBundle:
    """Fit the three nuisance models, cross-fitting when n_folds > 1."""
    if n_folds <= 1:
        fold_index = np.zeros(ds.n, dtype=int)
        folds = [np.ones(ds.n, dtype=bool)]
    else:
        assignment = assign_folds(ds, n_folds, fold_seed)
        fold_index = assignment.fold_index(ds)
        folds = [fold_index != j for j in range(n_folds)]  # training masks

    hazard_models, censor_models, propensity_models = [], [], []
    for train_mask in folds:
        ds_train = _subset_dataset(ds, train_mask) if not train_mask.all() else ds
        pt_train = expand_long(ds_train)
        hazard_models.append(_fit_hazard(ds_train, cfg))
        censor_models.append(fit_censoring_npmle(pt_train, ds.horizon))
        propensity_models.append(
            fit_propensity(ds_train, covariates=cfg.propensity_covariates, design_p=cfg.design_p)
        )
    return NuisanceBundle(
        hazard_models=hazard_models,
        censor_models=censor_models,
        propensity_models=propensity_models,
        fold_index=fold_index,
        config=cfg,
    )
