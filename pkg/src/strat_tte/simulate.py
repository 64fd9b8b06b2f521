"""Trial data-generating mechanism and the Monte Carlo study harness.

The DGM draws a four-level stratum (probabilities 0.1/0.2/0.3/0.4), thirty
baseline covariates, 1:1 treatment within strata, and discrete event and
censoring times from pooled logistic hazards; signal enters the event hazard
through x1, x3, x5 and the stratum. The study harness runs replicated
analyses over a sample-size grid and aggregates bias, coverage, and relative
efficiency against the unadjusted product-limit baseline.
"""

from __future__ import annotations

import concurrent.futures
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .data import TrialDataset
from .errors import EstimationError
from .estimands import EstimandSpec, estimate
from .nuisance import NuisanceConfig, fit_nuisances
from .tmle import TmleConfig, km_baseline, tmle_survival_curve

N_COVARIATES = 30
SIGNAL_COVARIATES = ("x1", "x3", "x5")


@dataclass
class DgmConfig:
    n: int
    t_max: int = 4
    seed: int = 0
    randomization: str = "stratified-balanced"   # or "simple-bernoulli"
    p: float = 0.5
    treatment_effect_scale: float = 1.0          # 0 zeroes every treatment term

    def __post_init__(self):
        if self.n < 4:
            raise ValueError("n must be >= 4")
        if not 0.0 < self.p < 1.0:
            raise ValueError("p must lie in (0, 1)")
        if self.randomization not in ("stratified-balanced", "simple-bernoulli"):
            raise ValueError(f"unknown randomization '{self.randomization}'")


def event_hazard(t, a, stratum, x1, x3, x5, effect_scale=1.0):
    """Conditional event hazard of the generating model (probability scale)."""
    s2 = stratum == 2
    s3 = stratum == 3
    s4 = stratum == 4
    lp = (
        (-3.1 + 0.55 * t) / 5.0
        + 1.5 * s2 - 1.5 * s3 + 1.5 * s4
        + 0.03 * t * s3 + 0.03 * t * s4
        + effect_scale * (
            -0.2 * a
            - 0.0005 * t * a
            - 0.025 * a * s3
            - 0.070 * a * s4
            - 0.009 * t * a * s4
        )
        + 3.0 * x1 + 3.0 * x3 + 3.0 * x5
    )
    return expit(lp)


def censor_hazard(t):
    return expit(-5.0 + 0.1 * t)


def _draw_covariates(rng, n):
    """Thirty baseline covariates: odd indices 1..15 normal with the listed
    means/scales, everything else Unif[-1, 1]."""
    x = rng.uniform(-1.0, 1.0, size=(n, N_COVARIATES))
    x[:, 0] = rng.normal(0.125, 1.0, n)    # x1
    x[:, 2] = rng.normal(-0.125, 1.0, n)   # x3
    x[:, 4] = rng.normal(0.05, 1.0, n)     # x5
    for j in (6, 8, 14):                   # x7, x9, x15
        x[:, j] = rng.normal(0.0, 1.0, n)
    for j in (10, 12):                     # x11, x13: variance 1/16
        x[:, j] = rng.normal(0.0, 0.25, n)
    return x


def _assign_treatment(rng, stratum, cfg: DgmConfig):
    n = len(stratum)
    if cfg.randomization == "simple-bernoulli":
        return (rng.random(n) < cfg.p).astype(int)
    arm = np.zeros(n, dtype=int)
    for s in (1, 2, 3, 4):
        members = np.flatnonzero(stratum == s)
        n_w = len(members)
        n_treat = n_w // 2 if cfg.p == 0.5 else int(round(n_w * cfg.p))
        chosen = rng.permutation(members)[:n_treat]
        arm[chosen] = 1
    return arm


def generate_trial(cfg: DgmConfig) -> TrialDataset:
    """Draw one trial dataset: U = min(event, censor, t_max); events win
    within a period."""
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n
    stratum = rng.choice([1, 2, 3, 4], size=n, p=[0.1, 0.2, 0.3, 0.4])
    x = _draw_covariates(rng, n)
    arm = _assign_treatment(rng, stratum, cfg)

    time = np.full(n, cfg.t_max, dtype=int)
    event = np.zeros(n, dtype=int)
    open_ = np.ones(n, dtype=bool)
    for t in range(1, cfg.t_max + 1):
        h_event = event_hazard(t, arm, stratum, x[:, 0], x[:, 2], x[:, 4],
                               effect_scale=cfg.treatment_effect_scale)
        u_event = rng.random(n)
        u_cens = rng.random(n)
        fires_event = open_ & (u_event < h_event)
        fires_cens = open_ & ~fires_event & (u_cens < censor_hazard(t))
        time[fires_event] = t
        event[fires_event] = 1
        time[fires_cens] = t
        open_ &= ~(fires_event | fires_cens)
    # subjects still open at t_max are administratively censored there

    return TrialDataset(
        ids=np.array([f"s{i:06d}" for i in range(n)]),
        x=x,
        stratum_idx=(stratum - 1).astype(int),
        arm=arm,
        time=time,
        event=event,
        horizon=cfg.t_max,
        covariate_names=[f"x{j}" for j in range(1, N_COVARIATES + 1)],
        stratum_levels=["1", "2", "3", "4"],
    )


def true_theta(cfg: DgmConfig, n_draws: int = 10_000_000, t_star: int = 3,
               seed: int = 123_456, chunk: int = 1_000_000):
    """Monte Carlo oracle for theta = S(t*, 1) - S(t*, 0).

    Generates both potential event times per draw (no censoring) with common
    period-wise uniforms, so the difference indicator is low-variance.
    Returns (theta, simulation SE).
    """
    rng = np.random.default_rng(seed)
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < n_draws:
        m = min(chunk, n_draws - done)
        stratum = rng.choice([1, 2, 3, 4], size=m, p=[0.1, 0.2, 0.3, 0.4])
        x1 = rng.normal(0.125, 1.0, m)
        x3 = rng.normal(-0.125, 1.0, m)
        x5 = rng.normal(0.05, 1.0, m)
        alive = {0: np.ones(m, dtype=bool), 1: np.ones(m, dtype=bool)}
        for t in range(1, t_star + 1):
            u = rng.random(m)
            for a in (0, 1):
                h = event_hazard(t, a, stratum, x1, x3, x5,
                                 effect_scale=cfg.treatment_effect_scale)
                alive[a] &= u >= h
        diff = alive[1].astype(float) - alive[0].astype(float)
        total += float(diff.sum())
        total_sq += float((diff**2).sum())
        done += m
    theta = total / n_draws
    var = total_sq / n_draws - theta**2
    se = float(np.sqrt(max(var, 0.0) / n_draws))
    return theta, se


# ---------------------------------------------------------------------------
# Monte Carlo study

def preset_nuisance(preset: str, model: str, seed: int = 0, **overrides) -> NuisanceConfig:
    """Covariate presets for the simulated trial.

    'correct' supplies the signal covariates, stratum indicators, and the
    generating interactions; 'all' supplies every covariate; 'incorrect'
    supplies only the even-indexed (pure noise) covariates without stratum.
    """
    if preset == "correct":
        cov = list(SIGNAL_COVARIATES)
        include_stratum = True
        interactions = (("t", "a"), ("t", "w:3"), ("t", "w:4"),
                        ("a", "w:3"), ("a", "w:4"), ("t", "a", "w:4"))
    elif preset == "all":
        cov = [f"x{j}" for j in range(1, N_COVARIATES + 1)]
        include_stratum = True
        interactions = ()
    elif preset == "incorrect":
        cov = [f"x{j}" for j in range(2, N_COVARIATES + 1, 2)]
        include_stratum = False
        interactions = ()
    else:
        raise ValueError(f"unknown covariate preset '{preset}'")
    return NuisanceConfig(
        kind=model,
        covariates=cov,
        include_stratum=include_stratum,
        interactions=interactions,
        seed=seed,
        **overrides,
    )


@dataclass
class EstimatorConfig:
    name: str
    method: str = "tmle"            # "km" or "tmle"
    model: str = "lasso"            # pooled | lasso | forest
    preset: str = "correct"         # correct | all | incorrect
    folds: int = 1
    cv_folds: int = 5
    n_trees: int = 200

    @classmethod
    def km(cls):
        return cls(name="km", method="km")


@dataclass
class StudyConfig:
    n_grid: list[int] = field(default_factory=lambda: [100, 500, 1000])
    n_reps: int = 1000
    master_seed: int = 20_240_101
    t_max: int = 4
    target_time: int = 3
    estimand: str = "rd"
    randomization: str = "stratified-balanced"
    p: float = 0.5
    design_p: float | None = 0.5        # variance-correction probability
    estimators: list[EstimatorConfig] = field(default_factory=lambda: [
        EstimatorConfig.km(),
        EstimatorConfig(name="tmle-lasso-correct", preset="correct"),
        EstimatorConfig(name="tmle-lasso-all", preset="all"),
        EstimatorConfig(name="tmle-lasso-incorrect", preset="incorrect"),
    ])
    oracle_draws: int = 10_000_000
    oracle_seed: int = 987_654
    n_workers: int = 1
    max_failure_rate: float = 0.01


def _replication_seed(master_seed: int, n: int, rep: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=master_seed, spawn_key=(n, rep))


def _run_replication(study: StudyConfig, n: int, rep: int) -> list[dict]:
    """One dataset, every estimator; returns one record per estimator."""
    ss = _replication_seed(study.master_seed, n, rep)
    seeds = ss.generate_state(4)
    cfg = DgmConfig(n=n, t_max=study.t_max, seed=int(seeds[0]),
                    randomization=study.randomization, p=study.p)
    ds = generate_trial(cfg)
    spec = EstimandSpec(kind=study.estimand, time=study.target_time)
    tmle_cfg = TmleConfig(variance_p=study.design_p)
    records = []
    for est in study.estimators:
        rec = {"n": n, "rep": rep, "estimator": est.name, "ok": True, "error": ""}
        try:
            if est.method == "km":
                fit = km_baseline(ds, target_times=spec.required_times, config=tmle_cfg)
            else:
                ncfg = preset_nuisance(est.preset, est.model, seed=int(seeds[1]),
                                       cv_folds=est.cv_folds, n_trees=est.n_trees)
                nuis = fit_nuisances(ds, ncfg, n_folds=est.folds, fold_seed=int(seeds[2]))
                fit = tmle_survival_curve(ds, nuis, target_times=spec.required_times,
                                          config=tmle_cfg)
            res_strat = estimate(fit, ds, spec, flavor="stratified")
            res_simple = estimate(fit, ds, spec, flavor="simple")
            if abs(res_strat.estimate - res_simple.estimate) > 1e-12:
                raise EstimationError("variance flavors disagree on the point estimate")
            rec.update(
                estimate=res_strat.estimate,
                v_simple=res_simple.variance_simple,
                v_strat=res_strat.variance_stratified,
                ci_low_simple=res_simple.ci_low,
                ci_high_simple=res_simple.ci_high,
                ci_low_strat=res_strat.ci_low,
                ci_high_strat=res_strat.ci_high,
            )
        except Exception as exc:  # noqa: BLE001 - per-replication failures are counted
            rec.update(ok=False, error=f"{type(exc).__name__}: {exc}",
                       estimate=np.nan, v_simple=np.nan, v_strat=np.nan,
                       ci_low_simple=np.nan, ci_high_simple=np.nan,
                       ci_low_strat=np.nan, ci_high_strat=np.nan)
        records.append(rec)
    return records


def run_study(study: StudyConfig, theta: float | None = None):
    """Run the full grid; returns (summary_rows, replication_rows, theta).

    Every replication analyzes the same dataset with every estimator; the
    simple/stratified rows of one estimator share the point estimate by
    construction and this is asserted per replication. Failed replications
    are excluded with a count; the run aborts if more than
    ``max_failure_rate`` of them fail.
    """
    if theta is None:
        theta, _theta_se = true_theta(
            DgmConfig(n=4, t_max=study.t_max, seed=0, p=study.p),
            n_draws=study.oracle_draws, t_star=study.target_time, seed=study.oracle_seed,
        )

    tasks = [(n, rep) for n in study.n_grid for rep in range(study.n_reps)]
    all_records: list[dict] = []
    if study.n_workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=study.n_workers) as pool:
            futures = {pool.submit(_run_replication, study, n, rep): (n, rep) for n, rep in tasks}
            results = {}
            for fut in concurrent.futures.as_completed(futures):
                results[futures[fut]] = fut.result()
        for key in tasks:  # deterministic order regardless of completion order
            all_records.extend(results[key])
    else:
        for n, rep in tasks:
            all_records.extend(_run_replication(study, n, rep))

    n_fail = sum(1 for r in all_records if not r["ok"])
    if all_records and n_fail / len(all_records) > study.max_failure_rate:
        raise EstimationError(
            f"{n_fail}/{len(all_records)} replications failed (> {study.max_failure_rate:.0%})"
        )
    if n_fail:
        warnings.warn(f"{n_fail} replication cells failed and were excluded", stacklevel=2)

    summary = _summarize(study, all_records, theta)
    return summary, all_records, theta


def _summarize(study: StudyConfig, records: list[dict], theta: float) -> list[dict]:
    rows = []
    for n in study.n_grid:
        km_v_simple = {
            r["rep"]: r["v_simple"] for r in records
            if r["n"] == n and r["estimator"] == "km" and r["ok"]
        }
        km_est = np.array([r["estimate"] for r in records
                           if r["n"] == n and r["estimator"] == "km" and r["ok"]])
        km_emp_var = float(np.var(km_est)) if km_est.size > 1 else np.nan
        for est in study.estimators:
            recs = [r for r in records if r["n"] == n and r["estimator"] == est.name and r["ok"]]
            n_fail = sum(1 for r in records
                         if r["n"] == n and r["estimator"] == est.name and not r["ok"])
            if not recs:
                continue
            estimates = np.array([r["estimate"] for r in recs])
            for flavor in ("simple", "stratified"):
                vkey = "v_simple" if flavor == "simple" else "v_strat"
                lo_key = f"ci_low_{'simple' if flavor == 'simple' else 'strat'}"
                hi_key = f"ci_high_{'simple' if flavor == 'simple' else 'strat'}"
                variances = np.array([r[vkey] for r in recs])
                ses = np.sqrt(variances / n)
                cover = np.array([(r[lo_key] <= theta <= r[hi_key]) for r in recs])
                re_rows = [
                    km_v_simple[r["rep"]] / r[vkey] for r in recs if r["rep"] in km_v_simple
                ]
                re_rows = np.array(re_rows) if re_rows else np.array([np.nan])
                emp_var = float(np.var(estimates)) if estimates.size > 1 else np.nan
                rows.append({
                    "n": n,
                    "estimator": est.name,
                    "variance_flavor": flavor,
                    "n_reps": len(recs),
                    "n_failed": n_fail,
                    "bias": float(np.mean(estimates) - theta),
                    "empirical_sd": float(np.std(estimates)),
                    "mean_se": float(np.mean(ses)),
                    "mean_variance": float(np.mean(variances)),
                    "coverage": float(np.mean(cover)),
                    "rel_eff_empirical": (km_emp_var / emp_var) if emp_var and np.isfinite(emp_var) and emp_var > 0 else np.nan,
                    "rel_eff_estimated_mean": float(np.mean(re_rows)),
                    "rel_eff_frac_gt1": float(np.mean(re_rows > 1.0)),
                    "theta": theta,
                })
    return rows
