"""Config-driven command line: trial analysis, mean-outcome analysis, and the
Monte Carlo study. Outputs are deterministic functions of (inputs, config,
seed); every file carries a metadata header with the git revision, seed, and
config hash as '#'-prefixed comment lines (readers should skip '#' lines,
e.g. pandas.read_csv(..., comment='#')).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from .data import SchemaConfig, parse_dataset
from .errors import (DataValidationError, EstimationError, FitError, SchemaError,
                     UndefinedEstimandError)
from .estimands import EstimandSpec, estimate
from .mean_outcome import aipw_ate, baselines, parse_mean_dataset, tmle_ate
from .nuisance import NuisanceConfig, fit_nuisances
from .simulate import EstimatorConfig, StudyConfig, run_study
from .tmle import TmleConfig, km_baseline, tmle_survival_curve

EXIT_CONFIG = 2
EXIT_ESTIMATION = 3

ANALYZE_DEFAULTS = {
    "schema": {"id": "id", "stratum": "w", "arm": "a", "time": "u", "event": "delta"},
    "methods": ["km", "tmle"],
    "models": ["lasso"],
    "estimands": [{"kind": "rd", "time": 3}],
    "covariates": "all",
    "include_stratum": True,
    "interactions": [],
    "folds": 1,
    "seed": 1,
    "alpha": 0.05,
    "design_p": None,
    "nuisance": {"lambda_grid": None, "cv_folds": 5, "n_trees": 200,
                 "mtry": None, "min_node": 10, "subsample": 0.8},
}

ANALYZE_MEAN_DEFAULTS = {
    "schema": {"id": "id", "stratum": "w", "arm": "a"},
    "outcome": "y",
    "methods": ["dom", "ancova-full", "ancova-strata", "aipw", "tmle"],
    "outcome_model": "ols",
    "propensity": "strata",
    "folds": 1,
    "seed": 1,
    "alpha": 0.05,
    "design_p": None,
}

SIMULATE_DEFAULTS = {
    "n_grid": [100, 500, 1000],
    "n_reps": 1000,
    "master_seed": 20240101,
    "t_max": 4,
    "target_time": 3,
    "estimand": "rd",
    "randomization": "stratified-balanced",
    "p": 0.5,
    "design_p": 0.5,
    "oracle_draws": 10000000,
    "estimators": [
        {"name": "km", "method": "km"},
        {"name": "tmle-lasso-correct", "method": "tmle", "model": "lasso", "preset": "correct"},
        {"name": "tmle-lasso-all", "method": "tmle", "model": "lasso", "preset": "all"},
        {"name": "tmle-lasso-incorrect", "method": "tmle", "model": "lasso", "preset": "incorrect"},
    ],
}


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10,
            cwd=os.path.dirname(os.path.abspath(__file__)),
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except Exception:
        pass
    return "unknown"


def _config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _metadata_lines(config: dict, seed) -> list[str]:
    return [
        f"# git: {_git_describe()}",
        f"# seed: {seed}",
        f"# config_hash: {_config_hash(config)}",
    ]


def _load_config(path, defaults):
    cfg = json.loads(json.dumps(defaults))  # deep copy
    if path:
        with open(path) as fh:
            user = json.load(fh)
        unknown = set(user) - set(defaults)
        if unknown:
            raise SchemaError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(user)
    return cfg


def _fmt(x, digits=3):
    return f"{x:.{digits}f}" if x is not None and np.isfinite(x) else ""


def _write_csv(path: Path, header, rows, meta_lines):
    with open(path, "w", newline="") as fh:
        for line in meta_lines:
            fh.write(line + "\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _repr_num(x):
    if isinstance(x, float):
        return repr(x)
    return str(x)


def cmd_analyze(args) -> int:
    try:
        config = _load_config(args.config, ANALYZE_DEFAULTS)
        schema = SchemaConfig(**{**{"covariates": None, "horizon": None}, **config["schema"]})
        data = Path(args.data).read_bytes()
        ds = parse_dataset(data, schema)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SchemaError, DataValidationError, json.JSONDecodeError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    covs = None if config["covariates"] == "all" else list(config["covariates"])
    interactions = tuple(tuple(t) for t in config["interactions"])
    tmle_cfg = TmleConfig(variance_p=config["design_p"], alpha=config["alpha"])
    specs = [EstimandSpec(kind=e["kind"], time=int(e["time"]), arm=int(e.get("arm", 1)),
                          alpha=config["alpha"]) for e in config["estimands"]]
    needed_times = sorted({t for s in specs for t in s.required_times})

    cells = []
    for method in config["methods"]:
        if method == "km":
            cells.append(("KM", "--", None))
        else:
            for model in config["models"]:
                cells.append(("TMLE", model, model))

    table_rows = []
    json_rows = []
    forest_rows = []
    for method, model_label, model in cells:
        cell_name = f"{method}/{model_label}"
        try:
            if method == "KM":
                fit = km_baseline(ds, target_times=needed_times, config=tmle_cfg)
            else:
                nz = config["nuisance"]
                ncfg = NuisanceConfig(
                    kind=model,
                    covariates=covs,
                    include_stratum=config["include_stratum"],
                    interactions=interactions,
                    lambda_grid=nz["lambda_grid"],
                    cv_folds=nz["cv_folds"],
                    n_trees=nz["n_trees"],
                    mtry=nz["mtry"],
                    min_node=nz["min_node"],
                    subsample=nz["subsample"],
                    seed=config["seed"],
                    design_p=config["design_p"],
                )
                nuis = fit_nuisances(ds, ncfg, n_folds=config["folds"], fold_seed=config["seed"])
                fit = tmle_survival_curve(ds, nuis, target_times=needed_times, config=tmle_cfg)
            for spec in specs:
                for flavor, flavor_label in (("simple", "Simple"), ("stratified", "Stratified")):
                    res = estimate(fit, ds, spec, flavor=flavor)
                    variance = res.variance_simple if flavor == "simple" else res.variance_stratified
                    est_ci = f"{res.estimate:.3f} ({res.ci_low:.3f}, {res.ci_high:.3f})"
                    table_rows.append([
                        method, flavor_label, model_label.capitalize() if model else "--",
                        spec.kind.upper(), spec.time, est_ci, _fmt(variance), _fmt(res.p_value),
                    ])
                    label = f"{method}-{model_label}-{flavor_label}-{spec.label()}"
                    forest_rows.append([label, _repr_num(res.estimate),
                                        _repr_num(res.ci_low), _repr_num(res.ci_high)])
                    json_rows.append({
                        "method": method, "randomization": flavor_label, "model": model_label,
                        "estimand": spec.kind, "time": spec.time,
                        "estimate": res.estimate, "ci_low": res.ci_low, "ci_high": res.ci_high,
                        "variance_simple": res.variance_simple,
                        "variance_stratified": res.variance_stratified,
                        "correction": res.correction, "p_value": res.p_value,
                        "metadata": res.metadata,
                        "diagnostics": fit.diagnostics_record(),
                    })
        except (EstimationError, UndefinedEstimandError, FitError) as exc:
            print(f"error: estimation failed in cell {cell_name}: {exc}", file=sys.stderr)
            return EXIT_ESTIMATION

    meta = _metadata_lines(config, config["seed"])
    header = ["Method", "Randomization", "Model", "Estimand", "Time",
              "Estimate (95% CI)", "Variance", "p-value"]
    _write_csv(out_dir / "results.csv", header, table_rows, meta)
    _write_csv(out_dir / "forest_plot.csv", ["label", "estimate", "ci_low", "ci_high"],
               forest_rows, meta)
    payload = {
        "metadata": {"git": _git_describe(), "seed": config["seed"],
                     "config_hash": _config_hash(config), "config": config},
        "rows": json_rows,
    }
    (out_dir / "results.json").write_text(json.dumps(payload, indent=2, default=float) + "\n")
    print(f"wrote {len(table_rows)} result rows to {out_dir}")
    return 0


def cmd_analyze_mean(args) -> int:
    try:
        config = _load_config(args.config, ANALYZE_MEAN_DEFAULTS)
        schema = SchemaConfig(**{**{"covariates": None}, **config["schema"]})
        ds = parse_mean_dataset(Path(args.data).read_bytes(), schema, outcome_col=config["outcome"])
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SchemaError, DataValidationError, json.JSONDecodeError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    json_rows = []
    for method in config["methods"]:
        try:
            if method in ("dom", "ancova-full", "ancova-strata"):
                results = [(baselines(ds, method, alpha=config["alpha"]), "Simple")]
            else:
                fn = aipw_ate if method == "aipw" else tmle_ate
                results = [
                    (fn(ds, outcome_model=config["outcome_model"], n_folds=config["folds"],
                        seed=config["seed"], propensity=config["propensity"],
                        design_p=config["design_p"], alpha=config["alpha"], flavor=flavor), label)
                    for flavor, label in (("simple", "Simple"), ("stratified", "Stratified"))
                ]
        except (EstimationError, FitError, DataValidationError) as exc:
            print(f"error: estimation failed in cell {method}: {exc}", file=sys.stderr)
            return EXIT_ESTIMATION
        for res, label in results:
            est_ci = f"{res.estimate:.3f} ({res.ci_low:.3f}, {res.ci_high:.3f})"
            variance = res.variance_simple if label == "Simple" else res.variance_stratified
            rows.append([method.upper(), label, est_ci, _fmt(variance), _fmt(res.p_value)])
            json_rows.append({
                "method": method, "randomization": label, "estimate": res.estimate,
                "ci_low": res.ci_low, "ci_high": res.ci_high,
                "variance_simple": res.variance_simple,
                "variance_stratified": res.variance_stratified,
                "p_value": res.p_value, "metadata": res.metadata,
            })
    meta = _metadata_lines(config, config["seed"])
    _write_csv(out_dir / "results.csv",
               ["Method", "Randomization", "Estimate (95% CI)", "Variance", "p-value"],
               rows, meta)
    payload = {"metadata": {"git": _git_describe(), "seed": config["seed"],
                            "config_hash": _config_hash(config), "config": config},
               "rows": json_rows}
    (out_dir / "results.json").write_text(json.dumps(payload, indent=2, default=float) + "\n")
    print(f"wrote {len(rows)} result rows to {out_dir}")
    return 0


def _study_from_config(config, threads) -> StudyConfig:
    estimators = [
        EstimatorConfig(
            name=e["name"], method=e.get("method", "tmle"), model=e.get("model", "lasso"),
            preset=e.get("preset", "correct"), folds=int(e.get("folds", 1)),
            cv_folds=int(e.get("cv_folds", 5)), n_trees=int(e.get("n_trees", 200)),
        )
        for e in config["estimators"]
    ]
    return StudyConfig(
        n_grid=[int(v) for v in config["n_grid"]],
        n_reps=int(config["n_reps"]),
        master_seed=int(config["master_seed"]),
        t_max=int(config["t_max"]),
        target_time=int(config["target_time"]),
        estimand=config["estimand"],
        randomization=config["randomization"],
        p=float(config["p"]),
        design_p=config["design_p"],
        estimators=estimators,
        oracle_draws=int(config["oracle_draws"]),
        n_workers=threads,
    )


SUMMARY_COLUMNS = ["n", "estimator", "variance_flavor", "n_reps", "n_failed", "bias",
                   "empirical_sd", "mean_se", "mean_variance", "coverage",
                   "rel_eff_empirical", "rel_eff_estimated_mean", "rel_eff_frac_gt1", "theta"]


def cmd_simulate(args) -> int:
    try:
        config = _load_config(args.config, SIMULATE_DEFAULTS)
        study = _study_from_config(config, args.threads)
    except (SchemaError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        print(f"error: bad config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    summary, records, theta = run_study(study)
    meta = _metadata_lines(config, study.master_seed)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    rows = [[_repr_num(r[c]) for c in SUMMARY_COLUMNS] for r in summary]
    _write_csv(out_path, SUMMARY_COLUMNS, rows, meta)

    if args.plots_dir:
        plots = Path(args.plots_dir)
        plots.mkdir(parents=True, exist_ok=True)
        for metric in ("bias", "coverage", "rel_eff_empirical"):
            tidy = [[_repr_num(r["n"]), r["estimator"], r["variance_flavor"], _repr_num(r[metric])]
                    for r in summary]
            _write_csv(plots / f"{metric}.csv", ["n", "estimator", "variance_flavor", metric],
                       tidy, meta)
        rep_cols = ["n", "rep", "estimator", "ok", "estimate", "v_simple", "v_strat"]
        rep_rows = [[_repr_num(r.get(c, "")) for c in rep_cols] for r in records]
        _write_csv(plots / "replications.csv", rep_cols, rep_rows, meta)

    for r in summary:
        print(f"n={r['n']} {r['estimator']}/{r['variance_flavor']}: "
              f"bias={r['bias']:+.4f} cover={r['coverage']:.3f} "
              f"RE={r['rel_eff_empirical']:.3f}" if np.isfinite(r["rel_eff_empirical"])
              else f"n={r['n']} {r['estimator']}/{r['variance_flavor']}: bias={r['bias']:+.4f}")
    return 0


def cmd_print_defaults(_args) -> int:
    print(json.dumps({
        "analyze": ANALYZE_DEFAULTS,
        "analyze-mean": ANALYZE_MEAN_DEFAULTS,
        "simulate": SIMULATE_DEFAULTS,
    }, indent=2))
    return 0


def _default_threads() -> int:
    env = os.environ.get("STRAT_TTE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="strat-tte",
                                     description="Covariate-adjusted survival analysis "
                                                 "for stratified randomized trials")
    sub = parser.add_subparsers(dest="command", required=True)

    pa = sub.add_parser("analyze", help="analyze a trial CSV")
    pa.add_argument("--data", required=True)
    pa.add_argument("--config", default=None)
    pa.add_argument("--out", required=True)
    pa.add_argument("--threads", type=int, default=_default_threads())
    pa.set_defaults(func=cmd_analyze)

    pm = sub.add_parser("analyze-mean", help="analyze a scalar-outcome trial CSV")
    pm.add_argument("--data", required=True)
    pm.add_argument("--config", default=None)
    pm.add_argument("--out", required=True)
    pm.add_argument("--threads", type=int, default=_default_threads())
    pm.set_defaults(func=cmd_analyze_mean)

    ps = sub.add_parser("simulate", help="run the Monte Carlo study")
    ps.add_argument("--config", default=None)
    ps.add_argument("--out", required=True)
    ps.add_argument("--plots-dir", default=None)
    ps.add_argument("--threads", type=int, default=_default_threads())
    ps.set_defaults(func=cmd_simulate)

    pd_ = sub.add_parser("print-defaults", help="print default configs as JSON")
    pd_.set_defaults(func=cmd_print_defaults)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
