"""Covariate-adjusted inference for time-to-event outcomes in stratified
randomized trials: targeted estimation of survival-curve functionals with a
stratification-aware variance, data-adaptive nuisance models, an unadjusted
product-limit baseline, and a replicated simulation harness.
"""

from .data import (FoldAssignment, PersonTime, SchemaConfig, SubjectRecord,
                   TrialDataset, assign_folds, expand_long, parse_dataset)
from .estimands import EstimandResult, EstimandSpec, estimate, functional_if, functional_value
from .kernels import BACKEND as KERNEL_BACKEND
from .mean_outcome import (AteResult, MeanDgmConfig, MeanTrialDataset, aipw_ate,
                           baselines, generate_mean_trial, parse_mean_dataset, tmle_ate)
from .nuisance import (CensoringModel, FeatureMap, HazardModel, NuisanceBundle,
                       NuisanceConfig, PropensityModel, feature_map_for,
                       fit_censoring_npmle, fit_empirical_hazard, fit_forest_hazard,
                       fit_lasso_hazard, fit_nuisances, fit_pooled_logistic, fit_propensity)
from .simulate import (DgmConfig, EstimatorConfig, StudyConfig, generate_trial,
                       run_study, true_theta)
from .tmle import (TargetedFit, TmleConfig, VariancePair, clever_covariate,
                   correction_term, eif_survival, km_baseline, solve_fluctuation,
                   tmle_survival_curve, variance_survival)

__version__ = "0.1.0"

__all__ = [
    "AteResult", "CensoringModel", "DgmConfig", "EstimandResult", "EstimandSpec",
    "EstimatorConfig", "FeatureMap", "FoldAssignment", "HazardModel", "KERNEL_BACKEND",
    "MeanDgmConfig", "MeanTrialDataset", "NuisanceBundle", "NuisanceConfig", "PersonTime",
    "PropensityModel", "SchemaConfig", "StudyConfig", "SubjectRecord", "TargetedFit",
    "TmleConfig", "TrialDataset", "VariancePair", "aipw_ate", "assign_folds", "baselines",
    "clever_covariate", "correction_term", "eif_survival", "estimate", "expand_long",
    "feature_map_for",
    "fit_censoring_npmle", "fit_empirical_hazard", "fit_forest_hazard", "fit_lasso_hazard",
    "fit_nuisances", "fit_pooled_logistic", "fit_propensity", "functional_if",
    "functional_value", "generate_mean_trial", "generate_trial", "km_baseline",
    "parse_dataset", "parse_mean_dataset", "run_study", "solve_fluctuation",
    "tmle_ate", "tmle_survival_curve", "true_theta", "variance_survival",
]
