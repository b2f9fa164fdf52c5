"""Causal effect estimation via targeted learning and linear path analysis.

The package bundles three estimation engines and a simulation harness:

- :mod:`targetcause.tmle_ate` -- targeted maximum likelihood estimation of
  average and conditional average treatment effects with a Super Learner
  ensemble for the nuisance fits.
- :mod:`targetcause.tmle_mediation` -- two-stage targeted estimation of
  natural direct and indirect effects.
- :mod:`targetcause.sem_path` -- maximum-likelihood path analysis for
  recursive linear models on observed variables, with delta-method and
  bootstrap inference for derived effects.
- :mod:`targetcause.sim` -- data-generating processes, truth oracles and a
  reproducible Monte Carlo grid comparing the estimators.
"""

from targetcause.core import (
    Dataset,
    ScaleMap,
    SeedStream,
    TmleReport,
    derive_substream,
    read_dataset_csv,
    scale_outcome,
    unscale_difference,
    validate_dataset,
)
from targetcause.learners import LearnerSpec
from targetcause.super_learner import SuperLearnerModel, fit_super_learner, predict_sl
from targetcause.tmle_ate import AteOptions, estimate_ate, estimate_cate_stratified, regression_ate
from targetcause.tmle_mediation import MediationOptions, estimate_nde_nie
from targetcause.sem_path import PathModel, fit_path_model, parse_path_model

__all__ = [
    "AteOptions",
    "Dataset",
    "LearnerSpec",
    "MediationOptions",
    "PathModel",
    "ScaleMap",
    "SeedStream",
    "SuperLearnerModel",
    "TmleReport",
    "derive_substream",
    "estimate_ate",
    "estimate_cate_stratified",
    "estimate_nde_nie",
    "fit_path_model",
    "fit_super_learner",
    "parse_path_model",
    "predict_sl",
    "read_dataset_csv",
    "regression_ate",
    "scale_outcome",
    "unscale_difference",
    "validate_dataset",
]

__version__ = "0.1.0"
