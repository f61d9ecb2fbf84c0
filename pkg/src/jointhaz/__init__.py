"""Joint models for a longitudinal marker and a time-to-event outcome.

The package fits, by maximum likelihood, a linear mixed model for a
repeatedly measured covariate linked to a proportional-hazards model through
an association parameter, alongside the classical carried-forward Cox model
and the two-stage plug-in approach.  It also decomposes covariate effects,
produces dynamic survival predictions and simulates data with known truth.
"""

from .data import (
    DataError,
    Dataset,
    Schema,
    StandardizationReport,
    SubjectHistory,
    gender_attitudes_index,
    household_work_index,
    load_csv,
    load_fixture,
    lvcf_value,
    rescale_time,
    standardize,
    write_csv,
)
from .joint import AssociationSpec, BaselineSpec, JointModel, JointSpec, aic, assoc_term, fit_joint, subject_loglik
from .lmm import LinearMixedModel, LmmSpec, fit_lmm, trajectory_slope, trajectory_value
from .predict import (
    Decomposition,
    DynamicPrediction,
    decompose,
    mse_harness,
    predict_survival,
    update_prediction,
)
from .sim import SimTruth, oracle_cumhaz, simulate
from .survcox import CoxPH, CoxSpec, breslow_baseline, fit_cox, fit_tvc_model
from .twostage import TwoStageModel, fit_twostage

__version__ = "0.1.0"

__all__ = [
    "AssociationSpec",
    "BaselineSpec",
    "CoxPH",
    "CoxSpec",
    "DataError",
    "Dataset",
    "Decomposition",
    "DynamicPrediction",
    "JointModel",
    "JointSpec",
    "LinearMixedModel",
    "LmmSpec",
    "Schema",
    "SimTruth",
    "StandardizationReport",
    "SubjectHistory",
    "TwoStageModel",
    "aic",
    "assoc_term",
    "breslow_baseline",
    "decompose",
    "fit_cox",
    "fit_joint",
    "fit_lmm",
    "fit_tvc_model",
    "fit_twostage",
    "gender_attitudes_index",
    "household_work_index",
    "load_csv",
    "load_fixture",
    "lvcf_value",
    "mse_harness",
    "oracle_cumhaz",
    "predict_survival",
    "rescale_time",
    "simulate",
    "standardize",
    "subject_loglik",
    "trajectory_slope",
    "trajectory_value",
    "update_prediction",
    "write_csv",
]
