"""Fixed-effects selection in high-dimensional linear mixed models.

Implements a profiled focused-GMM selector that stays consistent when
covariates correlate with the model error, together with the penalized
maximum-likelihood and profiled least-squares baselines, second-stage
variance estimation, and a reproducible simulation harness.
"""

from .baselines import FitOptions, FitResult, fit_mple, fit_pls, gradient_at_truth
from .data import (
    ActiveSet,
    ConditioningError,
    CovStructure,
    DataError,
    DimensionError,
    GroupedDataset,
    InvalidParameterError,
    ModelParams,
    cov_blocks,
    log_likelihood,
    profile_quadratic,
    read_csv,
)
from .estimator import (
    AsymptoticDiag,
    GmmWeights,
    InstrumentError,
    InstrumentSet,
    asymptotic_diagnostics,
    fit_pfgmm,
    gmm_weights,
    make_instruments,
    moment_report,
    pfgmm_loss,
)
from .linalg import SpdBlock, eig_extrema, inv_sqrtm_spd, sqrtm_spd
from .penalties import Penalty, check_assumptions, parse_penalty
from .proxy import ProxySpec, build_proxy_cov
from .second_stage import (
    RankDeficiencyError,
    ReducedModel,
    blup,
    fit_reduced_ml,
    fit_reduced_reml,
    fit_residual_ml,
    prediction_error,
)
from .simulate import (
    EndoConfig,
    EndoSet,
    LambdaPolicy,
    SimConfig,
    generate,
    generate_with_endo,
    inject_level1,
    inject_level2,
    rep_metrics,
    run_study,
    run_sweep,
)
from .selection import bic, exbic, mple_bic_path, pfgmm_exbic_path

__version__ = "0.1.0"

__all__ = [
    "ActiveSet", "AsymptoticDiag", "ConditioningError", "CovStructure",
    "DataError", "DimensionError", "EndoConfig", "EndoSet", "FitOptions",
    "FitResult", "GmmWeights", "GroupedDataset", "InstrumentError",
    "InstrumentSet", "InvalidParameterError", "LambdaPolicy", "ModelParams",
    "Penalty", "ProxySpec", "RankDeficiencyError", "ReducedModel", "SimConfig",
    "SpdBlock", "asymptotic_diagnostics", "bic", "blup", "check_assumptions",
    "cov_blocks", "eig_extrema", "exbic", "fit_mple", "fit_pfgmm", "fit_pls",
    "fit_reduced_ml", "fit_reduced_reml", "fit_residual_ml", "generate",
    "generate_with_endo", "gmm_weights", "gradient_at_truth", "inject_level1",
    "inject_level2", "inv_sqrtm_spd", "log_likelihood", "make_instruments",
    "moment_report", "mple_bic_path", "parse_penalty", "pfgmm_exbic_path",
    "pfgmm_loss", "prediction_error", "profile_quadratic", "read_csv",
    "rep_metrics", "run_study", "run_sweep", "sqrtm_spd", "build_proxy_cov",
]
