"""Explicit-space functional Bayesian filtering with Koopman baselines."""
__version__ = "0.1.0"

from .errors import (  # noqa: E402
    CapacityError,
    ExpFBFError,
    InvalidInputError,
    NumericFailure,
    RankDeficiencyError,
    RuleQualityError,
)
from .features import (  # noqa: E402
    FourierFeatureMap,
    QuadratureRule,
    TaylorFeatureMap,
    enumerate_multi_indices,
    gauss_hermite_rule,
    make_gq_map,
    nnls_rule,
)
from .fbf import FilterConfig, FilterModel, init_filter, load_model, run_sequence, save_model  # noqa: E402
from .koopman import DmdModel, ObservableSet, dmd_fit, fit_observables, koopman_predict  # noqa: E402
from .dynamics import MgParams, NlsConfig, add_awgn, mackey_glass, nls_simulate  # noqa: E402

__all__ = [
    "CapacityError", "ExpFBFError", "InvalidInputError", "NumericFailure",
    "RankDeficiencyError", "RuleQualityError", "FourierFeatureMap", "QuadratureRule",
    "TaylorFeatureMap", "enumerate_multi_indices", "gauss_hermite_rule", "make_gq_map",
    "nnls_rule", "FilterConfig", "FilterModel", "init_filter", "load_model",
    "run_sequence", "save_model", "DmdModel", "ObservableSet", "dmd_fit",
    "fit_observables", "koopman_predict", "MgParams", "NlsConfig", "add_awgn",
    "mackey_glass", "nls_simulate",
]
