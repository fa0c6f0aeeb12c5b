"""Efficient, doubly robust learning of multi-armed individualized treatment rules."""

from .coding import CodingMatrix, build_coding, decide, interaction_effects
from .dataio import Dataset, Scenario, read_csv, simulate, write_csv
from .errors import (
    DataError,
    DivergenceError,
    ELearnError,
    InvalidArgumentError,
    NumericalError,
    SingularSystemError,
)
from .evaluation import EvalReport, ipwe_value, regret_bound_check
from .learners import (
    FitOptions,
    ITRFit,
    fit_dlearning,
    fit_elearning,
    fit_method,
    fit_qlearning,
    fit_rdlearning,
    predict_itr,
)
from .score import DecisionModel

__all__ = [
    "CodingMatrix", "build_coding", "decide", "interaction_effects",
    "Dataset", "Scenario", "read_csv", "simulate", "write_csv",
    "DataError", "DivergenceError", "ELearnError", "InvalidArgumentError",
    "NumericalError", "SingularSystemError",
    "EvalReport", "ipwe_value", "regret_bound_check",
    "FitOptions", "ITRFit", "fit_dlearning", "fit_elearning", "fit_method",
    "fit_qlearning", "fit_rdlearning", "predict_itr",
    "DecisionModel",
]

__version__ = "0.1.0"
