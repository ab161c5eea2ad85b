"""Runtime reliability layer for stochastic robot policies.

Conformalized quantile regression scores each sampled action with a
calibrated upper bound on its error, the lowest-bound candidate is executed,
and a Mahalanobis-distance monitor flags states that leave the expert
distribution.
"""

from .conformal import (
    ConformalCalibration,
    InsufficientCalibrationError,
    calibrate,
    calibrated_bound,
    conformal_offset,
    conformity_scores,
)
from .core import (
    ActionVector,
    CandidateAction,
    DegenerateInputError,
    InvalidConfigError,
    InvalidInputError,
    Outcome,
    RegressionSample,
    StateVector,
    TargetKind,
    Trajectory,
    TrajectoryStep,
    action_error,
    target_cosine,
    target_distance6,
)
from .metrics import OutcomeScore, cohens_d_from_a12, roc_auc, spearman_rho, vargha_delaney_a12
from .quantile import QuantileModel, TrainConfig, batch_loss, pinball_loss, predict, train
from .selector import SelectionResult, Strategy, score_candidates, select_cqr
from .smd import Detector, GaussianStateModel, fit_gaussian, fit_threshold, mahalanobis, monitor

__version__ = "0.1.0"

__all__ = [
    "ActionVector",
    "CandidateAction",
    "ConformalCalibration",
    "DegenerateInputError",
    "Detector",
    "GaussianStateModel",
    "InsufficientCalibrationError",
    "InvalidConfigError",
    "InvalidInputError",
    "Outcome",
    "OutcomeScore",
    "QuantileModel",
    "RegressionSample",
    "SelectionResult",
    "StateVector",
    "Strategy",
    "TargetKind",
    "TrainConfig",
    "Trajectory",
    "TrajectoryStep",
    "action_error",
    "batch_loss",
    "calibrate",
    "calibrated_bound",
    "cohens_d_from_a12",
    "conformal_offset",
    "conformity_scores",
    "fit_gaussian",
    "fit_threshold",
    "mahalanobis",
    "monitor",
    "pinball_loss",
    "predict",
    "roc_auc",
    "score_candidates",
    "select_cqr",
    "spearman_rho",
    "target_cosine",
    "target_distance6",
    "train",
    "vargha_delaney_a12",
]
