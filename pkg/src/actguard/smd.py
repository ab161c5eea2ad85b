"""State Mahalanobis distance (SMD) failure detection.

A Gaussian is fitted to expert states; at runtime a state is flagged unsafe
when its Mahalanobis distance to that Gaussian exceeds a calibrated
threshold. Thresholds come either from a percentile of calibration
distances or from a Youden-J sweep over labelled episodes.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cholesky, solve_triangular, LinAlgError

from .core import STATE_DIM, InvalidInputError, Outcome, as_state_array, nearest_rank


class SingularCovarianceError(np.linalg.LinAlgError):
    pass


class SingleClassError(InvalidInputError):
    """Both successful and failed runs are required."""


class Verdict(str, enum.Enum):
    SAFE = "safe"
    UNSAFE = "unsafe"


class ThresholdSource(str, enum.Enum):
    PERCENTILE = "percentile"
    YOUDEN = "youden"


@dataclass(frozen=True)
class GaussianStateModel:
    mean: np.ndarray
    covariance: np.ndarray
    ridge: float
    sample_count: int
    cholesky_factor: np.ndarray

    @classmethod
    def from_moments(cls, mean, covariance, ridge: float = 0.0, sample_count: int = 2):
        mean = np.asarray(mean, dtype=np.float64)
        cov = np.asarray(covariance, dtype=np.float64)
        if not np.allclose(cov, cov.T, atol=1e-10, rtol=0):
            raise InvalidInputError("covariance must be symmetric")
        if ridge < 0:
            raise InvalidInputError("ridge must be non-negative")
        reg = cov + ridge * np.eye(cov.shape[0])
        try:
            factor = cholesky(reg, lower=True)
        except LinAlgError as exc:
            raise SingularCovarianceError(
                f"covariance plus ridge {ridge:g} is not positive definite; use a larger ridge"
            ) from exc
        return cls(mean, cov, float(ridge), int(sample_count), factor)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "covariance": self.covariance.ravel().tolist(),
                "ridge": self.ridge, "sample_count": self.sample_count}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianStateModel":
        mean = np.asarray(d["mean"], dtype=np.float64)
        cov = np.asarray(d["covariance"], dtype=np.float64).reshape(mean.size, mean.size)
        return cls.from_moments(mean, cov, float(d["ridge"]), int(d["sample_count"]))


@dataclass(frozen=True)
class SafetyThreshold:
    value: float
    quantile_level: float
    source: ThresholdSource = ThresholdSource.PERCENTILE


@dataclass(frozen=True)
class YoudenResult:
    best_confidence: float
    threshold: float
    j_score: float
    tpr: float
    fpr: float
    fpr_penalty: float
    curve: tuple = ()

    def as_threshold(self) -> SafetyThreshold:
        return SafetyThreshold(self.threshold, self.best_confidence, ThresholdSource.YOUDEN)


def fit_gaussian(states, ridge: Optional[float] = None) -> GaussianStateModel:
    """Fit mean and unbiased covariance of expert states.

    ``ridge=None`` uses ``1e-6 * trace(cov) / dim``, added unconditionally.
    """
    S = np.asarray(states, dtype=np.float64)
    if S.ndim != 2 or S.shape[1] != STATE_DIM:
        raise InvalidInputError(f"states must be an (N, {STATE_DIM}) array")
    if S.shape[0] < 2:
        raise InvalidInputError("at least two states are needed to fit a covariance")
    if not np.all(np.isfinite(S)):
        raise InvalidInputError("states contain non-finite values")
    mean = S.mean(axis=0)
    centered = S - mean
    cov = centered.T @ centered / (S.shape[0] - 1)
    cov = 0.5 * (cov + cov.T)
    if ridge is None:
        ridge = 1e-6 * np.trace(cov) / STATE_DIM
    return GaussianStateModel.from_moments(mean, cov, ridge, S.shape[0])


def mahalanobis_batch(model: GaussianStateModel, states) -> np.ndarray:
    S = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if not np.all(np.isfinite(S)):
        raise InvalidInputError("state contains non-finite values")
    # L y = (s - mu)  =>  ||y||^2 = (s - mu)^T (L L^T)^-1 (s - mu)
    y = solve_triangular(model.cholesky_factor, (S - model.mean).T, lower=True)
    return np.sqrt(np.einsum("ij,ij->j", y, y))


def mahalanobis(model: GaussianStateModel, state) -> float:
    return float(mahalanobis_batch(model, as_state_array(state)[None, :])[0])


def fit_threshold(distances: Sequence[float], gamma: float = 0.99) -> SafetyThreshold:
    """Nearest-rank ``gamma`` percentile of calibration distances."""
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise InvalidInputError("no calibration distances")
    if not 0.0 < gamma <= 1.0:
        raise InvalidInputError("gamma must lie in (0, 1]")
    k = nearest_rank(gamma, d.size)
    return SafetyThreshold(float(np.partition(d, k - 1)[k - 1]), float(gamma))


def monitor(model: GaussianStateModel, threshold: SafetyThreshold, state) -> Verdict:
    if mahalanobis(model, state) > threshold.value:
        return Verdict.UNSAFE
    return Verdict.SAFE


def tune_threshold_youden(labeled_runs, confidence_grid: Sequence[float], fpr_penalty: float = 2.0,
                          threshold_from: str = "success") -> YoudenResult:
    """Sweep confidence levels and keep the one maximising ``TPR - penalty * FPR``.

    ``labeled_runs`` is a sequence of ``(max_distance, outcome)``; failures are
    the positive class. Per level the threshold is the nearest-rank percentile
    of success-run distances (``threshold_from="all"`` uses every run). Ties in
    J go to the larger level.
    """
    if len(confidence_grid) == 0:
        raise InvalidInputError("confidence grid is empty")
    if threshold_from not in ("success", "all"):
        raise InvalidInputError("threshold_from must be 'success' or 'all'")
    dist = np.array([float(d) for d, _ in labeled_runs])
    failed = np.array([Outcome(o) is Outcome.FAILURE for _, o in labeled_runs])
    n_pos = int(failed.sum())
    n_neg = int((~failed).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("Youden tuning needs both successful and failed runs")
    pool = dist[~failed] if threshold_from == "success" else dist

    best = None
    curve = []
    for tau in confidence_grid:
        t = fit_threshold(pool, tau).value
        flagged = dist > t
        tpr = np.count_nonzero(flagged & failed) / n_pos
        fpr = np.count_nonzero(flagged & ~failed) / n_neg
        j = tpr - fpr_penalty * fpr
        curve.append((float(tau), t, j, tpr, fpr))
        if best is None or j > best[2] or (j == best[2] and tau > best[0]):
            best = (float(tau), t, j, tpr, fpr)
    tau, t, j, tpr, fpr = best
    return YoudenResult(tau, t, float(j), float(tpr), float(fpr), float(fpr_penalty), tuple(curve))


@dataclass(frozen=True)
class Detector:
    """A fitted Gaussian together with its threshold; the serialised detector artifact."""

    model: GaussianStateModel
    threshold: SafetyThreshold

    def distance(self, state) -> float:
        return mahalanobis(self.model, state)

    def verdict(self, state) -> Verdict:
        return monitor(self.model, self.threshold, state)

    def to_dict(self) -> dict:
        d = self.model.to_dict()
        d.update(threshold=self.threshold.value, quantile_level=self.threshold.quantile_level,
                 threshold_source=self.threshold.source.value)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Detector":
        source = ThresholdSource(d.get("threshold_source", "percentile"))
        return cls(GaussianStateModel.from_dict(d),
                   SafetyThreshold(float(d["threshold"]), float(d["quantile_level"]), source))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "Detector":
        return cls.from_dict(json.loads(Path(path).read_text()))
