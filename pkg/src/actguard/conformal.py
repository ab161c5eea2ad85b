"""Split-conformal calibration of a quantile model.

The offset is the ``ceil((n + 1)(1 - alpha))``-th smallest conformity score,
the finite-sample convention under which ``P(d <= bound) >= 1 - alpha`` holds
for exchangeable calibration and test points. Ties are resolved by order
statistics without interpolation.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import (
    InvalidConfigError,
    InvalidInputError,
    TargetKind,
    as_action_array,
    nearest_rank,
    pairwise_targets,
)
from .quantile import QuantileModel, _as_arrays


class InsufficientCalibrationError(ValueError):
    def __init__(self, n: int, miscoverage: float, minimum: int):
        super().__init__(
            f"{n} calibration scores cannot give a finite offset at miscoverage {miscoverage}; "
            f"at least {minimum} are needed"
        )
        self.n = n
        self.minimum = minimum


@dataclass(frozen=True)
class ConformalCalibration:
    offset: float
    miscoverage: float
    level: float
    calibration_size: int
    target_kind: TargetKind

    def __post_init__(self):
        if self.calibration_size < 1:
            raise InvalidConfigError("calibration_size must be at least 1")
        if not 0.0 < self.miscoverage < 1.0:
            raise InvalidConfigError("miscoverage must lie in (0, 1)")
        object.__setattr__(self, "target_kind", TargetKind(self.target_kind))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_kind"] = self.target_kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ConformalCalibration":
        return cls(float(d["offset"]), float(d["miscoverage"]), float(d["level"]),
                   int(d["calibration_size"]), d["target_kind"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "ConformalCalibration":
        return cls.from_dict(json.loads(Path(path).read_text()))


def minimum_calibration_size(miscoverage: float) -> int:
    """Smallest n with ``ceil((n + 1)(1 - alpha)) <= n``."""
    if not 0.0 < miscoverage < 1.0:
        raise InvalidConfigError("miscoverage must lie in (0, 1)")
    n = 1
    while nearest_rank(1.0 - miscoverage, n + 1) > n:
        n += 1
    return n


def _scalar_model(model: QuantileModel) -> None:
    if model.target_kind is TargetKind.ACTION_INTERVAL:
        raise InvalidConfigError("conformal calibration needs a scalar-target model")


def conformity_scores(model: QuantileModel, calib, level: Optional[float] = None) -> np.ndarray:
    """``S_j = target_j - predicted quantile_j`` for each calibration sample, in order."""
    _scalar_model(model)
    idx = model.level_index(level)
    Z, A, G = _as_arrays(calib)
    y = pairwise_targets(model.target_kind, A, G)
    return y - model.predict_batch(Z, A)[:, idx]


def conformal_offset(scores: Sequence[float], miscoverage: float) -> float:
    if not 0.0 < miscoverage < 1.0:
        raise InvalidConfigError("miscoverage must lie in (0, 1)")
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise InvalidInputError("scores must be a non-empty 1-D sequence")
    n = s.size
    k = nearest_rank(1.0 - miscoverage, n + 1)
    if k > n:
        raise InsufficientCalibrationError(n, miscoverage, minimum_calibration_size(miscoverage))
    return float(np.partition(s, k - 1)[k - 1])


def calibrate(model: QuantileModel, calib, miscoverage: float = 0.1,
              level: Optional[float] = None) -> ConformalCalibration:
    idx = model.level_index(level)
    scores = conformity_scores(model, calib, model.levels[idx])
    return ConformalCalibration(conformal_offset(scores, miscoverage), miscoverage,
                                model.levels[idx], int(scores.size), model.target_kind)


def _check_pair(model: QuantileModel, calibration: ConformalCalibration) -> int:
    _scalar_model(model)
    if model.target_kind is not calibration.target_kind:
        raise InvalidConfigError(
            f"model target {model.target_kind.value} does not match calibration "
            f"target {calibration.target_kind.value}"
        )
    return model.level_index(calibration.level)


def calibrated_bounds(model: QuantileModel, calibration: ConformalCalibration,
                      embeddings: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Vectorised :func:`calibrated_bound` over rows."""
    idx = _check_pair(model, calibration)
    return model.predict_batch(embeddings, actions)[:, idx] + calibration.offset


def calibrated_bound(model: QuantileModel, calibration: ConformalCalibration,
                     embedding, action) -> float:
    """Quantile prediction at the calibrated level shifted by the conformal offset."""
    emb = np.asarray(embedding, dtype=np.float64)
    if emb.ndim != 1:
        raise InvalidInputError("embedding must be a 1-D vector")
    a = as_action_array(action)
    return float(calibrated_bounds(model, calibration, emb[None, :], a[None, :])[0])


def empirical_coverage(model: QuantileModel, calibration: ConformalCalibration, samples) -> float:
    """Fraction of samples whose true target lies at or below the calibrated bound."""
    Z, A, G = _as_arrays(samples)
    y = pairwise_targets(model.target_kind, A, G)
    return float(np.mean(y <= calibrated_bounds(model, calibration, Z, A)))


def split_indices(n: int, train_frac: float = 0.7, seed: int = 0):
    """Seeded shuffle of ``range(n)`` into (train, calibration) index arrays."""
    if not 0.0 < train_frac < 1.0:
        raise InvalidConfigError("train_frac must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(n)
    cut = int(round(train_frac * n))
    return np.sort(order[:cut]), np.sort(order[cut:])
