"""Choosing one action out of K stochastic candidates."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .conformal import ConformalCalibration, calibrated_bounds
from .core import ActionVector, CandidateAction, InvalidInputError
from .quantile import QuantileModel


class Strategy(str, enum.Enum):
    CQR = "cqr"
    DEFAULT = "default"
    RANDOM = "random"
    MEAN = "mean"


@dataclass(frozen=True)
class SelectionResult:
    chosen_index: int
    chosen_action: ActionVector
    strategy: Strategy
    scores: tuple = field(default_factory=tuple)


def _check_candidates(candidates: Sequence[CandidateAction]) -> None:
    if len(candidates) == 0:
        raise InvalidInputError("candidate list is empty")
    dims = {c.embedding.shape[0] for c in candidates}
    if len(dims) != 1:
        raise InvalidInputError(f"candidates mix embedding dimensions {sorted(dims)}")


def score_candidates(model: QuantileModel, calibration: ConformalCalibration,
                     candidates: Sequence[CandidateAction]) -> list:
    """Calibrated error bound for every candidate, in input order."""
    _check_candidates(candidates)
    Z = np.stack([c.embedding for c in candidates])
    A = np.array([c.action for c in candidates], dtype=np.float64)
    return calibrated_bounds(model, calibration, Z, A).tolist()


def select_cqr(candidates: Sequence[CandidateAction], scores: Sequence[float]) -> SelectionResult:
    """Pick the candidate with the smallest calibrated bound (first one on ties)."""
    if len(candidates) == 0 or len(scores) != len(candidates):
        raise InvalidInputError(
            f"need one score per candidate, got {len(scores)} scores for {len(candidates)} candidates"
        )
    k = int(np.argmin(np.asarray(scores, dtype=np.float64)))
    return SelectionResult(k, candidates[k].action, Strategy.CQR, tuple(float(s) for s in scores))


def select_default(candidates: Sequence[CandidateAction]) -> SelectionResult:
    _check_candidates(candidates)
    return SelectionResult(0, candidates[0].action, Strategy.DEFAULT)


def select_random(candidates: Sequence[CandidateAction], seed) -> SelectionResult:
    _check_candidates(candidates)
    k = int(np.random.default_rng(seed).integers(len(candidates)))
    return SelectionResult(k, candidates[k].action, Strategy.RANDOM)


def select_mean(candidates: Sequence[CandidateAction]) -> SelectionResult:
    """Componentwise average of all candidates, gripper included; index is -1."""
    _check_candidates(candidates)
    A = np.array([c.action for c in candidates], dtype=np.float64)
    return SelectionResult(-1, ActionVector.from_array(A.mean(axis=0)), Strategy.MEAN)


def select(strategy, candidates: Sequence[CandidateAction], *, model=None, calibration=None,
           seed=None) -> SelectionResult:
    strategy = Strategy(strategy)
    if strategy is Strategy.CQR:
        if model is None or calibration is None:
            raise InvalidInputError("the cqr strategy needs a model and a calibration")
        return select_cqr(candidates, score_candidates(model, calibration, candidates))
    if strategy is Strategy.DEFAULT:
        return select_default(candidates)
    if strategy is Strategy.RANDOM:
        return select_random(candidates, seed)
    return select_mean(candidates)
