"""Metrics relating episode-level uncertainty scores to task outcomes.

Failures are the positive class throughout. ``failure_exceeds`` is the
probability that a failed episode scores higher than a successful one (ties
half-counted); it is reported as AUC, and ``1 - failure_exceeds`` is the
lower-is-better A12 column of the report table.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .core import InvalidInputError, Outcome
from .smd import SingleClassError


class UndefinedCorrelationError(InvalidInputError):
    pass


@dataclass(frozen=True)
class OutcomeScore:
    score: float
    outcome: Outcome

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise InvalidInputError("score must be finite")
        object.__setattr__(self, "outcome", Outcome(self.outcome))


def _split(pairs: Sequence[OutcomeScore]):
    scores = np.array([p.score for p in pairs], dtype=np.float64)
    failed = np.array([p.outcome is Outcome.FAILURE for p in pairs], dtype=bool)
    return scores, failed


def spearman_rho(pairs: Sequence[OutcomeScore]) -> float:
    """Rank correlation of score against outcome (success = 1, failure = 0)."""
    if len(pairs) < 2:
        raise UndefinedCorrelationError("need at least two pairs")
    scores, failed = _split(pairs)
    success = (~failed).astype(np.float64)
    if np.all(scores == scores[0]) or np.all(success == success[0]):
        raise UndefinedCorrelationError("correlation is undefined for constant input")
    rs = rankdata(scores) - (len(scores) + 1) / 2.0
    ro = rankdata(success) - (len(scores) + 1) / 2.0
    return float(np.clip(np.dot(rs, ro) / np.sqrt(np.dot(rs, rs) * np.dot(ro, ro)), -1.0, 1.0))


def vargha_delaney_a12(failure_scores: Sequence[float], success_scores: Sequence[float]) -> float:
    """P(failure score > success score) + 0.5 P(equal), via the rank-sum identity."""
    f = np.asarray(failure_scores, dtype=np.float64)
    s = np.asarray(success_scores, dtype=np.float64)
    if f.size == 0 or s.size == 0:
        raise InvalidInputError("both groups must be non-empty")
    ranks = rankdata(np.concatenate([f, s]))
    rank_sum = ranks[: f.size].sum()
    u = rank_sum - f.size * (f.size + 1) / 2.0
    return float(u / (f.size * s.size))


def cohens_d_from_a12(a12: float) -> float:
    if not 0.0 <= a12 <= 1.0:
        raise InvalidInputError("A12 must lie in [0, 1]")
    return 2.0 * abs(a12 - 0.5)


def roc_auc(pairs: Sequence[OutcomeScore]) -> float:
    scores, failed = _split(pairs)
    if failed.all() or not failed.any():
        raise SingleClassError("AUC needs both failed and successful episodes")
    return vargha_delaney_a12(scores[failed], scores[~failed])


@dataclass(frozen=True)
class MetricReport:
    score_kind: str
    n_episodes: int
    n_failures: int
    rho: float
    abs_rho: float
    a12_low: float
    failure_exceeds: float
    cohens_d: float
    auc: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)

    def table(self) -> str:
        header = f"{'score':<10}{'|rho|':>9}{'A12':>9}{'d':>9}{'AUC':>9}"
        row = (f"{self.score_kind:<10}{self.abs_rho:>9.3f}{self.a12_low:>9.3f}"
               f"{self.cohens_d:>9.3f}{self.auc:>9.3f}")
        return header + "\n" + row


def evaluate(pairs: Sequence[OutcomeScore], score_kind: str = "score") -> MetricReport:
    scores, failed = _split(pairs)
    rho = spearman_rho(pairs)
    fe = roc_auc(pairs)
    return MetricReport(score_kind, len(pairs), int(failed.sum()), rho, abs(rho), 1.0 - fe,
                        fe, cohens_d_from_a12(fe), fe)
