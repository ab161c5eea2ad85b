"""Shared domain types and the elementary action error functions."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

ACTION_DIM = 7
STATE_DIM = 8
POSE_DIM = 6
DEFAULT_EMBEDDING_DIM = 16

# Guards ceil(q * n) against representation error, e.g. 0.99 * 100 = 99.00000000000001.
_RANK_EPS = 1e-9


class InvalidInputError(ValueError):
    """Raised when an argument violates a documented precondition."""


class DegenerateInputError(InvalidInputError):
    """Raised when an input makes the quantity undefined (e.g. a zero-norm vector)."""


class InvalidConfigError(ValueError):
    """Raised when a model, level or configuration value is unusable."""


class TargetKind(str, enum.Enum):
    """Which error quantity a quantile model regresses."""

    DISTANCE7 = "distance7"
    DISTANCE6 = "distance6"
    COSINE = "cosine"
    ACTION_INTERVAL = "action_interval"


class Outcome(str, enum.Enum):
    SUCCESS = "success"
    FAILURE = "failure"


class ActionVector(NamedTuple):
    """Delta end-effector command: three translations, three rotations, gripper."""

    dx: float
    dy: float
    dz: float
    dthx: float
    dthy: float
    dthz: float
    grip: float

    @classmethod
    def from_array(cls, values) -> "ActionVector":
        arr = _finite_vector(values, ACTION_DIM, "action")
        return cls(*(float(v) for v in arr))

    def to_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)


class StateVector(NamedTuple):
    """Robot state: position, orientation (three angles plus scalar part), gripper."""

    x: float
    y: float
    z: float
    thx: float
    thy: float
    thz: float
    w: float
    grip: float

    @classmethod
    def from_array(cls, values) -> "StateVector":
        arr = _finite_vector(values, STATE_DIM, "state")
        return cls(*(float(v) for v in arr))

    def to_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)


VectorLike = Union[ActionVector, StateVector, Sequence[float], np.ndarray]


@dataclass(frozen=True)
class CandidateAction:
    """One stochastic policy sample: the action and its latent embedding."""

    action: ActionVector
    embedding: np.ndarray

    def __post_init__(self):
        emb = np.asarray(self.embedding, dtype=np.float64)
        if emb.ndim != 1 or not np.all(np.isfinite(emb)):
            raise InvalidInputError("embedding must be a finite 1-D vector")
        emb.setflags(write=False)
        object.__setattr__(self, "embedding", emb)
        if not isinstance(self.action, ActionVector):
            object.__setattr__(self, "action", ActionVector.from_array(self.action))


@dataclass(frozen=True)
class RegressionSample:
    """A row of the error-regression dataset: features (embedding, predicted action)
    and the expert action they are compared against."""

    embedding: np.ndarray
    predicted_action: ActionVector
    expert_action: ActionVector

    def __post_init__(self):
        emb = np.asarray(self.embedding, dtype=np.float64)
        if emb.ndim != 1 or not np.all(np.isfinite(emb)):
            raise InvalidInputError("embedding must be a finite 1-D vector")
        emb.setflags(write=False)
        object.__setattr__(self, "embedding", emb)
        for name in ("predicted_action", "expert_action"):
            value = getattr(self, name)
            if not isinstance(value, ActionVector):
                object.__setattr__(self, name, ActionVector.from_array(value))


@dataclass
class TrajectoryStep:
    state: StateVector
    executed_action: ActionVector
    candidates: list = field(default_factory=list)
    scores: list = field(default_factory=list)
    uncertainty_score: Optional[float] = None
    smd_score: Optional[float] = None

    def __post_init__(self):
        if self.uncertainty_score is not None and self.uncertainty_score < 0:
            raise InvalidInputError("uncertainty_score must be non-negative")


@dataclass
class Trajectory:
    steps: list
    outcome: Outcome
    seed: int
    task_id: str = "reach"
    halted: bool = False
    ood: bool = False

    def __post_init__(self):
        if not self.steps:
            raise InvalidInputError("a trajectory needs at least one step")
        self.outcome = Outcome(self.outcome)


def _finite_vector(values, dim: int, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != (dim,):
        raise InvalidInputError(f"{what} must have exactly {dim} components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{what} contains non-finite values")
    return arr


def as_action_array(values: VectorLike) -> np.ndarray:
    return _finite_vector(values, ACTION_DIM, "action")


def as_state_array(values: VectorLike) -> np.ndarray:
    return _finite_vector(values, STATE_DIM, "state")


def nearest_rank(fraction: float, n: int) -> int:
    """1-based rank ``ceil(fraction * n)``, tolerant of float noise in the product."""
    return max(1, math.ceil(fraction * n - _RANK_EPS))


def action_error(predicted: VectorLike, expert: VectorLike) -> float:
    """Euclidean distance between two actions over all seven components."""
    return _scalar_target(TargetKind.DISTANCE7, predicted, expert)


def target_distance6(predicted: VectorLike, expert: VectorLike) -> float:
    """Euclidean distance over the six pose deltas; the gripper command is ignored."""
    return _scalar_target(TargetKind.DISTANCE6, predicted, expert)


def target_cosine(predicted: VectorLike, expert: VectorLike) -> float:
    return _scalar_target(TargetKind.COSINE, predicted, expert)


def _scalar_target(kind: TargetKind, predicted: VectorLike, expert: VectorLike) -> float:
    # Shares the vectorised path so per-sample and batch targets agree bit for bit.
    p = as_action_array(predicted)[None, :]
    e = as_action_array(expert)[None, :]
    return float(pairwise_targets(kind, p, e)[0])


def pairwise_targets(kind, predicted: np.ndarray, expert: np.ndarray) -> np.ndarray:
    """Vectorised versions of the target functions over rows of ``(n, 7)`` arrays.

    Returns shape ``(n,)`` for scalar targets and ``(n, 7)`` for ``action_interval``.
    """
    kind = TargetKind(kind)
    predicted = np.asarray(predicted, dtype=np.float64)
    expert = np.asarray(expert, dtype=np.float64)
    if kind is TargetKind.DISTANCE7:
        diff = predicted - expert
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))
    if kind is TargetKind.DISTANCE6:
        diff = (predicted - expert)[:, :POSE_DIM]
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))
    if kind is TargetKind.COSINE:
        denom = np.sqrt(np.einsum("ij,ij->i", predicted, predicted) * np.einsum("ij,ij->i", expert, expert))
        if np.any(denom == 0.0):
            raise DegenerateInputError("cosine similarity is undefined for a zero-norm action")
        return np.clip(np.einsum("ij,ij->i", predicted, expert) / denom, -1.0, 1.0)
    return expert.copy()
