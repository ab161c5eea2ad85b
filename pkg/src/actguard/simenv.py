"""Synthetic stochastic-policy environment.

A bounded point-reaching task in the 8-dim state space. A hidden expert
controller supplies ground-truth actions; the "policy" perturbs the expert
action with seeded latent noise and exposes an embedding that partially
reveals the noise magnitude. Episodes succeed when the end effector enters the
target ball and fail when any pose axis leaves the workspace or time runs out.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .core import (
    ACTION_DIM,
    DEFAULT_EMBEDDING_DIM,
    STATE_DIM,
    ActionVector,
    CandidateAction,
    InvalidConfigError,
    InvalidInputError,
    Outcome,
    StateVector,
    TargetKind,
    Trajectory,
    TrajectoryStep,
    pairwise_targets,
)
from .selector import Strategy, score_candidates, select

_POSE = 6


@dataclass(frozen=True)
class EnvConfig:
    workspace_low: tuple = (-1.0, -1.0, 0.0, -0.6, -0.6, -0.6)
    workspace_high: tuple = (1.0, 1.0, 1.0, 0.6, 0.6, 0.6)
    start_low: tuple = (-0.5, -0.5, 0.55)
    start_high: tuple = (0.5, 0.5, 0.8)
    goal_low: tuple = (-0.4, -0.4, 0.1)
    goal_high: tuple = (0.4, 0.4, 0.15)
    start_tilt: float = 0.1
    target_region_radius: float = 0.06
    max_steps: int = 40
    expert_step_gain: float = 0.3
    max_step: float = 0.25
    candidate_noise_sigma: float = 0.35
    demo_noise_sigma: float = 0.06
    orientation_sensor_sigma: float = 0.02
    embedding_dim: int = DEFAULT_EMBEDDING_DIM
    embedding_noise_sigma: float = 0.15
    ood_drift: tuple = (0.0,) * STATE_DIM
    ood_onset_step: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        for name in ("workspace_low", "workspace_high", "start_low", "start_high",
                     "goal_low", "goal_high", "ood_drift"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if len(self.workspace_low) != _POSE or len(self.workspace_high) != _POSE:
            raise InvalidConfigError("workspace bounds need six axes (position and rotation)")
        if any(lo >= hi for lo, hi in zip(self.workspace_low, self.workspace_high)):
            raise InvalidConfigError("workspace bounds must satisfy low < high on every axis")
        if len(self.ood_drift) != STATE_DIM:
            raise InvalidConfigError("ood_drift needs eight components")
        if self.max_steps < 1:
            raise InvalidConfigError("max_steps must be at least 1")
        if not 0.0 < self.expert_step_gain <= 1.0:
            raise InvalidConfigError("expert_step_gain must lie in (0, 1]")
        if self.target_region_radius <= 0 or self.max_step <= 0:
            raise InvalidConfigError("target radius and step limit must be positive")
        if min(self.candidate_noise_sigma, self.embedding_noise_sigma, self.demo_noise_sigma,
               self.orientation_sensor_sigma) < 0:
            raise InvalidConfigError("noise scales must be non-negative")
        if self.embedding_dim < 2:
            raise InvalidConfigError("embedding_dim must be at least 2")

    def with_ood(self, drift, onset: int) -> "EnvConfig":
        return replace(self, ood_drift=tuple(drift), ood_onset_step=onset)

    def clean(self) -> "EnvConfig":
        return replace(self, ood_drift=(0.0,) * STATE_DIM, ood_onset_step=None)


class PolicyMode(str, enum.Enum):
    EXPERT = "expert"
    STOCHASTIC = "stochastic"


@dataclass(frozen=True)
class PolicyHandle:
    env_config: EnvConfig
    mode: PolicyMode = PolicyMode.STOCHASTIC
    _leak: np.ndarray = field(init=False, repr=False, compare=False)
    _state_proj: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "mode", PolicyMode(self.mode))
        L = self.env_config.embedding_dim
        rng = np.random.default_rng([self.env_config.seed, 7919])
        half = L // 2
        leak = np.zeros(L)
        # First half of the embedding carries the noise magnitude, the rest only state features.
        leak[:half] = np.sort(rng.uniform(0.5, 1.5, size=half))[::-1]
        object.__setattr__(self, "_leak", leak)
        object.__setattr__(self, "_state_proj", rng.normal(0.0, 1.0, size=(STATE_DIM, L)))


def _rng(*keys) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in keys])


def expert_action(config: EnvConfig, state, goal) -> ActionVector:
    return ActionVector.from_array(_expert(config, np.asarray(state, dtype=np.float64),
                                          np.asarray(goal, dtype=np.float64)))


def _expert(config: EnvConfig, state: np.ndarray, goal: np.ndarray) -> np.ndarray:
    a = np.zeros(ACTION_DIM)
    a[:3] = config.expert_step_gain * (goal[:3] - state[:3])
    a[3:6] = -config.expert_step_gain * state[3:6]
    np.clip(a[:6], -config.max_step, config.max_step, out=a[:6])
    near = np.linalg.norm(goal[:3] - state[:3]) < 2.0 * config.target_region_radius
    a[6] = 1.0 if near else 0.0
    return a


def _embed(policy: PolicyHandle, state: np.ndarray, magnitude: np.ndarray,
           rng: np.random.Generator) -> np.ndarray:
    cfg = policy.env_config
    features = np.tanh(state @ policy._state_proj)
    noise = rng.normal(0.0, cfg.embedding_noise_sigma, size=(magnitude.size, cfg.embedding_dim))
    return magnitude[:, None] * policy._leak[None, :] + 0.3 * features[None, :] + noise


def _candidates(policy: PolicyHandle, state: np.ndarray, goal: np.ndarray, K: int, seed):
    cfg = policy.env_config
    rng = np.random.default_rng(seed)
    expert = _expert(cfg, state, goal)
    sigma = cfg.candidate_noise_sigma if policy.mode is PolicyMode.STOCHASTIC else 0.0
    eps = rng.normal(0.0, 1.0, size=K) * sigma
    direction = rng.normal(size=(K, ACTION_DIM))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    actions = expert[None, :] + eps[:, None] * direction
    magnitude = np.abs(eps) / sigma if sigma > 0 else np.zeros(K)
    emb = _embed(policy, state, magnitude, rng)
    return actions, emb, expert


def sample_candidates(policy: PolicyHandle, state, goal, K: int, seed) -> list:
    """K noisy versions of the expert action, each with its latent embedding."""
    if K < 1:
        raise InvalidInputError("K must be at least 1")
    actions, emb, _ = _candidates(policy, np.asarray(state, dtype=np.float64),
                                  np.asarray(goal, dtype=np.float64), K, seed)
    return [CandidateAction(ActionVector.from_array(a), e) for a, e in zip(actions, emb)]


def initial_conditions(config: EnvConfig, episode_seed: int):
    """Start state and goal (8-vectors) of an episode."""
    rng = _rng(config.seed, episode_seed, 1)
    state = np.zeros(STATE_DIM)
    state[:3] = rng.uniform(config.start_low, config.start_high)
    state[3:6] = rng.uniform(-config.start_tilt, config.start_tilt, size=3)
    state[6] = math.cos(np.linalg.norm(state[3:6]) / 2.0)
    goal = np.zeros(STATE_DIM)
    goal[:3] = rng.uniform(config.goal_low, config.goal_high)
    goal[6] = 1.0
    return state, goal


def _in_bounds(config: EnvConfig, state: np.ndarray) -> bool:
    pose = state[:_POSE]
    return bool(np.all(pose >= config.workspace_low) and np.all(pose <= config.workspace_high))


@dataclass
class RolloutRecord:
    """Full per-episode record; the trajectory plus the data needed for regression rows."""

    trajectory: Trajectory
    goal: np.ndarray
    final_state: np.ndarray
    termination: str  # "target", "bounds", "timeout" or "halted"
    candidate_actions: list
    candidate_embeddings: list
    expert_actions: list


def rollout(policy: PolicyHandle, strategy=Strategy.DEFAULT, detector=None, seed: int = 0, *,
            K: int = 10, model=None, calibration=None, halt_on_unsafe: bool = True):
    """Run one receding-horizon episode and return its :class:`Trajectory`.

    Every step samples K candidates, picks one with ``strategy``, executes it
    with process noise, then checks the workspace bounds and target region.
    With a ``detector`` (an :class:`actguard.smd.Detector`) the state is
    checked before acting; its distance is logged and, with ``halt_on_unsafe``,
    the episode stops on an unsafe verdict (``halted=True``, outcome failure).
    """
    return simulate(policy, strategy, detector, seed, K=K, model=model, calibration=calibration,
                    halt_on_unsafe=halt_on_unsafe).trajectory


def simulate(policy: PolicyHandle, strategy=Strategy.DEFAULT, detector=None, seed: int = 0, *,
             K: int = 10, model=None, calibration=None, halt_on_unsafe: bool = True) -> RolloutRecord:
    """Like :func:`rollout` but also returns the terminal state and every candidate."""
    cfg = policy.env_config
    strategy = Strategy(strategy)
    if K < 1:
        raise InvalidInputError("K must be at least 1")
    if policy.mode is PolicyMode.EXPERT:
        K = 1
    state, goal = initial_conditions(cfg, seed)
    noise_rng = _rng(cfg.seed, seed, 2)
    process_sigma = 0.1 * cfg.candidate_noise_sigma
    if policy.mode is PolicyMode.EXPERT:
        process_sigma = math.hypot(process_sigma, cfg.demo_noise_sigma)
    drift = np.asarray(cfg.ood_drift)
    offset = np.zeros(2)  # accumulated drift on the orientation scalar and gripper channels
    grip = 0.0

    steps, cand_actions, cand_embs, experts = [], [], [], []
    outcome, halted, termination = Outcome.FAILURE, False, "timeout"
    for t in range(cfg.max_steps):
        actions, emb, expert = _candidates(policy, state, goal, K, [cfg.seed, seed, 3, t])
        candidates = [CandidateAction(ActionVector(*a), e) for a, e in zip(actions, emb)]
        scores = []
        if model is not None and calibration is not None:
            scores = score_candidates(model, calibration, candidates)
        if strategy is Strategy.CQR:
            result = select(strategy, candidates, model=model, calibration=calibration)
        else:
            result = select(strategy, candidates, seed=[cfg.seed, seed, 4, t])
        uncertainty = None
        if scores and result.chosen_index >= 0:
            uncertainty = max(float(scores[result.chosen_index]), 0.0)
        smd_score = detector.distance(state) if detector is not None else None
        steps.append(TrajectoryStep(StateVector(*state), result.chosen_action, [],
                                    list(scores), uncertainty, smd_score))
        cand_actions.append(actions)
        cand_embs.append(emb)
        experts.append(expert)
        if halt_on_unsafe and detector is not None and smd_score > detector.threshold.value:
            halted, termination = True, "halted"
            break

        executed = np.asarray(result.chosen_action) + noise_rng.normal(0.0, process_sigma, ACTION_DIM)
        nxt = state.copy()
        nxt[:6] += executed[:6]
        grip = 1.0 if executed[6] >= 0.5 else 0.0
        if cfg.ood_onset_step is not None and t >= cfg.ood_onset_step:
            nxt[:6] += drift[:6]
            offset += drift[6:]
        nxt[6] = (math.cos(np.linalg.norm(nxt[3:6]) / 2.0) + offset[0]
                  + noise_rng.normal(0.0, cfg.orientation_sensor_sigma))
        nxt[7] = grip + offset[1]
        state = nxt
        if not _in_bounds(cfg, state):
            termination = "bounds"
            break
        if np.linalg.norm(state[:3] - goal[:3]) < cfg.target_region_radius:
            outcome, termination = Outcome.SUCCESS, "target"
            break

    traj = Trajectory(steps, outcome, seed, halted=halted,
                      ood=cfg.ood_onset_step is not None and bool(np.any(drift)))
    return RolloutRecord(traj, goal, state, termination, cand_actions, cand_embs, experts)


def expert_states(config: EnvConfig, seeds: Sequence[int]) -> np.ndarray:
    """States visited by the expert controller (with process noise) from each seed."""
    policy = PolicyHandle(config.clean(), PolicyMode.EXPERT)
    rows = []
    for s in seeds:
        traj = rollout(policy, Strategy.DEFAULT, seed=s, K=1)
        rows.extend(step.state for step in traj.steps)
    return np.array(rows, dtype=np.float64)


@dataclass
class Dataset:
    """Output of :func:`generate_dataset`.

    ``regression`` rows are dicts ``{episode, step, cand, z, a_hat, a_gt, d_a}``.
    """

    regression: list
    expert_states: np.ndarray
    trajectories: list


def generate_dataset(config: EnvConfig, n_episodes: int, seeds: Optional[Sequence[int]] = None,
                     K: int = 10) -> Dataset:
    """Roll out the stochastic policy (executing the first sample) and log every candidate."""
    if n_episodes < 1:
        raise InvalidInputError("n_episodes must be at least 1")
    seeds = list(range(n_episodes)) if seeds is None else [int(s) for s in seeds][:n_episodes]
    if len(seeds) < n_episodes:
        raise InvalidInputError("fewer seeds than episodes")
    policy = PolicyHandle(config, PolicyMode.STOCHASTIC)
    regression, trajectories = [], []
    for s in seeds:
        rec = simulate(policy, Strategy.DEFAULT, None, s, K=K)
        trajectories.append(rec.trajectory)
        for t, (acts, embs, exp) in enumerate(zip(rec.candidate_actions, rec.candidate_embeddings,
                                                  rec.expert_actions)):
            d_a = pairwise_targets(TargetKind.DISTANCE7, acts, np.broadcast_to(exp, acts.shape))
            for i in range(acts.shape[0]):
                regression.append({"episode": s, "step": t, "cand": i, "z": embs[i],
                                   "a_hat": acts[i], "a_gt": exp, "d_a": float(d_a[i])})
    return Dataset(regression, expert_states(config, seeds), trajectories)


def regression_arrays(rows: Sequence[dict]):
    """``(Z, A_hat, A_gt)`` arrays from regression rows."""
    if not rows:
        raise InvalidInputError("no regression rows")
    Z = np.array([r["z"] for r in rows], dtype=np.float64)
    A = np.array([r["a_hat"] for r in rows], dtype=np.float64)
    G = np.array([r["a_gt"] for r in rows], dtype=np.float64)
    return Z, A, G
