"""Experiment configuration and on-disk formats (JSON artifacts, JSONL logs)."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np
import yaml

from .core import (
    InvalidConfigError,
    InvalidInputError,
    Outcome,
    StateVector,
    ActionVector,
    TargetKind,
    Trajectory,
    TrajectoryStep,
)
from .quantile import TrainConfig
from .simenv import EnvConfig

CONFIG_ENV_VAR = "ACTGUARD_CONFIG"


class DataFormatError(ValueError):
    def __init__(self, path, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.path = str(path)
        self.line = line


# -- configuration -----------------------------------------------------------

def _default_grid() -> tuple:
    return tuple(round(0.5 + 0.01 * i, 2) for i in range(50))


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    levels: tuple = (0.9,)
    target_kind: str = TargetKind.DISTANCE7.value
    miscoverage: float = 0.1
    K: int = 10
    gamma: float = 0.99
    fpr_penalty: float = 2.0
    confidence_grid: tuple = field(default_factory=_default_grid)
    threshold_from: str = "success"
    n_episodes: int = 200
    train_frac: float = 0.5
    calib_frac: float = 0.25
    regression_train_frac: float = 0.7
    n_ood_episodes: int = 40
    ood_drift: tuple = (0.0, 0.0, 0.0, 0.25, 0.0, 0.0, 0.0, 0.0)
    ood_onset_step: int = 1
    cqr_aggregate: str = "mean"
    smd_aggregate: str = "max"
    data_dir: str = "data"
    artifacts_dir: str = "artifacts"
    out_dir: str = "results"

    def __post_init__(self):
        if self.train_frac <= 0 or self.calib_frac <= 0 or self.train_frac + self.calib_frac > 1:
            raise InvalidConfigError("split fractions must be positive and sum to at most 1")
        if not 0 < self.miscoverage < 1:
            raise InvalidConfigError("miscoverage must lie in (0, 1)")
        if self.K < 1:
            raise InvalidConfigError("K must be at least 1")
        if len({self.data_dir, self.artifacts_dir, self.out_dir}) != 3:
            raise InvalidConfigError("data, artifacts and output paths must be distinct")
        for name in ("cqr_aggregate", "smd_aggregate"):
            if getattr(self, name) not in ("mean", "max"):
                raise InvalidConfigError(f"{name} must be 'mean' or 'max'")
        object.__setattr__(self, "levels", tuple(float(v) for v in self.levels))
        object.__setattr__(self, "confidence_grid", tuple(float(v) for v in self.confidence_grid))
        object.__setattr__(self, "ood_drift", tuple(float(v) for v in self.ood_drift))
        TargetKind(self.target_kind)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfigError(f"unknown config keys: {sorted(unknown)}")
        env = d.pop("env", {}) or {}
        train = d.pop("train", {}) or {}
        try:
            return cls(env=EnvConfig(**env), train=TrainConfig(**train), **d)
        except TypeError as exc:
            raise InvalidConfigError(str(exc)) from exc


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _parse_scalar(text: str):
    return yaml.safe_load(text)


def apply_overrides(d: dict, overrides: Iterable[str]) -> dict:
    """Apply ``a.b=value`` overrides (values parsed as YAML scalars) to a nested dict."""
    d = json.loads(json.dumps(d))
    for item in overrides:
        if "=" not in item:
            raise InvalidConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        node = d
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = _parse_scalar(value)
    return d


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    """Defaults, then the YAML file (``path`` or ``$ACTGUARD_CONFIG``), then overrides."""
    base = ExperimentConfig().to_dict()
    path = path or os.environ.get(CONFIG_ENV_VAR)
    if path:
        p = Path(path)
        if not p.is_file():
            raise InvalidInputError(f"config file {path} does not exist")
        loaded = yaml.safe_load(p.read_text()) or {}
        if not isinstance(loaded, dict):
            raise InvalidConfigError("config file must hold a mapping")
        base = _merge(base, loaded)
    return ExperimentConfig.from_dict(apply_overrides(base, overrides))


def _merge(base: dict, top: dict) -> dict:
    out = dict(base)
    for k, v in top.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


# -- JSON / JSONL ------------------------------------------------------------

def _default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps(obj) -> str:
    # repr-based float output is the shortest string that round-trips exactly.
    return json.dumps(obj, default=_default, sort_keys=True, allow_nan=False)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, default=_default, sort_keys=True, indent=1,
                                     allow_nan=False) + "\n")


def read_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise InvalidInputError(f"missing file {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(p, exc.lineno, exc.msg) from exc


def write_jsonl(path, records: Iterable) -> int:
    n = 0
    with open(path, "w") as fh:
        for rec in records:
            fh.write(dumps(rec))
            fh.write("\n")
            n += 1
    return n


def read_jsonl(path) -> Iterator[dict]:
    for _, rec in read_jsonl_numbered(path):
        yield rec


def read_jsonl_numbered(path) -> Iterator[tuple]:
    """Yield ``(line_number, record)`` pairs, skipping blank lines."""
    p = Path(path)
    if not p.is_file():
        raise InvalidInputError(f"missing file {p}")
    with open(p) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(p, lineno, exc.msg) from exc
            if not isinstance(rec, dict):
                raise DataFormatError(p, lineno, "record is not a JSON object")
            yield lineno, rec


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- trajectories ---------------------------------------------------------------

def trajectory_record(traj: Trajectory) -> dict:
    return {
        "episode": traj.seed,
        "task_id": traj.task_id,
        "outcome": traj.outcome.value,
        "halted": traj.halted,
        "ood": traj.ood,
        "steps": [
            {"state": list(s.state), "action": list(s.executed_action), "scores": list(s.scores),
             "smd": s.smd_score, "uncertainty": s.uncertainty_score}
            for s in traj.steps
        ],
    }


def trajectory_from_record(rec: dict) -> Trajectory:
    steps = [TrajectoryStep(StateVector.from_array(s["state"]), ActionVector.from_array(s["action"]),
                            [], list(s.get("scores", [])), s.get("uncertainty"), s.get("smd"))
             for s in rec["steps"]]
    return Trajectory(steps, Outcome(rec["outcome"]), int(rec["episode"]),
                      rec.get("task_id", "reach"), bool(rec.get("halted", False)),
                      bool(rec.get("ood", False)))


def read_trajectories(path) -> list:
    out = []
    for lineno, rec in read_jsonl_numbered(path):
        try:
            out.append(trajectory_from_record(rec))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(path, lineno, f"bad trajectory record: {exc}") from exc
    return out
