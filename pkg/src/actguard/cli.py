"""``actguard`` command line.

Exit codes: 0 success, 2 input/path errors, 3 statistical-precondition
failures, 4 data-format errors.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import io
from .conformal import (
    ConformalCalibration,
    InsufficientCalibrationError,
    calibrate,
    empirical_coverage,
)
from .core import InvalidConfigError, InvalidInputError, Outcome
from .metrics import OutcomeScore, UndefinedCorrelationError, evaluate
from .quantile import QuantileModel, TrainingDivergedError, train
from .selector import Strategy
from .simenv import PolicyHandle, PolicyMode, generate_dataset, rollout
from .smd import (
    Detector,
    SingleClassError,
    SingularCovarianceError,
    fit_gaussian,
    fit_threshold,
    mahalanobis_batch,
    tune_threshold_youden,
)

logger = logging.getLogger("actguard")

EXIT_OK, EXIT_INPUT, EXIT_STATS, EXIT_FORMAT = 0, 2, 3, 4

# Rollout seeds for selection/detection trials live far above generated episode ids.
TRIAL_SEED_BASE = {"eval": 1_000_000, "calib": 2_000_000}
STRATEGY_ORDER = (Strategy.DEFAULT, Strategy.RANDOM, Strategy.MEAN, Strategy.CQR)


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# -- generate ------------------------------------------------------------------

def split_episodes(config: io.ExperimentConfig) -> dict:
    """Seeded partition of clean episode ids into train/calib/eval, plus OOD ids."""
    n = config.n_episodes
    order = np.random.default_rng([config.env.seed, 11]).permutation(n)
    n_train = int(round(config.train_frac * n))
    n_calib = int(round(config.calib_frac * n))
    ood = list(range(n, n + config.n_ood_episodes))
    half = (len(ood) + 1) // 2
    return {
        "train": sorted(order[:n_train].tolist()),
        "calib": sorted(order[n_train:n_train + n_calib].tolist()),
        "eval": sorted(order[n_train + n_calib:].tolist()),
        "ood_calib": ood[:half],
        "ood_eval": ood[half:],
    }


def cmd_generate(config: io.ExperimentConfig, out_dir) -> int:
    if config.n_episodes < 1:
        raise CommandError(EXIT_INPUT, "n_episodes must be at least 1")
    out = _ensure_dir(out_dir)
    splits = split_episodes(config)
    clean_ids = list(range(config.n_episodes))
    ds = generate_dataset(config.env.clean(), len(clean_ids), clean_ids, K=config.K)
    ood_env = config.env.with_ood(config.ood_drift, config.ood_onset_step)
    ood_ids = splits["ood_calib"] + splits["ood_eval"]
    ood_trajs = []
    if ood_ids:
        ood_trajs = generate_dataset(ood_env, len(ood_ids), ood_ids, K=config.K).trajectories

    n_reg = io.write_jsonl(out / "regression.jsonl", ds.regression)
    expert_ids = splits["train"] + splits["calib"]
    policy = PolicyHandle(config.env.clean(), PolicyMode.EXPERT)

    def expert_rows():
        for ep in expert_ids:
            for t, s in enumerate(rollout(policy, seed=ep, K=1).steps):
                yield {"episode": ep, "step": t, "state": list(s.state)}

    n_exp = io.write_jsonl(out / "expert_states.jsonl", expert_rows())
    n_traj = io.write_jsonl(out / "trajectories.jsonl",
                            (io.trajectory_record(t) for t in ds.trajectories + ood_trajs))
    manifest = {
        "config": config.to_dict(),
        "splits": splits,
        "counts": {"regression": n_reg, "expert_states": n_exp, "trajectories": n_traj},
        "files": {name: io.sha256(out / name) for name in
                  ("regression.jsonl", "expert_states.jsonl", "trajectories.jsonl")},
    }
    io.write_json(out / "manifest.json", manifest)
    print(f"wrote {n_reg} regression rows, {n_exp} expert states, {n_traj} trajectories to {out}")
    return EXIT_OK


# -- train-calibrate -------------------------------------------------------------

def _load_regression(data_dir: Path, episodes) -> tuple:
    wanted = set(episodes)
    rows = []
    for lineno, rec in io.read_jsonl_numbered(data_dir / "regression.jsonl"):
        try:
            if rec["episode"] in wanted:
                rows.append((rec["episode"], rec["z"], rec["a_hat"], rec["a_gt"]))
        except KeyError as exc:
            raise io.DataFormatError(data_dir / "regression.jsonl", lineno, f"missing key {exc}")
    if not rows:
        raise CommandError(EXIT_INPUT, f"no regression rows for the requested episodes in {data_dir}")
    ep = np.array([r[0] for r in rows])
    Z = np.array([r[1] for r in rows], dtype=np.float64)
    A = np.array([r[2] for r in rows], dtype=np.float64)
    G = np.array([r[3] for r in rows], dtype=np.float64)
    return ep, Z, A, G


def _load_expert_states(data_dir: Path, episodes) -> np.ndarray:
    wanted = set(episodes)
    states = [rec["state"] for rec in io.read_jsonl(data_dir / "expert_states.jsonl")
              if rec["episode"] in wanted]
    return np.array(states, dtype=np.float64).reshape(-1, 8)


def episode_split(episodes: np.ndarray, train_frac: float, seed: int):
    """Boolean train mask assigning whole episodes to the training part."""
    ids = np.unique(episodes)
    perm = np.random.default_rng([seed, 13]).permutation(ids)
    n_train = int(round(train_frac * ids.size))
    n_train = min(max(n_train, 1), ids.size - 1) if ids.size > 1 else ids.size
    return np.isin(episodes, perm[:n_train])


def cmd_train_calibrate(config: io.ExperimentConfig, data_dir, out_dir) -> int:
    data_dir = Path(data_dir)
    manifest = io.read_json(data_dir / "manifest.json")
    splits = manifest["splits"]
    ep, Z, A, G = _load_regression(data_dir, splits["train"])
    mask = episode_split(ep, config.regression_train_frac, config.env.seed)
    if mask.all():
        raise CommandError(EXIT_STATS, "need at least two training episodes to hold out calibration data")
    model = train((Z[mask], A[mask], G[mask]), config.levels, config.target_kind, config.train)
    level = 0.9 if 0.9 in model.levels else model.levels[-1]
    try:
        calibration = calibrate(model, (Z[~mask], A[~mask], G[~mask]), config.miscoverage, level)
    except InsufficientCalibrationError as exc:
        raise CommandError(EXIT_STATS, f"{exc} (minimum n = {exc.minimum})") from exc

    report = {"calibration_size": calibration.calibration_size, "offset": calibration.offset,
              "miscoverage": calibration.miscoverage, "level": calibration.level,
              "train_rows": int(mask.sum())}
    if splits["eval"]:
        _, Ze, Ae, Ge = _load_regression(data_dir, splits["eval"])
        report["heldout_coverage"] = empirical_coverage(model, calibration, (Ze, Ae, Ge))
        report["heldout_size"] = int(Ze.shape[0])

    fit_states = _load_expert_states(data_dir, splits["train"])
    hold_states = _load_expert_states(data_dir, splits["calib"] or splits["train"])
    gauss = fit_gaussian(fit_states)
    threshold = fit_threshold(mahalanobis_batch(gauss, hold_states), config.gamma)
    detector = Detector(gauss, threshold)

    out = _ensure_dir(out_dir)
    model.save(out / "model.json")
    calibration.save(out / "calibration.json")
    detector.save(out / "detector.json")
    io.write_json(out / "train_report.json", report)
    cov = report.get("heldout_coverage")
    print(f"calibrated offset q={calibration.offset:.6g} on n={calibration.calibration_size}; "
          f"held-out coverage {cov:.4f}" if cov is not None else "no eval split for coverage")
    print(f"detector threshold {threshold.value:.6g} at gamma={config.gamma}")
    return EXIT_OK


def load_artifacts(artifacts_dir):
    art = Path(artifacts_dir)
    missing = [n for n in ("model.json", "calibration.json", "detector.json") if not (art / n).is_file()]
    if missing:
        raise CommandError(EXIT_INPUT, f"missing artifacts in {art}: {', '.join(missing)}")
    model = QuantileModel.from_dict(io.read_json(art / "model.json"))
    calibration = ConformalCalibration.from_dict(io.read_json(art / "calibration.json"))
    detector = Detector.from_dict(io.read_json(art / "detector.json"))
    return model, calibration, detector


# -- eval-selection --------------------------------------------------------------

def run_selection_trials(config: io.ExperimentConfig, model, calibration, detector, n_trials: int,
                         split: str = "eval", ood_trials: int = 0,
                         strategies=STRATEGY_ORDER) -> dict:
    """Paired-seed rollouts per strategy; returns ``{strategy: [Trajectory, ...]}``."""
    base = TRIAL_SEED_BASE[split]
    seeds = range(base, base + n_trials)
    clean = PolicyHandle(config.env.clean())
    drifted = PolicyHandle(config.env.with_ood(config.ood_drift, config.ood_onset_step))
    out = {}
    for strategy in strategies:
        trajs = [rollout(clean, strategy, detector, s, K=config.K, model=model,
                         calibration=calibration, halt_on_unsafe=False) for s in seeds]
        trajs += [rollout(drifted, strategy, detector, base + n_trials + s, K=config.K, model=model,
                          calibration=calibration, halt_on_unsafe=False) for s in range(ood_trials)]
        out[Strategy(strategy)] = trajs
    return out


def selection_summary(results: dict) -> dict:
    rates = {}
    for strategy, trajs in results.items():
        clean = [t for t in trajs if not t.ood]
        n = len(clean)
        succ = sum(t.outcome is Outcome.SUCCESS for t in clean)
        p = succ / n if n else float("nan")
        rates[strategy.value] = {"n": n, "successes": succ, "success_rate": p,
                                 "stderr": float(np.sqrt(p * (1 - p) / n)) if n else float("nan")}
    base = rates.get(Strategy.DEFAULT.value, {}).get("success_rate")
    for r in rates.values():
        r["delta_vs_default"] = r["success_rate"] - base if base is not None else None
    return rates


def selection_table(rates: dict) -> str:
    lines = [f"{'strategy':<10}{'success':>9}{'delta':>9}{'n':>6}"]
    for name, r in rates.items():
        delta = "" if r["delta_vs_default"] is None else f"{r['delta_vs_default']:+.3f}"
        lines.append(f"{name:<10}{r['success_rate']:>9.3f}{delta:>9}{r['n']:>6}")
    return "\n".join(lines)


def cmd_eval_selection(config: io.ExperimentConfig, artifacts_dir, out_dir, n_trials: int,
                       split: str = "eval", ood_trials: int = 0) -> int:
    if n_trials < 1:
        raise CommandError(EXIT_INPUT, "n_trials must be at least 1")
    model, calibration, detector = load_artifacts(artifacts_dir)
    results = run_selection_trials(config, model, calibration, detector, n_trials, split, ood_trials)
    out = _ensure_dir(out_dir)
    for strategy, trajs in results.items():
        io.write_jsonl(out / f"trajectories_{strategy.value}.jsonl",
                       (io.trajectory_record(t) for t in trajs))
    rates = selection_summary(results)
    io.write_json(out / "selection_report.json", {"n_trials": n_trials, "split": split,
                                                  "ood_trials": ood_trials, "strategies": rates})
    table = selection_table(rates)
    (out / "selection_table.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


# -- tune-threshold ------------------------------------------------------------

def episode_smd(traj, detector: Optional[Detector], aggregate: str = "max") -> float:
    values = [s.smd_score for s in traj.steps]
    if any(v is None for v in values):
        if detector is None:
            raise CommandError(EXIT_INPUT, f"episode {traj.seed} has no SMD values and no detector was given")
        values = mahalanobis_batch(detector.model, np.array([s.state for s in traj.steps])).tolist()
    return float(np.max(values) if aggregate == "max" else np.mean(values))


def cmd_tune_threshold(config: io.ExperimentConfig, trajectories, artifacts_dir, out_dir) -> int:
    trajs = io.read_trajectories(trajectories)
    detector = None
    if artifacts_dir is not None and (Path(artifacts_dir) / "detector.json").is_file():
        detector = Detector.load(Path(artifacts_dir) / "detector.json")
    runs = [(episode_smd(t, detector, config.smd_aggregate), t.outcome) for t in trajs]
    try:
        result = tune_threshold_youden(runs, config.confidence_grid, config.fpr_penalty,
                                       config.threshold_from)
    except SingleClassError as exc:
        raise CommandError(EXIT_STATS, str(exc)) from exc
    out = _ensure_dir(out_dir)
    with open(out / "youden_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["confidence", "threshold", "j", "tpr", "fpr"])
        for row in result.curve:
            writer.writerow([repr(float(v)) for v in row])
    summary = {"best_confidence": result.best_confidence, "threshold": result.threshold,
               "j_score": result.j_score, "tpr": result.tpr, "fpr": result.fpr,
               "fpr_penalty": result.fpr_penalty, "n_runs": len(runs),
               "n_failures": sum(o is Outcome.FAILURE for _, o in runs)}
    io.write_json(out / "youden.json", summary)
    if detector is not None:
        Detector(detector.model, result.as_threshold()).save(out / "detector_youden.json")
    print(f"best confidence {result.best_confidence:g}: threshold {result.threshold:.6g}, "
          f"J={result.j_score:.4f} (TPR {result.tpr:.3f}, FPR {result.fpr:.3f})")
    return EXIT_OK


# -- report ----------------------------------------------------------------------

def episode_scores(trajs, score_kind: str, config: io.ExperimentConfig,
                   detector: Optional[Detector] = None) -> list:
    pairs = []
    for t in trajs:
        if score_kind == "smd":
            score = episode_smd(t, detector, config.smd_aggregate)
        else:
            values = [s.uncertainty_score for s in t.steps if s.uncertainty_score is not None]
            if not values:
                raise CommandError(EXIT_INPUT, f"episode {t.seed} carries no CQR uncertainty scores")
            score = float(np.max(values) if config.cqr_aggregate == "max" else np.mean(values))
        pairs.append(OutcomeScore(score, t.outcome))
    return pairs


def cmd_report(config: io.ExperimentConfig, trajectories, score_kind: str, out_dir,
               artifacts_dir=None) -> int:
    trajs = io.read_trajectories(trajectories)
    detector = None
    if artifacts_dir is not None and (Path(artifacts_dir) / "detector.json").is_file():
        detector = Detector.load(Path(artifacts_dir) / "detector.json")
    pairs = episode_scores(trajs, score_kind, config, detector)
    try:
        report = evaluate(pairs, score_kind)
    except (SingleClassError, UndefinedCorrelationError) as exc:
        raise CommandError(EXIT_STATS, str(exc)) from exc
    out = _ensure_dir(out_dir)
    io.write_json(out / f"metrics_{score_kind}.json", report.as_dict())
    (out / f"metrics_{score_kind}.txt").write_text(report.table() + "\n")
    print(report.table())
    return EXIT_OK


# -- monitor-replay ----------------------------------------------------------------

def cmd_monitor_replay(trajectories, detector_path, out_path) -> int:
    trajs = io.read_trajectories(trajectories)
    if not Path(detector_path).is_file():
        raise CommandError(EXIT_INPUT, f"missing detector {detector_path}")
    detector = Detector.load(detector_path)

    def annotated():
        for t in trajs:
            rec = io.trajectory_record(t)
            d = mahalanobis_batch(detector.model, np.array([s.state for s in t.steps]))
            first = None
            for i, (step, dist) in enumerate(zip(rec["steps"], d)):
                step["smd"] = float(dist)
                step["verdict"] = "unsafe" if dist > detector.threshold.value else "safe"
                if first is None and step["verdict"] == "unsafe":
                    first = i
            rec["first_unsafe_step"] = first
            yield rec

    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    n = io.write_jsonl(out_path, annotated())
    print(f"annotated {n} trajectories -> {out_path}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------

def _ensure_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(EXIT_INPUT, f"cannot create {p}: {exc}") from exc
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="actguard", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help=f"YAML config (default: ${io.CONFIG_ENV_VAR})")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. --set env.seed=3 (repeatable)")
        return p

    p = common(sub.add_parser("generate", help="simulate episodes and write the dataset"))
    p.add_argument("--out", help="dataset directory (default: config data_dir)")
    p.add_argument("--n-episodes", type=int)

    p = common(sub.add_parser("train-calibrate", help="fit the quantile model, conformal offset and detector"))
    p.add_argument("--data")
    p.add_argument("--out")

    p = common(sub.add_parser("eval-selection", help="compare selection strategies on paired seeds"))
    p.add_argument("--artifacts")
    p.add_argument("--out")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--split", choices=sorted(TRIAL_SEED_BASE), default="eval")
    p.add_argument("--ood-trials", type=int, default=0)

    p = common(sub.add_parser("tune-threshold", help="Youden-J sweep of the SMD threshold"))
    p.add_argument("--trajectories", required=True)
    p.add_argument("--artifacts")
    p.add_argument("--out")

    p = common(sub.add_parser("report", help="uncertainty-vs-outcome metrics table"))
    p.add_argument("--trajectories", required=True)
    p.add_argument("--score", choices=("cqr", "smd"), default="smd")
    p.add_argument("--artifacts")
    p.add_argument("--out")

    p = common(sub.add_parser("monitor-replay", help="annotate a trajectory file with SMD verdicts"))
    p.add_argument("--trajectories", required=True)
    p.add_argument("--detector", required=True)
    p.add_argument("--out", required=True)
    return parser


def _dispatch(args) -> int:
    overrides = list(args.overrides)
    if getattr(args, "n_episodes", None) is not None:
        overrides.append(f"n_episodes={args.n_episodes}")
    config = io.load_config(args.config, overrides)
    cmd = args.command
    if cmd == "generate":
        return cmd_generate(config, args.out or config.data_dir)
    if cmd == "train-calibrate":
        return cmd_train_calibrate(config, args.data or config.data_dir, args.out or config.artifacts_dir)
    if cmd == "eval-selection":
        return cmd_eval_selection(config, args.artifacts or config.artifacts_dir,
                                  args.out or config.out_dir, args.trials, args.split, args.ood_trials)
    if cmd == "tune-threshold":
        return cmd_tune_threshold(config, args.trajectories, args.artifacts or config.artifacts_dir,
                                  args.out or config.out_dir)
    if cmd == "report":
        return cmd_report(config, args.trajectories, args.score, args.out or config.out_dir,
                          args.artifacts or config.artifacts_dir)
    return cmd_monitor_replay(args.trajectories, args.detector, args.out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except io.DataFormatError as exc:
        print(f"error: malformed data at {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (InsufficientCalibrationError, SingleClassError, UndefinedCorrelationError,
            SingularCovarianceError, TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STATS
    except (InvalidInputError, InvalidConfigError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
