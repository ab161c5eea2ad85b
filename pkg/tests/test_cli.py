import json

import numpy as np
import pytest

from actguard import cli, io
from actguard.conformal import ConformalCalibration, calibrated_bounds
from actguard.quantile import QuantileModel
from actguard.smd import Detector

FAST = ["n_episodes=12", "n_ood_episodes=4", "env.max_steps=12", "train.epochs=5"]


def _run(argv):
    return cli.main([str(a) for a in argv])


def _sha_dir(path):
    return {p.name: io.sha256(p) for p in sorted(path.iterdir()) if p.is_file()}


def _sets(*items):
    out = []
    for s in items:
        out += ["--set", s]
    return out


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    assert _run(["generate", "--out", root / "data", *_sets(*FAST)]) == 0
    assert _run(["train-calibrate", "--data", root / "data", "--out", root / "art", *_sets(*FAST)]) == 0
    return root


# -- generate ------------------------------------------------------------------------

def test_generate_manifest_splits(small):
    m = io.read_json(small / "data" / "manifest.json")
    sp = m["splits"]
    clean = [set(sp[k]) for k in ("train", "calib", "eval")]
    assert not (clean[0] & clean[1] or clean[0] & clean[2] or clean[1] & clean[2])
    assert set().union(*clean) == set(range(12))
    assert not set(sp["ood_calib"]) & set(sp["ood_eval"])
    assert not set(sp["ood_calib"] + sp["ood_eval"]) & set().union(*clean)
    for name, digest in m["files"].items():
        assert io.sha256(small / "data" / name) == digest


def test_generate_rerun_is_identical(small, tmp_path):
    assert _run(["generate", "--out", tmp_path, *_sets(*FAST)]) == 0
    assert _sha_dir(tmp_path) == _sha_dir(small / "data")


def test_generate_zero_episodes(tmp_path, capsys):
    out = tmp_path / "none"
    assert _run(["generate", "--out", out, "--n-episodes", 0]) == 2
    assert not out.exists()
    assert "n_episodes" in capsys.readouterr().err


def test_generate_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert _run(["generate", "--out", blocker / "sub", *_sets(*FAST)]) == 2


def test_config_file_and_env_var(tmp_path, monkeypatch):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("n_episodes: 3\nenv:\n  max_steps: 4\n  seed: 9\n")
    c = io.load_config(str(cfg), ["env.seed=2"])
    assert (c.n_episodes, c.env.max_steps, c.env.seed) == (3, 4, 2)
    monkeypatch.setenv(io.CONFIG_ENV_VAR, str(cfg))
    assert io.load_config().n_episodes == 3
    assert _run(["generate", "--out", tmp_path / "d", "--config", tmp_path / "missing.yaml"]) == 2
    assert _run(["generate", "--out", tmp_path / "d", "--set", "bogus=1"]) == 2


# -- train-calibrate ------------------------------------------------------------------

def test_train_rerun_is_identical(small, tmp_path):
    assert _run(["train-calibrate", "--data", small / "data", "--out", tmp_path, *_sets(*FAST)]) == 0
    assert _sha_dir(tmp_path) == _sha_dir(small / "art")


def test_train_insufficient_calibration(small, tmp_path, capsys):
    # alpha = 0.001 needs n >= 999; one held-out episode has far fewer rows
    code = _run(["train-calibrate", "--data", small / "data", "--out", tmp_path,
                 *_sets(*FAST, "miscoverage=0.001", "regression_train_frac=0.99")])
    assert code == 3
    assert "minimum n = 999" in capsys.readouterr().err
    assert not (tmp_path / "model.json").exists()


def test_artifacts_round_trip_bit_exact(small, tmp_path):
    art = small / "art"
    model = QuantileModel.load(art / "model.json")
    cal = ConformalCalibration.load(art / "calibration.json")
    det = Detector.load(art / "detector.json")
    model.save(tmp_path / "model.json")
    cal.save(tmp_path / "calibration.json")
    det.save(tmp_path / "detector.json")
    for name in ("model.json", "calibration.json", "detector.json"):
        assert io.sha256(tmp_path / name) == io.sha256(art / name)
    rows = list(io.read_jsonl(small / "data" / "regression.jsonl"))[:50]
    Z = np.array([r["z"] for r in rows])
    A = np.array([r["a_hat"] for r in rows])
    again = QuantileModel.load(tmp_path / "model.json")
    assert np.array_equal(calibrated_bounds(model, cal, Z, A), calibrated_bounds(again, cal, Z, A))


def test_missing_artifacts(tmp_path):
    assert _run(["eval-selection", "--artifacts", tmp_path, "--out", tmp_path / "o", "--trials", 2]) == 2


def test_pipeline_coverage_reported(pipeline):
    rep = pipeline["train_report"]
    assert 0.87 <= rep["heldout_coverage"] <= 1.0
    assert rep["calibration_size"] >= 500


# -- eval-selection / tune / report / replay --------------------------------------------

@pytest.fixture(scope="module")
def evaluated(small):
    out = small / "sel"
    assert _run(["eval-selection", "--artifacts", small / "art", "--out", out, "--trials", 6,
                 "--ood-trials", 6, *_sets(*FAST)]) == 0
    return out


def test_eval_selection_outputs(evaluated, small, tmp_path):
    rep = io.read_json(evaluated / "selection_report.json")
    assert set(rep["strategies"]) == {"default", "random", "mean", "cqr"}
    assert all(r["n"] == 6 for r in rep["strategies"].values())
    assert rep["strategies"]["default"]["delta_vs_default"] == 0.0
    trajs = io.read_trajectories(evaluated / "trajectories_cqr.jsonl")
    assert len(trajs) == 12 and sum(t.ood for t in trajs) == 6
    assert _run(["eval-selection", "--artifacts", small / "art", "--out", tmp_path, "--trials", 6,
                 "--ood-trials", 6, *_sets(*FAST)]) == 0
    assert _sha_dir(tmp_path) == _sha_dir(evaluated)


def test_noiseless_env_all_strategies_succeed(small, tmp_path):
    quiet = _sets(*FAST, "env.candidate_noise_sigma=0.0", "env.max_steps=40")
    assert _run(["eval-selection", "--artifacts", small / "art", "--out", tmp_path, "--trials", 20,
                 *quiet]) == 0
    rates = io.read_json(tmp_path / "selection_report.json")["strategies"]
    assert all(r["success_rate"] == 1.0 for r in rates.values())


def test_tune_threshold(evaluated, small, tmp_path):
    cmd = ["tune-threshold", "--trajectories", evaluated / "trajectories_cqr.jsonl",
           "--artifacts", small / "art", "--out", tmp_path / "a", *_sets(*FAST)]
    assert _run(cmd) == 0
    lines = (tmp_path / "a" / "youden_curve.csv").read_text().splitlines()
    assert lines[0] == "confidence,threshold,j,tpr,fpr" and len(lines) == 1 + 50
    res = io.read_json(tmp_path / "a" / "youden.json")
    assert res["j_score"] == pytest.approx(res["tpr"] - 2 * res["fpr"], abs=1e-12)
    assert Detector.load(tmp_path / "a" / "detector_youden.json").threshold.value == res["threshold"]
    cmd[cmd.index(tmp_path / "a")] = tmp_path / "b"
    assert _run(cmd) == 0
    assert _sha_dir(tmp_path / "a") == _sha_dir(tmp_path / "b")


def _write_runs(path, smd_by_outcome):
    recs = []
    for i, (smd, outcome) in enumerate(smd_by_outcome):
        recs.append({"episode": i, "outcome": outcome, "halted": False,
                     "steps": [{"state": [0.0] * 8, "action": [0.0] * 7, "scores": [], "smd": smd}]})
    io.write_jsonl(path, recs)


def test_tune_threshold_separable(tmp_path):
    runs = [(float(d), "success") for d in range(1, 11)] + [(float(d), "failure") for d in range(20, 25)]
    _write_runs(tmp_path / "t.jsonl", runs)
    assert _run(["tune-threshold", "--trajectories", tmp_path / "t.jsonl", "--artifacts", tmp_path / "none",
                 "--out", tmp_path / "o"]) == 0
    assert io.read_json(tmp_path / "o" / "youden.json")["j_score"] == 1.0


def test_tune_threshold_single_class(tmp_path):
    _write_runs(tmp_path / "t.jsonl", [(1.0, "success"), (2.0, "success")])
    assert _run(["tune-threshold", "--trajectories", tmp_path / "t.jsonl", "--out", tmp_path / "o"]) == 3


@pytest.mark.parametrize("kind", ["smd", "cqr"])
def test_report(evaluated, small, tmp_path, kind):
    traj = evaluated / "trajectories_cqr.jsonl"
    assert {t.outcome.value for t in io.read_trajectories(traj)} == {"success", "failure"}
    assert _run(["report", "--trajectories", traj, "--score", kind, "--artifacts", small / "art",
                 "--out", tmp_path, *_sets(*FAST)]) == 0
    m = io.read_json(tmp_path / f"metrics_{kind}.json")
    assert m["auc"] == m["failure_exceeds"] and m["a12_low"] == pytest.approx(1 - m["auc"], abs=1e-15)
    table = (tmp_path / f"metrics_{kind}.txt").read_text().splitlines()
    assert table[0].split() == ["score", "|rho|", "A12", "d", "AUC"]


def test_report_malformed_line(tmp_path, capsys):
    _write_runs(tmp_path / "t.jsonl", [(1.0, "success"), (2.0, "failure")])
    with open(tmp_path / "t.jsonl", "a") as fh:
        fh.write("{not json\n")
    assert _run(["report", "--trajectories", tmp_path / "t.jsonl", "--out", tmp_path / "o"]) == 4
    assert "t.jsonl:3" in capsys.readouterr().err


def test_report_bad_record(tmp_path, capsys):
    io.write_jsonl(tmp_path / "t.jsonl", [{"episode": 0, "outcome": "maybe", "steps": []}])
    assert _run(["report", "--trajectories", tmp_path / "t.jsonl", "--out", tmp_path / "o"]) == 4
    assert "t.jsonl:1" in capsys.readouterr().err


def test_report_missing_file(tmp_path):
    assert _run(["report", "--trajectories", tmp_path / "absent.jsonl", "--out", tmp_path / "o"]) == 2


def test_monitor_replay(evaluated, small, tmp_path):
    out = tmp_path / "replay.jsonl"
    assert _run(["monitor-replay", "--trajectories", evaluated / "trajectories_cqr.jsonl",
                 "--detector", small / "art" / "detector.json", "--out", out]) == 0
    det = Detector.load(small / "art" / "detector.json")
    for rec in io.read_jsonl(out):
        verdicts = [s["verdict"] for s in rec["steps"]]
        for s in rec["steps"]:
            assert s["smd"] == pytest.approx(det.distance(s["state"]), rel=1e-12)
            assert (s["verdict"] == "unsafe") == (s["smd"] > det.threshold.value)
        first = rec["first_unsafe_step"]
        assert first == (verdicts.index("unsafe") if "unsafe" in verdicts else None)
    assert _run(["monitor-replay", "--trajectories", evaluated / "trajectories_cqr.jsonl",
                 "--detector", small / "art" / "detector.json", "--out", tmp_path / "again.jsonl"]) == 0
    assert io.sha256(out) == io.sha256(tmp_path / "again.jsonl")
    assert _run(["monitor-replay", "--trajectories", evaluated / "trajectories_cqr.jsonl",
                 "--detector", tmp_path / "nope.json", "--out", tmp_path / "x.jsonl"]) == 2


def test_float_serialisation_round_trips():
    vals = [0.1, 1 / 3, 2 ** -1074, 1.7976931348623157e308, -0.0]
    back = json.loads(io.dumps({"v": vals}))["v"]
    assert [np.float64(v).tobytes() for v in back] == [np.float64(v).tobytes() for v in vals]


def test_report_single_class(tmp_path):
    _write_runs(tmp_path / "t.jsonl", [(1.0, "failure"), (2.0, "failure")])
    assert _run(["report", "--trajectories", tmp_path / "t.jsonl", "--out", tmp_path / "o"]) == 3
