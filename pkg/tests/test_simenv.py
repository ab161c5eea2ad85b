import math

import numpy as np
import pytest

from actguard import io
from actguard.core import InvalidConfigError, InvalidInputError, Outcome, action_error
from actguard.quantile import TrainConfig, batch_loss, train, zero_model
from actguard.selector import Strategy
from actguard.simenv import (
    EnvConfig,
    PolicyHandle,
    PolicyMode,
    expert_action,
    expert_states,
    generate_dataset,
    initial_conditions,
    regression_arrays,
    rollout,
    sample_candidates,
    simulate,
)
from actguard.smd import fit_gaussian, fit_threshold, Detector

QUIET = dict(candidate_noise_sigma=0.0, demo_noise_sigma=0.0, orientation_sensor_sigma=0.0)


# -- config ---------------------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(max_steps=0), dict(expert_step_gain=0.0), dict(expert_step_gain=1.5),
                                dict(workspace_low=(1, -1, 0, -1, -1, -1)), dict(ood_drift=(0.0,) * 7),
                                dict(candidate_noise_sigma=-0.1)])
def test_config_invariants(kw):
    with pytest.raises(InvalidConfigError):
        EnvConfig(**kw)


# -- expert ---------------------------------------------------------------------------

def test_expert_fixed_point():
    cfg = EnvConfig()
    s = np.zeros(8)
    s[:3] = (0.1, 0.2, 0.3)
    a = expert_action(cfg, s, s)
    assert np.all(np.array(a[:6]) == 0.0)


def test_expert_proportional_law():
    cfg = EnvConfig(expert_step_gain=0.5, max_step=1.0)
    goal = np.zeros(8)
    goal[0] = 1.0
    a = expert_action(cfg, np.zeros(8), goal)
    assert a.dx == 0.5 and np.all(np.array(a[1:6]) == 0.0)


def test_expert_step_is_clipped():
    a = expert_action(EnvConfig(max_step=0.25), np.zeros(8), np.array([5.0, -5.0, 0, 0, 0, 0, 0, 0]))
    assert a.dx == 0.25 and a.dy == -0.25


def test_expert_iteration_strictly_decreases_distance(rng):
    cfg = EnvConfig()
    for _ in range(20):
        s, g = rng.uniform(-1, 1, size=8), rng.uniform(-1, 1, size=8)
        d = np.linalg.norm(g[:3] - s[:3])
        for _ in range(30):
            s[:6] += np.array(expert_action(cfg, s, g)[:6])
            d_new = np.linalg.norm(g[:3] - s[:3])
            assert d_new < d or d == 0.0
            d = d_new


@pytest.mark.parametrize("gain", [0.2, 0.3, 0.5])
def test_expert_rollout_within_geometric_bound(gain):
    # max_step large enough that the proportional law is never clipped
    cfg = EnvConfig(expert_step_gain=gain, max_step=10.0, max_steps=200, **QUIET)
    policy = PolicyHandle(cfg, PolicyMode.EXPERT)
    for seed in range(20):
        s0, goal = initial_conditions(cfg, seed)
        d0 = np.linalg.norm(goal[:3] - s0[:3])
        bound = math.ceil(math.log(d0 / cfg.target_region_radius) / math.log(1 / (1 - gain)))
        traj = rollout(policy, seed=seed)
        assert traj.outcome is Outcome.SUCCESS
        assert len(traj.steps) <= bound


# -- candidates -----------------------------------------------------------------------

def test_noiseless_candidates_equal_expert():
    cfg = EnvConfig(candidate_noise_sigma=0.0)
    s, g = initial_conditions(cfg, 0)
    cands = sample_candidates(PolicyHandle(cfg), s, g, 10, seed=3)
    exp = expert_action(cfg, s, g)
    assert all(c.action == exp for c in cands)
    assert all(action_error(c.action, exp) == 0.0 for c in cands)


def test_candidates_deterministic():
    cfg = EnvConfig()
    s, g = initial_conditions(cfg, 1)
    p = PolicyHandle(cfg)
    a, b = sample_candidates(p, s, g, 10, seed=[1, 2]), sample_candidates(p, s, g, 10, seed=[1, 2])
    assert all(x.action == y.action and np.array_equal(x.embedding, y.embedding) for x, y in zip(a, b))
    c = sample_candidates(p, s, g, 10, seed=[1, 3])
    assert a[0].action != c[0].action
    with pytest.raises(InvalidInputError):
        sample_candidates(p, s, g, 0, seed=1)


def test_embedding_coordinate_tracks_error():
    cfg = EnvConfig()
    p = PolicyHandle(cfg)
    z0, err = [], []
    for ep in range(100):
        s, g = initial_conditions(cfg, ep)
        exp = expert_action(cfg, s, g)
        for c in sample_candidates(p, s, g, 100, seed=[ep, 99]):
            z0.append(c.embedding[0])
            err.append(action_error(c.action, exp))
    assert len(z0) == 10_000
    assert np.corrcoef(z0, err)[0, 1] > 0.8


# -- rollouts -------------------------------------------------------------------------

def test_rollout_deterministic():
    p = PolicyHandle(EnvConfig())
    a = io.dumps(io.trajectory_record(rollout(p, Strategy.RANDOM, seed=5)))
    b = io.dumps(io.trajectory_record(rollout(p, Strategy.RANDOM, seed=5)))
    assert a == b


def test_large_drift_exits_workspace():
    cfg = EnvConfig(**QUIET).with_ood((0.0, 0.0, 0.0, 0.3, 0.0, 0.0, 0.0, 0.0), onset=0)
    for seed in range(10):
        rec = simulate(PolicyHandle(cfg), seed=seed)
        assert rec.trajectory.outcome is Outcome.FAILURE
        assert rec.termination == "bounds"
        assert rec.final_state[3] > cfg.workspace_high[3]
        assert rec.trajectory.ood


def test_timeout_is_failure():
    cfg = EnvConfig(max_steps=1, **QUIET)
    rec = simulate(PolicyHandle(cfg), seed=0)
    assert rec.termination == "timeout" and rec.trajectory.outcome is Outcome.FAILURE


def test_halt_on_unsafe_marks_failure():
    cfg = EnvConfig().with_ood((0.0, 0.0, 0.0, 0.25, 0.0, 0.0, 0.0, 0.0), onset=0)
    det = Detector(fit_gaussian(expert_states(EnvConfig(), range(20))), fit_threshold([0.5], 0.99))
    rec = simulate(PolicyHandle(cfg), detector=det, seed=0)
    assert rec.termination == "halted"
    assert rec.trajectory.halted and rec.trajectory.outcome is Outcome.FAILURE
    assert rec.trajectory.steps[-1].smd_score > 0.5
    free = simulate(PolicyHandle(cfg), detector=det, seed=0, halt_on_unsafe=False)
    assert not free.trajectory.halted and free.termination != "halted"


def test_scores_logged_with_model(pipeline):
    p = PolicyHandle(EnvConfig())
    traj = rollout(p, Strategy.CQR, pipeline["detector"], seed=7, model=pipeline["model"],
                   calibration=pipeline["calibration"], halt_on_unsafe=False)
    for step in traj.steps:
        assert len(step.scores) == 10
        assert step.uncertainty_score == max(min(step.scores), 0.0)
        assert step.smd_score is not None


# -- dataset --------------------------------------------------------------------------

def test_dataset_counting_bound():
    ds = generate_dataset(EnvConfig(max_steps=5), 1, K=10)
    assert 0 < len(ds.regression) <= 50
    assert len(ds.trajectories) == 1


def test_dataset_rejects_zero_episodes():
    with pytest.raises(InvalidInputError):
        generate_dataset(EnvConfig(), 0)


def test_disjoint_seed_sets_give_disjoint_keys():
    cfg = EnvConfig(max_steps=8)
    a = generate_dataset(cfg, 3, seeds=[0, 1, 2])
    b = generate_dataset(cfg, 3, seeds=[3, 4, 5])
    ka = {(r["episode"], r["step"], r["cand"]) for r in a.regression}
    kb = {(r["episode"], r["step"], r["cand"]) for r in b.regression}
    assert len(ka) == len(a.regression) and len(kb) == len(b.regression)
    assert not ka & kb
    za = {tuple(np.round(r["z"], 12)) for r in a.regression}
    zb = {tuple(np.round(r["z"], 12)) for r in b.regression}
    assert not za & zb


def test_emitted_errors_recompute_exactly(pipeline):
    n = 0
    for rec in io.read_jsonl(pipeline["data"] / "regression.jsonl"):
        assert rec["d_a"] == action_error(rec["a_hat"], rec["a_gt"])
        n += 1
    assert n == io.read_json(pipeline["data"] / "manifest.json")["counts"]["regression"]


def test_expert_states_are_noisy_but_bounded():
    S = expert_states(EnvConfig(), range(10))
    assert S.shape[1] == 8 and S.shape[0] >= 10
    assert np.all(np.abs(S[:, 3:6]) <= 0.6)


# -- learnability and OOD sensitivity -------------------------------------------------

def _rows_by_episode(rows, episodes):
    keep = set(episodes)
    return [r for r in rows if r["episode"] in keep]


def test_learnability_margin():
    ds = generate_dataset(EnvConfig(), 40)
    tr = regression_arrays(_rows_by_episode(ds.regression, range(30)))
    te = regression_arrays(_rows_by_episode(ds.regression, range(30, 40)))
    model = train(tr, [0.9], "distance7", TrainConfig())
    const = zero_model(tr[0].shape[1], [0.9], "distance7")
    q = np.quantile(np.linalg.norm(tr[1] - tr[2], axis=1), 0.9, method="inverted_cdf")
    const.weights[-1] = (const.weights[-1][0], np.array([q]))
    lm, lc = batch_loss(model, te), batch_loss(const, te)
    assert lm <= 0.95 * lc


def test_ood_monotonicity(pipeline):
    det = pipeline["detector"]
    means = []
    for mag in (0.0, 0.1, 0.25):
        cfg = EnvConfig().with_ood((0.0, 0.0, 0.0, mag, 0.0, 0.0, 0.0, 0.0), onset=1)
        p = PolicyHandle(cfg)
        per = [max(s.smd_score for s in rollout(p, Strategy.DEFAULT, det, 500 + e, halt_on_unsafe=False).steps)
               for e in range(30)]
        means.append(np.mean(per))
    assert means[0] < means[1] < means[2]
