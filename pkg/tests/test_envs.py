import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from oodaug import envs
from oodaug.envs import EnvSpec, EnvState
from oodaug.numcore import UsageError
from oodaug.sampler import run_episodes


def test_spec_validation():
    with pytest.raises(ValueError):
        EnvSpec(horizon=0)
    with pytest.raises(ValueError):
        EnvSpec(success_radius=0.0)
    with pytest.raises(ValueError):
        EnvSpec(gap_center=0.95, gap_width=0.2)


def test_spec_roundtrip_and_id():
    s = EnvSpec(gap_center=0.1, goal=[0.2, 0.5])
    assert EnvSpec.from_dict(s.to_dict()) == s
    assert s.replace(perturbation=0.03).spec_id == s.spec_id
    assert s.replace(gap_center=0.2).spec_id != s.spec_id


def test_degenerate_start_region():
    s = EnvSpec(start_low=(0.3, -0.6), start_high=(0.3, -0.6))
    st_ = envs.reset(s, np.random.default_rng(0))
    assert np.array_equal(st_.agent, [0.3, -0.6]) and st_.t == 0 and not st_.done


def test_reset_deterministic():
    s = EnvSpec()
    a = envs.reset(s, np.random.default_rng(4)).agent
    b = envs.reset(s, np.random.default_rng(4)).agent
    assert np.array_equal(a, b)


def test_reset_uniform_chi_square():
    s = EnvSpec()
    rng = np.random.default_rng(11)
    pts = np.array([envs.reset(s, rng).agent for _ in range(10_000)])
    mx = (s.start_low[0] + s.start_high[0]) / 2
    my = (s.start_low[1] + s.start_high[1]) / 2
    cells = (pts[:, 0] > mx).astype(int) * 2 + (pts[:, 1] > my).astype(int)
    counts = np.bincount(cells, minlength=4)
    assert stats.chisquare(counts).pvalue > 0.01


def test_at_goal_zero_action():
    s = EnvSpec()
    st_ = EnvState(agent=np.array(s.goal))
    new, r, done = envs.step(s, st_, np.zeros(2))
    assert r == 1.0 and done and new.succeeded


def test_blocked_by_wall():
    s = EnvSpec()
    st_ = EnvState(agent=np.array([0.5, -0.01]))
    new, r, done = envs.step(s, st_, np.array([0.0, 1.0]))
    assert r == 0.0 and not done
    assert new.agent[0] == pytest.approx(0.5)
    assert new.agent[1] < s.wall_y and new.agent[1] == pytest.approx(s.wall_y, abs=1e-5)


def test_passes_through_gap():
    s = EnvSpec()
    new, _, _ = envs.step(s, EnvState(agent=np.array([0.0, -0.01])), np.array([0.0, 1.0]))
    assert new.agent[1] == pytest.approx(0.04)


def test_action_clipped_and_scaled():
    s = EnvSpec()
    new, _, _ = envs.step(s, EnvState(agent=np.array([-0.5, -0.5])), np.array([5.0, -0.5]))
    assert np.allclose(new.agent, [-0.5 + s.action_scale, -0.5 - 0.5 * s.action_scale])


def test_step_finished_episode_rejected():
    with pytest.raises(UsageError):
        envs.step(EnvSpec(), EnvState(agent=np.zeros(2), done=True), np.zeros(2))


def test_perturbed_step_needs_rng():
    with pytest.raises(UsageError):
        envs.step(EnvSpec(perturbation=0.03), EnvState(agent=np.array([0.0, -0.5])), np.zeros(2))


def test_timeout_sets_done():
    s = EnvSpec(horizon=3)
    st_ = EnvState(agent=np.array([0.5, -0.5]))
    for _ in range(3):
        st_, r, done = envs.step(s, st_, np.zeros(2))
    assert done and not st_.succeeded and st_.t == 3


def _expert_success(spec, n, noise, seed):
    trajs = run_episodes(spec, n, seed, "expert", expert_noise=noise)
    return np.mean([t.succeeded for t in trajs]), trajs


def test_expert_succeeds_on_1000_starts():
    s = EnvSpec()
    rate, trajs = _expert_success(s, 1000, 0.1 * s.action_scale, 0)
    assert rate >= 0.99
    for t in trajs:  # sparse return is 1 iff succeeded
        assert t.rewards.sum() == float(t.succeeded)


def test_expert_with_larger_noise():
    s = EnvSpec()
    rate, _ = _expert_success(s, 500, 0.3 * s.action_scale, 1)
    assert rate >= 0.90


def test_expert_directions():
    s = EnvSpec(gap_center=0.2, goal=(-0.3, 0.6))
    rng = np.random.default_rng(0)
    above = EnvState(agent=np.array([0.4, 0.2]))
    a = envs.scripted_expert(s, above, noise_std=0.0, rng=rng)
    d = np.array(s.goal) - above.agent
    assert a @ d / (np.linalg.norm(a) * np.linalg.norm(d)) > 0.99
    below = EnvState(agent=np.array([-0.7, -0.6]))
    a = envs.scripted_expert(s, below, noise_std=0.0, rng=rng)
    d = np.array([s.gap_center, s.wall_y]) - below.agent
    assert a @ d / (np.linalg.norm(a) * np.linalg.norm(d)) > 0.99


def test_task_family():
    fam = envs.make_task_family(3, size=4)
    assert len(fam) == 4 and len(set(fam)) == 4
    base = EnvSpec()
    for f in fam:
        assert f.horizon == base.horizon and f.action_scale == base.action_scale
        assert f.gap_width == base.gap_width and f.wall_y == base.wall_y
        rate, _ = _expert_success(f, 200, 0.1 * f.action_scale, 2)
        assert rate >= 0.90


def test_no_wall_crossing_in_noisy_rollouts():
    s = EnvSpec(perturbation=0.05)
    trajs = run_episodes(s, 100, 3, "expert", expert_noise=0.5 * s.action_scale)
    for t in trajs:
        pos = np.vstack([t.states[:, :2], t.final_state[None, :2]])
        for p, q in zip(pos[:-1], pos[1:]):
            assert not envs.segment_crosses_wall(s, p, q)


@settings(max_examples=200, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_move_never_crosses_wall(x, y, ax, ay):
    s = EnvSpec()
    p = np.array([[x, y]])
    q = envs.move(s, p, np.array([[ax, ay]]) * 0.5)
    assert not envs.segment_crosses_wall(s, p[0], q[0])
    assert np.all(np.abs(q) <= 1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, -0.01), st.floats(-1, 1), st.floats(-1, 1))
def test_deterministic_dynamics(x, y, ax, ay):
    s = EnvSpec()
    st_ = EnvState(agent=np.array([x, y]))
    a, b = envs.step(s, st_, np.array([ax, ay])), envs.step(s, st_, np.array([ax, ay]))
    assert np.array_equal(a[0].agent, b[0].agent) and a[1:] == b[1:]
