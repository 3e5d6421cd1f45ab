import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import wall_distance
from oodaug import data, envs
from oodaug.critic import CriticEnsemble
from oodaug.policy import GaussianPolicy
from oodaug.sampler import (ConfigurationError, SamplerConfig, collect_exploratory, compute_tau_q,
                            exploratory_choice, run_episodes, select_action)


def enumerate_choice(log_probs, q_values, tau):
    """Exhaustive oracle: scan every candidate, keep the best admissible one."""
    best, best_lp = None, None
    for i, (lp, q) in enumerate(zip(log_probs, q_values)):
        if q < tau and (best is None or lp > best_lp):
            best, best_lp = i, lp
    return -1 if best is None else best


def random_pair(seed=0):
    rng = np.random.default_rng(seed)
    return (GaussianPolicy(6, 2, (16,), rng=rng), CriticEnsemble(6, 2, (16,), rng=rng))


def test_small_worked_example():
    lp = np.array([-1.0, -2.0, -3.0])
    q = np.array([0.9, 0.2, 0.1])
    assert exploratory_choice(lp, q, 0.5) == 1
    assert exploratory_choice(lp, q, 0.05) == -1


def test_choice_matches_enumeration_1000_sets():
    rng = np.random.default_rng(0)
    for trial in range(1000):
        # coarse rounding creates ties, which must go to the lowest index
        lp = np.round(rng.normal(-3, 1, size=10), 1 if trial % 2 else 6)
        q = rng.uniform(0, 1, size=10)
        tau = rng.uniform(0, 1)
        assert exploratory_choice(lp, q, tau) == enumerate_choice(lp, q, tau)


def test_batched_choice_matches_rows():
    rng = np.random.default_rng(1)
    lp, q = rng.normal(size=(50, 10)), rng.uniform(size=(50, 10))
    got = exploratory_choice(lp, q, 0.3)
    assert list(got) == [enumerate_choice(a, b, 0.3) for a, b in zip(lp, q)]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(-1, 2), st.floats(0, 1))
def test_raising_tau_never_removes_interventions(seed, tau, bump):
    rng = np.random.default_rng(seed)
    lp, q = rng.normal(size=(20, 10)), rng.uniform(size=(20, 10))
    lo = exploratory_choice(lp, q, tau) >= 0
    hi = exploratory_choice(lp, q, tau + bump) >= 0
    assert np.all(hi[lo])


def test_select_action_contract():
    pol, crit = random_pair()
    rng = np.random.default_rng(2)
    states = envs.observe(envs.EnvSpec(), rng.uniform(-1, 1, size=(40, 2)))
    cfg = SamplerConfig()
    qs = crit.q_min(states, pol.mean_action(states))
    tau = float(np.median(qs))
    n_int = 0
    for s in states:
        cs = select_action(pol, crit, s, cfg, np.random.default_rng(5), tau)
        assert cs.actions.shape == (10, 2) and len(cs.q_values) == 10
        if cs.intervened:
            n_int += 1
            assert cs.q_values[cs.chosen_index] < tau
            assert np.array_equal(cs.executed, cs.actions[cs.chosen_index])
        else:
            assert np.all(cs.q_values >= tau)
            assert np.array_equal(cs.executed, pol.mean_action(s))
    assert 0 < n_int < len(states)


def test_select_action_falls_back_to_mode():
    pol, crit = random_pair(1)
    s = envs.observe(envs.EnvSpec(), np.array([0.2, -0.4]))
    cs = select_action(pol, crit, s, SamplerConfig(), np.random.default_rng(0), tau_q=-1e9)
    assert not cs.intervened and cs.chosen_index is None
    assert np.array_equal(cs.executed, pol.mean_action(s))


def test_select_action_deterministic():
    pol, crit = random_pair(2)
    s = envs.observe(envs.EnvSpec(), np.array([-0.3, -0.6]))
    a = select_action(pol, crit, s, SamplerConfig(), np.random.default_rng(9), 0.0)
    b = select_action(pol, crit, s, SamplerConfig(), np.random.default_rng(9), 0.0)
    assert np.array_equal(a.actions, b.actions) and a.chosen_index == b.chosen_index


def test_missing_critic_is_configuration_error():
    pol, _ = random_pair()
    s = envs.observe(envs.EnvSpec(), np.zeros(2))
    with pytest.raises(ConfigurationError):
        select_action(pol, None, s, SamplerConfig(), np.random.default_rng(0), 0.5)
    with pytest.raises(ConfigurationError):
        collect_exploratory(pol, None, envs.EnvSpec(), SamplerConfig(), 2, 0, 0.5)


def _scored_dataset(n_traj=100, seed=3):
    rng = np.random.default_rng(seed)
    spec = envs.EnvSpec()
    trajs = []
    for _ in range(n_traj):
        T = 10
        trajs.append(data.Trajectory(envs.observe(spec, rng.uniform(-1, 1, size=(T, 2))),
                                     rng.uniform(-1, 1, size=(T, 2)), np.zeros(T),
                                     [False] * (T - 1) + [True], np.zeros(6)))
    return data.Dataset(trajs, spec.spec_id).annotate(0.99)


def test_tau_fixed_and_quantiles():
    _, crit = random_pair(3)
    ds = _scored_dataset()
    flat = ds.transitions()
    q = crit.q_min(flat["s"], flat["a"])
    assert len(q) == 1000
    assert compute_tau_q(crit, ds, ("fixed", 0.5)) == 0.5
    assert compute_tau_q(crit, ds, ("quantile", 1e-12)) == q.min()
    srt = np.sort(q)
    assert compute_tau_q(crit, ds, ("quantile", 0.2)) == srt[int(np.floor(0.2 * (len(q) - 1)))]
    with pytest.raises(ValueError):
        compute_tau_q(crit, data.Dataset([], "x").seal(), ("quantile", 0.2))


def test_sampler_config_validation():
    for bad in ({"k": 0}, {"tau_q_mode": ("quantile", 1.0)}, {"intervention_budget": -1},
                {"intervention_window": 0.0}, {"mode": "oracle"}):
        with pytest.raises(ValueError):
            SamplerConfig(**bad)


def test_budget_zero_equals_plain_rollouts():
    pol, crit = random_pair(4)
    spec = envs.EnvSpec(perturbation=0.03)
    cfg = SamplerConfig(intervention_budget=0)
    plain = run_episodes(spec, 20, 11, "nominal", policy=pol)
    expl, summary = collect_exploratory(pol, crit, spec, cfg, 20, 11, tau_q=1e9)
    assert summary["interventions"] == 0 and "warning" not in summary
    for a, b in zip(plain, expl):
        assert np.array_equal(a.states, b.states) and np.array_equal(a.actions, b.actions)
        assert b.intervention_indices == [] and b.provenance == "exploratory"


def test_budget_one_within_window():
    pol, crit = random_pair(5)
    spec = envs.EnvSpec()
    cfg = SamplerConfig(intervention_budget=1, intervention_window=0.5)
    trajs, summary = collect_exploratory(pol, crit, spec, cfg, 30, 12, tau_q=1e9)
    assert summary["episodes_with_intervention"] == 30
    for t in trajs:
        assert len(t.intervention_indices) == 1
        assert t.intervention_indices[0] < 0.5 * spec.horizon
    again, _ = collect_exploratory(pol, crit, spec, cfg, 30, 12, tau_q=1e9)
    assert all(np.array_equal(a.states, b.states) for a, b in zip(trajs, again))


def test_later_window_steps_and_budget_two():
    pol, crit = random_pair(6)
    spec = envs.EnvSpec(horizon=20, start_low=(0.7, -0.9), start_high=(0.8, -0.8))
    cfg = SamplerConfig(intervention_budget=2, intervention_window=0.25)
    trajs, _ = collect_exploratory(pol, crit, spec, cfg, 10, 13, tau_q=1e9)
    for t in trajs:
        assert t.intervention_indices == [0, 1]


def test_zero_interventions_warns(caplog):
    pol, crit = random_pair(7)
    with caplog.at_level(logging.WARNING):
        _, summary = collect_exploratory(pol, crit, envs.EnvSpec(), SamplerConfig(), 5, 0, tau_q=-1e9)
    assert summary["warning"] == "no interventions"
    assert "tau_q" in caplog.text


@pytest.mark.xfail(strict=True, reason="with budget 1 and a 0.2-quantile threshold the rule fires at the "
                   "first step, far from the wall; see the decisions ledger")
def test_exploration_shifts_visitation_toward_wall(one_round):
    cfg, _, arts = one_round
    spec = cfg.spec
    pol, crit = arts.baseline_policy, arts.critic
    tau = compute_tau_q(crit, arts.critic_data, cfg.sampler.tau_q_mode)
    nominal = run_episodes(spec, 500, 7, "nominal", policy=pol)
    explore, _ = collect_exploratory(pol, crit, spec, cfg.sampler, 500, 7, tau)
    sr_nom = np.mean([t.succeeded for t in nominal])
    sr_exp = np.mean([t.succeeded for t in explore])
    d_nom = np.mean([wall_distance(spec, t.states[:, :2]).min() for t in nominal])
    d_exp = np.mean([wall_distance(spec, t.states[:, :2]).min() for t in explore])
    assert sr_nom >= 0.85
    assert sr_exp < sr_nom and d_exp < d_nom
