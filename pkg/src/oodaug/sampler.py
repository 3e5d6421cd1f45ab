"""Critic-guided exploratory sampling and episode collection.

At an eligible step the deployed policy proposes ``k`` candidate actions.
Candidates whose value ``min(q1, q2)`` falls below ``tau_q`` form the
exploratory subset; if it is non-empty the most likely member is executed
(a "confident mistake"), otherwise the policy's nominal action is.  After the
per-episode budget is spent the nominal action drives the rest of the episode.

All collection runs episodes in lockstep so network calls are batched.  Each
episode owns an RNG stream spawned from the caller's seed, so an episode's
outcome does not depend on how many others run beside it.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import envs
from .data import Trajectory

log = logging.getLogger(__name__)

MODES = ("critic", "random", "nominal", "sample", "expert")


class ConfigurationError(ValueError):
    pass


@dataclass
class SamplerConfig:
    k: int = 10
    tau_q_mode: tuple = ("quantile", 0.2)
    intervention_budget: int = 1
    intervention_window: float = 0.5
    rollout_count: int = 200
    mode: str = "critic"

    def __post_init__(self):
        self.tau_q_mode = tuple(self.tau_q_mode)
        kind, value = self.tau_q_mode
        if kind == "quantile" and not 0 < value < 1:
            raise ValueError("quantile must lie in (0, 1)")
        if kind not in ("quantile", "fixed"):
            raise ValueError(f"unknown tau_q mode {kind!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.intervention_budget < 0:
            raise ValueError("budget must be >= 0")
        if not 0 < self.intervention_window <= 1:
            raise ValueError("window must lie in (0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass
class CandidateSet:
    state: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    q_values: np.ndarray
    tau_q: float
    chosen_index: int | None
    intervened: bool
    executed: np.ndarray = field(default=None)


def exploratory_choice(log_probs, q_values, tau_q):
    """Index of the most likely candidate with ``q < tau_q`` per row, or -1.

    Works on ``(K,)`` or ``(N, K)`` inputs; ties go to the lowest index.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    q = np.asarray(q_values, dtype=np.float64)
    single = lp.ndim == 1
    lp, q = np.atleast_2d(lp), np.atleast_2d(q)
    mask = q < tau_q
    masked = np.where(mask, lp, -np.inf)
    idx = np.argmax(masked, axis=1)
    idx = np.where(mask.any(axis=1), idx, -1)
    return int(idx[0]) if single else idx


def select_action(policy, critic, state, cfg, rng, tau_q, eligible=True):
    """Apply the intervention rule at one state; returns a ``CandidateSet``."""
    if critic is None:
        raise ConfigurationError("exploratory sampling needs a trained critic")
    state = np.asarray(state, dtype=np.float64)
    cands, logp = policy.sample_n(state[None, :], cfg.k, rng)
    q = critic.q_min_candidates(state[None, :], cands)
    idx = exploratory_choice(logp[0], q[0], tau_q) if eligible else -1
    if idx >= 0:
        executed = cands[0, idx]
    else:
        executed = policy.mean_action(state)
    return CandidateSet(state, cands[0], logp[0], q[0], float(tau_q),
                        None if idx < 0 else idx, idx >= 0, executed)


def compute_tau_q(critic, ds, mode):
    """Intervention threshold: a fixed value or a lower quantile of dataset Q."""
    kind, value = mode
    if kind == "fixed":
        return float(value)
    if kind != "quantile":
        raise ValueError(f"unknown tau_q mode {kind!r}")
    if len(ds) == 0:
        raise ValueError("quantile threshold needs a non-empty dataset")
    flat = ds.transitions()
    q = critic.q_min(flat["s"], flat["a"])
    return float(np.quantile(q, value, method="lower"))


def episode_rngs(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def run_episodes(spec, n, seed, mode, policy=None, critic=None, cfg=None, tau_q=None,
                 expert_noise=None, provenance="rollout"):
    """Run ``n`` episodes in lockstep and return their trajectories.

    ``mode`` picks the controller: ``expert`` (scripted, noisy), ``nominal``
    (policy mode), ``sample`` (policy samples), ``critic`` (intervention rule)
    or ``random`` (uniform pick among the candidates at eligible steps).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    cfg = cfg or SamplerConfig()
    if mode == "critic" and (critic is None or tau_q is None):
        raise ConfigurationError("critic mode needs a critic and tau_q")
    if mode != "expert" and policy is None:
        raise ConfigurationError(f"{mode} mode needs a policy")
    if expert_noise is None:
        expert_noise = 0.1 * spec.action_scale
    rngs = episode_rngs(seed, n)
    pos = np.stack([envs.reset(spec, r).agent for r in rngs]) if n else np.zeros((0, 2))
    act_dim = envs.ACTION_DIM
    H = spec.horizon
    obs_buf = np.zeros((n, H, envs.OBS_DIM))
    act_buf = np.zeros((n, H, act_dim))
    rew_buf = np.zeros((n, H))
    length = np.zeros(n, dtype=int)
    final = np.zeros((n, envs.OBS_DIM))
    succeeded = np.zeros(n, dtype=bool)
    used = np.zeros(n, dtype=int)
    interventions = [[] for _ in range(n)]
    active = np.ones(n, dtype=bool)
    window_end = cfg.intervention_window * H
    for t in range(H):
        ids = np.flatnonzero(active)
        if len(ids) == 0:
            break
        p = pos[ids]
        obs = envs.observe(spec, p)
        if mode == "expert":
            noise = np.stack([rngs[i].normal(0.0, expert_noise / spec.action_scale, size=act_dim)
                              for i in ids]) if expert_noise > 0 else None
            actions = envs.expert_actions(spec, p, noise)
        elif mode == "sample":
            mu, log_std = policy.dist_params(obs)
            eps = np.stack([rngs[i].standard_normal(act_dim) for i in ids])
            actions = np.tanh(mu + np.exp(log_std) * eps)
        else:
            actions = policy.mean_action(obs)
            if mode in ("critic", "random") and t < window_end:
                elig = used[ids] < cfg.intervention_budget
                if np.any(elig):
                    e_ids = ids[elig]
                    e_obs = obs[elig]
                    eps = np.stack([rngs[i].standard_normal((cfg.k, act_dim)) for i in e_ids])
                    cands, logp = policy.candidates_from_noise(e_obs, eps)
                    if mode == "critic":
                        q = critic.q_min_candidates(e_obs, cands)
                        choice = exploratory_choice(logp, q, tau_q)
                    else:
                        choice = np.array([rngs[i].integers(cfg.k) for i in e_ids])
                    hit = choice >= 0
                    rows = np.flatnonzero(elig)[hit]
                    actions[rows] = cands[np.flatnonzero(hit), choice[hit]]
                    for i in e_ids[hit]:
                        used[i] += 1
                        interventions[i].append(t)
        noise = None
        if spec.perturbation > 0:
            noise = np.stack([rngs[i].normal(0.0, spec.perturbation, size=2) for i in ids])
        new, rew, success, timeout = envs.step_batch(spec, p, t, actions, noise)
        obs_buf[ids, t] = obs
        act_buf[ids, t] = np.clip(actions, -1.0, 1.0)
        rew_buf[ids, t] = rew
        length[ids] = t + 1
        pos[ids] = new
        done = success | timeout
        succeeded[ids[success]] = True
        for j in np.flatnonzero(done):
            final[ids[j]] = envs.observe(spec, new[j])
        active[ids[done]] = False
    trajs = []
    for i in range(n):
        T = length[i]
        dones = np.zeros(T, dtype=bool)
        dones[-1] = True
        trajs.append(Trajectory(
            states=obs_buf[i, :T].copy(), actions=act_buf[i, :T].copy(),
            rewards=rew_buf[i, :T].copy(), dones=dones, final_state=final[i].copy(),
            provenance=provenance, succeeded=bool(succeeded[i]),
            intervention_indices=interventions[i] if provenance == "exploratory" else []))
    return trajs


def collect_demos(spec, n, seed, noise_std=None):
    """Scripted-expert demonstrations (unperturbed); only successes are kept.

    Episodes are drawn in order until ``n`` successes are gathered.
    """
    clean = spec.replace(perturbation=0.0)
    out = []
    batch_seed = 0
    while len(out) < n:
        trajs = run_episodes(clean, n, (seed, batch_seed), "expert", expert_noise=noise_std,
                             provenance="demo")
        out.extend(t for t in trajs if t.succeeded)
        batch_seed += 1
    return out[:n]


def collect_exploratory(policy, critic, spec, cfg, n_episodes, seed, tau_q=None):
    """Rollouts under the intervention rule (or an ablation ``cfg.mode``).

    Returns ``(trajectories, summary)``.
    """
    mode = cfg.mode
    if mode == "critic" and critic is None:
        raise ConfigurationError("critic-guided collection needs a trained critic")
    trajs = run_episodes(spec, n_episodes, seed, mode, policy=policy, critic=critic, cfg=cfg,
                         tau_q=tau_q, provenance="exploratory")
    n_int = sum(len(t.intervention_indices) for t in trajs)
    summary = {
        "episodes": n_episodes,
        "interventions": n_int,
        "intervention_rate": n_int / max(1, sum(len(t) for t in trajs)),
        "episodes_with_intervention": sum(bool(t.intervention_indices) for t in trajs),
        "success_rate": float(np.mean([t.succeeded for t in trajs])) if trajs else 0.0,
        "tau_q": tau_q,
        "mode": mode,
    }
    if mode in ("critic", "random") and cfg.intervention_budget > 0 and n_int == 0 and n_episodes:
        log.warning("no interventions in %d episodes; tau_q=%s is probably too low", n_episodes, tau_q)
        summary["warning"] = "no interventions"
    return trajs, summary
