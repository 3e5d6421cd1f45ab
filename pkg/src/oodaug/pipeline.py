"""End-to-end refinement loop, evaluation and the experiment drivers.

One run: expert demos -> BC policy and proxy actor -> nominal rollouts ->
critic -> [threshold -> exploratory rollouts -> keep recoveries -> mix ->
retrain policy -> retrain critic] x rounds -> perturbed evaluation.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import data, envs, sampler
from .critic import CriticConfig, CriticEnsemble, critic_train, conservatism_gap
from .policy import BCConfig, GaussianPolicy, bc_train

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class ExperimentConfig:
    env: dict = field(default_factory=lambda: envs.EnvSpec().to_dict())
    demo_count: int = 60
    demo_noise: float | None = None
    policy_hidden: tuple = (64, 64)
    bc: BCConfig = field(default_factory=BCConfig)
    critic: CriticConfig = field(default_factory=lambda: CriticConfig(steps=2000, diag_every=500,
                                                                     dtype="float32"))
    critic_steps_per_round: int = 1000
    initial_rollouts: int = 200
    critic_rollout_mode: str = "sample"
    sampler: sampler.SamplerConfig = field(default_factory=sampler.SamplerConfig)
    explore_perturbation: float | None = None  # None -> eval_perturbation
    mix_ratio: float = 0.4
    refinement_rounds: int = 2
    retrain: str = "scratch"
    eval_episodes: int = 200
    eval_perturbation: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.bc, dict):
            self.bc = BCConfig(**self.bc)
        if isinstance(self.critic, dict):
            self.critic = CriticConfig(**self.critic)
        if isinstance(self.sampler, dict):
            self.sampler = sampler.SamplerConfig(**self.sampler)
        self.policy_hidden = tuple(self.policy_hidden)
        envs.EnvSpec.from_dict(self.env)
        if not 0 <= self.mix_ratio < 1:
            raise ValueError("mix_ratio must lie in [0, 1)")
        if self.refinement_rounds < 0 or self.demo_count < 1:
            raise ValueError("refinement_rounds >= 0 and demo_count >= 1 required")
        if self.retrain not in ("scratch", "finetune"):
            raise ValueError("retrain must be 'scratch' or 'finetune'")
        if self.critic_rollout_mode not in ("sample", "nominal"):
            raise ValueError("critic_rollout_mode must be 'sample' or 'nominal'")
        if self.eval_episodes < 1:
            raise ValueError("eval_episodes must be >= 1")

    @property
    def spec(self):
        return envs.EnvSpec.from_dict(self.env)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["sampler"]["tau_q_mode"] = list(d["sampler"]["tau_q_mode"])
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**copy.deepcopy(d))

    def config_hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def with_overrides(self, **kw):
        """Copy with dotted-key overrides, e.g. ``{"critic.steps": 100}``."""
        d = self.to_dict()
        for key, value in kw.items():
            set_dotted(d, key, value)
        return ExperimentConfig.from_dict(d)


def set_dotted(d, key, value):
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise KeyError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise KeyError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def _sha(blob):
    return hashlib.sha256(blob).hexdigest()


# --------------------------------------------------------------- evaluation

def wilson_interval(k, n, level=0.95):
    z = stats.norm.ppf(0.5 + level / 2)
    p = k / n
    den = 1 + z * z / n
    center = (p + z * z / (2 * n)) / den
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return float(max(0.0, center - half)), float(min(1.0, center + half))


def evaluate(policy, spec, n, perturbation_std, seed):
    """Success rate of nominal-action execution under state perturbation.

    ``policy`` may be the string ``"expert"`` for the scripted controller
    (noise-free actions).
    """
    if n <= 0:
        raise ValueError("evaluation needs at least one episode")
    pspec = spec.replace(perturbation=perturbation_std)
    if isinstance(policy, str) and policy == "expert":
        trajs = sampler.run_episodes(pspec, n, seed, "expert", expert_noise=0.0)
    else:
        trajs = sampler.run_episodes(pspec, n, seed, "nominal", policy=policy)
    k = sum(t.succeeded for t in trajs)
    lo, hi = wilson_interval(k, n)
    return {
        "success_rate": k / n,
        "ci95": [lo, hi],
        "episodes": [{"succeeded": t.succeeded, "length": len(t),
                      "final": t.final_state[:2].tolist()} for t in trajs],
    }


# ------------------------------------------------------------------ helpers

class _Seeds:
    """Named, order-independent child seeds of the master seed."""

    def __init__(self, master):
        self.master = int(master)

    def __call__(self, *names):
        key = [self.master] + [int(hashlib.sha256(str(n).encode()).hexdigest()[:8], 16) for n in names]
        return int(np.random.SeedSequence(key).generate_state(1)[0])


def train_policy(ds, cfg, seed, role="deployed", init=None):
    obs_dim = ds.state_dim
    if init is None:
        pol = GaussianPolicy(obs_dim, envs.ACTION_DIM, cfg.policy_hidden,
                             rng=np.random.default_rng(seed), role=role)
    else:
        pol = init.copy(role=role)
    bc_cfg = dataclasses.replace(cfg.bc, seed=seed)
    pol, losses = bc_train(pol, ds, bc_cfg)
    return pol, losses


def make_demo_dataset(cfg, spec, seed):
    demos = sampler.collect_demos(spec, cfg.demo_count, seed, cfg.demo_noise)
    return data.Dataset(demos, spec.spec_id).annotate(cfg.critic.gamma)


@dataclass
class RunArtifacts:
    demos: data.Dataset
    policy: GaussianPolicy
    proxy: GaussianPolicy | None = None
    critic: CriticEnsemble | None = None
    pool: list = field(default_factory=list)
    critic_data: data.Dataset | None = None
    baseline_policy: GaussianPolicy | None = None


class _Recorder:
    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.hashes = {}
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)

    def put(self, name, blob):
        self.hashes[name] = _sha(blob)
        if self.out_dir:
            with open(os.path.join(self.out_dir, name), "wb") as f:
                f.write(blob)


def run_pipeline(cfg, out_dir=None, return_artifacts=False):
    """Full refinement loop; returns a JSON-serializable report dict."""
    t0 = time.time()
    spec = cfg.spec
    seeds = _Seeds(cfg.seed)
    rec = _Recorder(out_dir)
    explore_pert = cfg.eval_perturbation if cfg.explore_perturbation is None else cfg.explore_perturbation
    explore_spec = spec.replace(perturbation=explore_pert)
    report = {"config_hash": cfg.config_hash(), "seed": cfg.seed, "rounds": []}
    stage = "collect"
    try:
        demos = make_demo_dataset(cfg, spec, seeds("demos"))
        rec.put("demos.jsonl", data.to_bytes(demos))

        stage = "train-bc"
        policy, losses = train_policy(demos, cfg, seeds("bc", 0))
        rec.put("policy_r0.npz", policy.to_bytes())
        report["bc"] = {"final_nll": losses[-1], "epochs": len(losses) - 1}

        stage = "eval"
        base = evaluate(policy, spec, cfg.eval_episodes, cfg.eval_perturbation, seeds("eval"))
        report["baseline"] = {"success_rate": base["success_rate"], "ci95": base["ci95"]}
        arts = RunArtifacts(demos=demos, policy=policy, baseline_policy=policy)

        if cfg.refinement_rounds > 0:
            stage = "train-critic"
            proxy, _ = train_policy(demos, cfg, seeds("proxy"), role="proxy")
            rec.put("proxy_r0.npz", proxy.to_bytes())
            rollouts = sampler.run_episodes(explore_spec, cfg.initial_rollouts, seeds("rollouts", 0),
                                            cfg.critic_rollout_mode, policy=policy)
            rec.put("rollouts_r0.jsonl",
                    data.to_bytes(data.Dataset(rollouts, spec.spec_id).annotate(cfg.critic.gamma)))
            critic_trajs = list(demos) + rollouts
            critic_ds = data.Dataset(critic_trajs, spec.spec_id).annotate(cfg.critic.gamma)
            ccfg = dataclasses.replace(cfg.critic, seed=seeds("critic"))
            critic = CriticEnsemble(demos.state_dim, envs.ACTION_DIM, ccfg.hidden,
                                    rng=np.random.default_rng(seeds("critic-init")),
                                    dtype=np.dtype(ccfg.dtype))
            critic, trainer, diags = critic_train(critic, proxy, critic_ds, ccfg)
            rec.put("critic_r0.npz", critic.to_bytes(ccfg))
            report["critic"] = {"diagnostics": diags,
                                "initial_rollout_success": float(np.mean([t.succeeded for t in rollouts]))}
            pool = []
            for r in range(1, cfg.refinement_rounds + 1):
                stage = "explore"
                tau_q = sampler.compute_tau_q(critic, critic_ds, cfg.sampler.tau_q_mode)
                trajs, summary = sampler.collect_exploratory(
                    policy, critic, explore_spec, cfg.sampler, cfg.sampler.rollout_count,
                    seeds("explore", r), tau_q)
                policy_set, critic_set = data.filter_recoveries(trajs)
                pool.extend(policy_set)
                rec.put(f"explore_r{r}.jsonl",
                        data.to_bytes(data.Dataset(trajs, spec.spec_id).annotate(cfg.critic.gamma)))

                stage = "augment"
                if pool:
                    mixed = data.mix(demos, data.Dataset(pool, spec.spec_id).annotate(cfg.critic.gamma),
                                     cfg.mix_ratio, np.random.default_rng(seeds("mix", r)))
                else:
                    mixed = demos
                rec.put(f"mixed_r{r}.jsonl", data.to_bytes(mixed))

                stage = "retrain"
                init = policy if cfg.retrain == "finetune" else None
                policy, losses = train_policy(mixed, cfg, seeds("bc", r), init=init)
                rec.put(f"policy_r{r}.npz", policy.to_bytes())

                stage = "train-critic"
                critic_trajs.extend(critic_set)
                critic_ds = data.Dataset(critic_trajs, spec.spec_id).annotate(cfg.critic.gamma)
                critic, trainer, diags = critic_train(critic, proxy, critic_ds, ccfg,
                                                      steps=cfg.critic_steps_per_round, trainer=trainer)
                rec.put(f"critic_r{r}.npz", critic.to_bytes(ccfg))

                stage = "eval"
                ev = evaluate(policy, spec, cfg.eval_episodes, cfg.eval_perturbation, seeds("eval"))
                flat = critic_ds.transitions()
                gap = conservatism_gap(critic, flat["s"][:256], flat["a"][:256], np.random.default_rng(0))
                report["rounds"].append({
                    "round": r, "tau_q": tau_q, "explore": summary,
                    "recoveries": len(policy_set), "pool_size": len(pool),
                    "mixed_size": len(mixed), "bc_final_nll": losses[-1],
                    "success_rate": ev["success_rate"], "ci95": ev["ci95"],
                    "conservatism_gap": gap, "critic_diagnostics": diags,
                })
            arts.policy, arts.proxy, arts.critic = policy, proxy, critic
            arts.pool, arts.critic_data = pool, critic_ds
            report["final"] = {"success_rate": report["rounds"][-1]["success_rate"],
                               "ci95": report["rounds"][-1]["ci95"]}
        else:
            report["final"] = dict(report["baseline"])
    except Exception as exc:
        report["failed_stage"] = stage
        report["artifacts"] = rec.hashes
        if out_dir:
            with open(os.path.join(out_dir, "report.partial.json"), "w") as f:
                json.dump(report, f, indent=2, default=float)
        raise StageError(stage, exc) from exc
    report["improvement"] = report["final"]["success_rate"] - report["baseline"]["success_rate"]
    report["artifacts"] = rec.hashes
    report["wall_clock_s"] = time.time() - t0
    if out_dir:
        with open(os.path.join(out_dir, "report.json"), "w") as f:
            json.dump(report, f, indent=2, default=float)
    return (report, arts) if return_artifacts else report


def strip_timing(report):
    """Report without wall-clock fields, for determinism comparisons."""
    r = copy.deepcopy(report)
    r.pop("wall_clock_s", None)
    return r


# -------------------------------------------------------------- experiments

ABLATION_ARMS = ("raw", "no_sampling", "random", "ours")
_ARM_MODE = {"no_sampling": "nominal", "random": "random", "ours": "critic"}


def matched_ratio(extra_fraction=0.1):
    """Mix ratio that adds ``extra_fraction * |source|`` augmented trajectories."""
    return extra_fraction / (1.0 + extra_fraction)


def run_ablation(cfg, seeds=(0,), extra_fraction=0.1):
    """Four arms with matched seeds and augmentation volume.

    Returns ``{"per_seed": [...], "mean": {arm: rate}}``.
    """
    ratio = matched_ratio(extra_fraction)
    rows = []
    for s in seeds:
        base = cfg.with_overrides(seed=s)
        row = {"seed": s}
        raw = run_pipeline(base.with_overrides(refinement_rounds=0))
        row["raw"] = raw["final"]["success_rate"]
        row["demo_hash"] = {"raw": raw["artifacts"]["demos.jsonl"]}
        for arm, mode in _ARM_MODE.items():
            rep = run_pipeline(base.with_overrides(**{"sampler.mode": mode, "mix_ratio": ratio}))
            row[arm] = rep["final"]["success_rate"]
            row["demo_hash"][arm] = rep["artifacts"]["demos.jsonl"]
        rows.append(row)
    mean = {arm: float(np.mean([r[arm] for r in rows])) for arm in ABLATION_ARMS}
    return {"per_seed": rows, "mean": mean, "mix_ratio": ratio}


def run_ratio_sweep(cfg, ratios=(0.1, 0.2, 0.4, 0.5), seeds=(0,)):
    """Final success rate for each mixing ratio; rows sorted by ratio."""
    ratios = sorted(float(r) for r in ratios)
    per_seed = []
    for s in seeds:
        curve = []
        for r in ratios:
            rep = run_pipeline(cfg.with_overrides(seed=s, mix_ratio=r))
            curve.append({"ratio": r, "success_rate": rep["final"]["success_rate"]})
        per_seed.append({"seed": s, "curve": curve,
                         "best_ratio": max(curve, key=lambda c: c["success_rate"])["ratio"]})
    mean_curve = [{"ratio": r, "success_rate": float(np.mean([p["curve"][i]["success_rate"]
                                                              for p in per_seed]))}
                  for i, r in enumerate(ratios)]
    return {"ratios": ratios, "per_seed": per_seed, "mean_curve": mean_curve}


def sweep_csv(sweep):
    lines = ["seed,ratio,success_rate"]
    for p in sweep["per_seed"]:
        for c in p["curve"]:
            lines.append(f"{p['seed']},{c['ratio']},{c['success_rate']}")
    return "\n".join(lines) + "\n"


def run_cross_task(cfg, family, source_indices=None, seed=None):
    """Transfer of exploratory data between tasks of one family.

    For each target task, compares BC on its own demos with BC on its demos
    mixed with recoveries generated on the source tasks.  With
    ``source_indices=None`` each task is a target and every other task is a
    source.  Returns per-task deltas and their mean.
    """
    seed = cfg.seed if seed is None else seed
    pools = {}

    def pool_for(i):
        if i not in pools:
            c = cfg.with_overrides(env=family[i].to_dict(), seed=seed)
            _, arts = run_pipeline(c, return_artifacts=True)
            pools[i] = arts.pool
        return pools[i]

    rows = []
    for j, target in enumerate(family):
        sources = [i for i in range(len(family)) if i != j] if source_indices is None else list(source_indices)
        if source_indices is not None and j in sources and len(sources) > 1:
            sources = [i for i in sources if i != j]
        tcfg = cfg.with_overrides(env=target.to_dict(), seed=seed)
        seeds = _Seeds(seed)
        demos = make_demo_dataset(tcfg, target, seeds("demos"))
        own, _ = train_policy(demos, tcfg, seeds("bc", 0))
        own_rate = evaluate(own, target, cfg.eval_episodes, cfg.eval_perturbation, seeds("eval"))["success_rate"]
        pool = [t for i in sources for t in pool_for(i)]
        if pool:
            # recoveries from other tasks keep their own task parameters in the observation
            mixed = data.mix(demos, data.Dataset(pool, target.spec_id).annotate(cfg.critic.gamma),
                             cfg.mix_ratio, np.random.default_rng(seeds("mix", "xfer")))
        else:
            mixed = demos
        xfer, _ = train_policy(mixed, tcfg, seeds("bc", 0))
        x_rate = evaluate(xfer, target, cfg.eval_episodes, cfg.eval_perturbation, seeds("eval"))["success_rate"]
        rows.append({"task": j, "sources": sources, "own": own_rate, "transfer": x_rate,
                     "delta": x_rate - own_rate, "pool_size": len(pool)})
    return {"seed": seed, "tasks": rows, "mean_delta": float(np.mean([r["delta"] for r in rows]))}


def _num(x):
    return repr(float(x))  # shortest round-trip text


def q_grid(critic, state, n=41):
    """``min(q1, q2)`` over an ``n x n`` grid of the action box, as CSV text."""
    g = np.linspace(-1, 1, n)
    ax, ay = np.meshgrid(g, g, indexing="ij")
    acts = np.stack([ax.ravel(), ay.ravel()], axis=1)
    q = critic.q_min(np.repeat(np.atleast_2d(state), len(acts), axis=0), acts)
    lines = ["a0,a1,q"] + [",".join(map(_num, (a[0], a[1], v))) for a, v in zip(acts, q)]
    return "\n".join(lines) + "\n"


def trace_csv(traj):
    lines = ["t,x,y,action0,action1,reward"]
    for t in range(len(traj)):
        s, a = traj.states[t], traj.actions[t]
        lines.append(",".join([str(t), *map(_num, (s[0], s[1], a[0], a[1], traj.rewards[t]))]))
    f = traj.final_state
    lines.append(f"{len(traj)},{_num(f[0])},{_num(f[1])},,,")
    return "\n".join(lines) + "\n"
