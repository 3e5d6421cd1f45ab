"""Command-line entry point: one verb per pipeline stage plus the experiment drivers.

Every verb reads the same experiment config (YAML or JSON).  ``--set
key=value`` overrides any dotted key and the named flags are shorthands for
common keys.  Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np
import yaml

from . import data, envs, pipeline, sampler
from .critic import CriticEnsemble, critic_train
from .pipeline import ExperimentConfig, StageError, _Seeds
from .policy import GaussianPolicy

log = logging.getLogger("oodaug")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

# shorthand flag -> config key
FLAG_KEYS = {
    "seed": "seed",
    "rounds": "refinement_rounds",
    "episodes": "eval_episodes",
    "perturbation": "eval_perturbation",
    "mix_ratio": "mix_ratio",
    "demo_count": "demo_count",
    "critic_steps": "critic.steps",
    "epochs": "bc.epochs",
    "rollouts": "sampler.rollout_count",
}


class ConfigError(Exception):
    pass


def load_config(path=None, sets=(), flags=None):
    d = ExperimentConfig().to_dict()
    if path:
        try:
            with open(path) as f:
                loaded = yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a mapping")
        for key, value in _flatten(loaded):
            _set(d, key, value)
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _set(d, key.strip(), yaml.safe_load(raw))
    for flag, key in FLAG_KEYS.items():
        value = (flags or {}).get(flag)
        if value is not None:
            _set(d, key, value)
    try:
        return ExperimentConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _flatten(d, prefix=""):
    for k, v in d.items():
        key = f"{prefix}{k}"
        # env, bc, critic and sampler are nested sections; anything else is a leaf
        if isinstance(v, dict) and not prefix and k in ("env", "bc", "critic", "sampler"):
            yield from _flatten(v, key + ".")
        else:
            yield key, v


def _set(d, key, value):
    try:
        pipeline.set_dotted(d, key, value)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from exc


# ------------------------------------------------------------------ helpers

def _write(path, blob):
    if os.path.dirname(path):
        os.makedirs(os.path.dirname(path), exist_ok=True)
    mode = "wb" if isinstance(blob, bytes) else "w"
    with open(path, mode) as f:
        f.write(blob)


def _emit_json(obj, path=None):
    text = json.dumps(obj, indent=2, default=float)
    if path:
        _write(path, text + "\n")
    else:
        print(text)


def _read(path):
    with open(path, "rb") as f:
        return f.read()


def _load_policy(path):
    return GaussianPolicy.from_bytes(_read(path))


def _load_critic(path):
    return CriticEnsemble.from_bytes(_read(path))[0]


def _gamma(cfg):
    return cfg.critic.gamma


def _explore_spec(cfg):
    p = cfg.eval_perturbation if cfg.explore_perturbation is None else cfg.explore_perturbation
    return cfg.spec.replace(perturbation=p)


# -------------------------------------------------------------------- verbs

def cmd_collect(cfg, args):
    seeds = _Seeds(cfg.seed)
    if args.rollouts_from:
        pol = _load_policy(args.rollouts_from)
        trajs = sampler.run_episodes(_explore_spec(cfg), cfg.initial_rollouts, seeds("rollouts", 0),
                                     cfg.critic_rollout_mode, policy=pol)
        ds = data.Dataset(trajs, cfg.spec.spec_id).annotate(_gamma(cfg))
    else:
        ds = pipeline.make_demo_dataset(cfg, cfg.spec, seeds("demos"))
    _write(args.out, data.to_bytes(ds))
    log.info("wrote %d trajectories to %s", len(ds), args.out)


def _merge(paths, cfg):
    trajs = []
    for p in paths:
        trajs.extend(data.load(p).trajectories)
    return data.Dataset(trajs, cfg.spec.spec_id).annotate(_gamma(cfg))


def cmd_train_bc(cfg, args):
    seeds = _Seeds(cfg.seed)
    ds = _merge(args.data, cfg)
    if args.role == "proxy":
        pol, losses = pipeline.train_policy(ds, cfg, seeds("proxy"), role="proxy")
    else:
        pol, losses = pipeline.train_policy(ds, cfg, seeds("bc", args.round))
    _write(args.out, pol.to_bytes())
    log.info("final NLL %.4f", losses[-1])


def cmd_retrain(cfg, args):
    seeds = _Seeds(cfg.seed)
    ds = _merge(args.data, cfg)
    init = _load_policy(args.init) if (args.init and cfg.retrain == "finetune") else None
    pol, losses = pipeline.train_policy(ds, cfg, seeds("bc", args.round), init=init)
    _write(args.out, pol.to_bytes())
    log.info("final NLL %.4f", losses[-1])


def cmd_train_critic(cfg, args):
    seeds = _Seeds(cfg.seed)
    ds = _merge(args.data, cfg)
    proxy = _load_policy(args.proxy)
    ccfg = dataclasses.replace(cfg.critic, seed=seeds("critic"))
    if args.steps is not None:
        ccfg = dataclasses.replace(ccfg, steps=args.steps)
    critic = CriticEnsemble(ds.state_dim, envs.ACTION_DIM, ccfg.hidden,
                            rng=np.random.default_rng(seeds("critic-init")), dtype=np.dtype(ccfg.dtype))
    critic, _, diags = critic_train(critic, proxy, ds, ccfg)
    _write(args.out, critic.to_bytes(ccfg))
    if args.proxy_out:
        _write(args.proxy_out, proxy.to_bytes())
    if args.report:
        _emit_json({"diagnostics": diags}, args.report)


def cmd_explore(cfg, args):
    seeds = _Seeds(cfg.seed)
    pol, critic = _load_policy(args.policy), _load_critic(args.critic)
    scfg = cfg.sampler
    if args.tau_q is not None:
        tau = float(args.tau_q)
    else:
        ref = _merge(args.data, cfg) if args.data else None
        if scfg.tau_q_mode[0] == "quantile" and ref is None:
            raise ConfigError("a quantile threshold needs --data to score")
        tau = sampler.compute_tau_q(critic, ref, scfg.tau_q_mode)
    trajs, summary = sampler.collect_exploratory(pol, critic, _explore_spec(cfg), scfg,
                                                 scfg.rollout_count, seeds("explore", args.round), tau)
    _write(args.out, data.to_bytes(data.Dataset(trajs, cfg.spec.spec_id).annotate(_gamma(cfg))))
    _emit_json(summary, args.summary)


def cmd_augment(cfg, args):
    seeds = _Seeds(cfg.seed)
    source = data.load(args.source)
    pool = []
    for p in args.pool:
        recov, _ = data.filter_recoveries(data.load(p).trajectories)
        pool.extend(recov)
    ratio = cfg.mix_ratio
    if pool:
        mixed = data.mix(source, data.Dataset(pool, source.env_spec_id).annotate(_gamma(cfg)), ratio,
                         np.random.default_rng(seeds("mix", args.round)))
    else:
        log.warning("no recoveries in the pool; output equals the source")
        mixed = source
    _write(args.out, data.to_bytes(mixed))
    log.info("mixed %d trajectories (%d recoveries available)", len(mixed), len(pool))


def cmd_eval(cfg, args):
    seeds = _Seeds(cfg.seed)
    target = "expert" if args.expert else _load_policy(args.policy)
    ev = pipeline.evaluate(target, cfg.spec, cfg.eval_episodes, cfg.eval_perturbation, seeds("eval"))
    if not args.episodes_log:
        ev.pop("episodes")
    _emit_json(ev, args.out)


def cmd_run(cfg, args):
    report = pipeline.run_pipeline(cfg, out_dir=args.out)
    if args.out:
        lines = ["round,success_rate,tau_q,recoveries,pool_size"]
        lines.append(f"0,{report['baseline']['success_rate']},,,")
        for r in report["rounds"]:
            lines.append(f"{r['round']},{r['success_rate']},{r['tau_q']},{r['recoveries']},{r['pool_size']}")
        _write(os.path.join(args.out, "rounds.csv"), "\n".join(lines) + "\n")
    summary = {k: report[k] for k in ("baseline", "final", "improvement", "wall_clock_s")}
    _emit_json(summary)


def _seeds_arg(cfg, args):
    return tuple(args.seeds) if args.seeds else (cfg.seed,)


def cmd_ablate(cfg, args):
    res = pipeline.run_ablation(cfg, seeds=_seeds_arg(cfg, args), extra_fraction=args.extra_fraction)
    lines = ["seed," + ",".join(pipeline.ABLATION_ARMS)]
    for row in res["per_seed"]:
        lines.append(f"{row['seed']}," + ",".join(str(row[a]) for a in pipeline.ABLATION_ARMS))
    _finish_experiment(res, "\n".join(lines) + "\n", args, "ablation")


def cmd_sweep_ratio(cfg, args):
    res = pipeline.run_ratio_sweep(cfg, ratios=args.ratios, seeds=_seeds_arg(cfg, args))
    _finish_experiment(res, pipeline.sweep_csv(res), args, "sweep")


def cmd_cross_task(cfg, args):
    family = envs.make_task_family(args.family_seed, size=args.size, base=cfg.spec)
    runs = [pipeline.run_cross_task(cfg, family, args.sources, seed=s) for s in _seeds_arg(cfg, args)]
    res = {"family": [f.to_dict() for f in family], "runs": runs,
           "mean_delta": float(np.mean([r["mean_delta"] for r in runs]))}
    lines = ["seed,task,own,transfer,delta"]
    for r in runs:
        for t in r["tasks"]:
            lines.append(f"{r['seed']},{t['task']},{t['own']},{t['transfer']},{t['delta']}")
    _finish_experiment(res, "\n".join(lines) + "\n", args, "cross_task")


def _finish_experiment(res, csv_text, args, stem):
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _emit_json(res, os.path.join(args.out, f"{stem}.json"))
        _write(os.path.join(args.out, f"{stem}.csv"), csv_text)
    sys.stdout.write(csv_text)


def cmd_q_grid(cfg, args):
    critic = _load_critic(args.critic)
    spec = cfg.spec
    state = envs.observe(spec, np.array([args.x, args.y]))
    text = pipeline.q_grid(critic, state, n=args.n)
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)


def cmd_render_trace(cfg, args):
    ds = data.load(args.data)
    if not 0 <= args.index < len(ds):
        raise ConfigError(f"--index {args.index} outside dataset of {len(ds)} trajectories")
    text = pipeline.trace_csv(ds.trajectories[args.index])
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)


# ------------------------------------------------------------------- parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON experiment config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a dotted config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    for flag in FLAG_KEYS:
        kind = float if flag in ("perturbation", "mix_ratio") else int
        common.add_argument("--" + flag.replace("_", "-"), dest=flag, type=kind,
                            help=f"sets {FLAG_KEYS[flag]}")

    p = argparse.ArgumentParser(prog="oodaug", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)

    def verb(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(fn=fn)
        return sp

    sp = verb("collect", cmd_collect, "scripted-expert demos (or initial policy rollouts)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--rollouts-from", help="policy checkpoint; collect critic rollouts instead of demos")

    sp = verb("train-bc", cmd_train_bc, "behavior cloning on one or more datasets")
    sp.add_argument("--data", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--role", choices=("deployed", "proxy"), default="deployed")
    sp.add_argument("--round", type=int, default=0)

    sp = verb("train-critic", cmd_train_critic, "fit the twin critic and proxy actor")
    sp.add_argument("--data", nargs="+", required=True)
    sp.add_argument("--proxy", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--proxy-out")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--report")

    sp = verb("explore", cmd_explore, "critic-guided exploratory rollouts")
    sp.add_argument("--policy", required=True)
    sp.add_argument("--critic", required=True)
    sp.add_argument("--data", nargs="*", help="datasets scored for the quantile threshold")
    sp.add_argument("--tau-q", type=float)
    sp.add_argument("--round", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.add_argument("--summary")

    sp = verb("augment", cmd_augment, "keep recoveries and mix them into the source data")
    sp.add_argument("--source", required=True)
    sp.add_argument("--pool", nargs="+", required=True)
    sp.add_argument("--round", type=int, default=1)
    sp.add_argument("--out", required=True)

    sp = verb("retrain", cmd_retrain, "retrain the policy on an augmented dataset")
    sp.add_argument("--data", nargs="+", required=True)
    sp.add_argument("--init", help="starting checkpoint (used when retrain=finetune)")
    sp.add_argument("--round", type=int, default=1)
    sp.add_argument("--out", required=True)

    sp = verb("eval", cmd_eval, "perturbed evaluation of a policy")
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--policy")
    g.add_argument("--expert", action="store_true")
    sp.add_argument("--episodes-log", action="store_true")
    sp.add_argument("--out")

    sp = verb("run", cmd_run, "full refinement loop")
    sp.add_argument("--out")

    for name, fn, help_ in (("ablate", cmd_ablate, "four-arm sampling ablation"),
                            ("sweep-ratio", cmd_sweep_ratio, "mixing-ratio sweep"),
                            ("cross-task", cmd_cross_task, "transfer across a task family")):
        sp = verb(name, fn, help_)
        sp.add_argument("--seeds", type=int, nargs="+")
        sp.add_argument("--out")
        if name == "ablate":
            sp.add_argument("--extra-fraction", type=float, default=0.1)
        elif name == "sweep-ratio":
            sp.add_argument("--ratios", type=float, nargs="+", default=[0.1, 0.2, 0.4, 0.5])
        else:
            sp.add_argument("--family-seed", type=int, default=0)
            sp.add_argument("--size", type=int, default=4)
            sp.add_argument("--sources", type=int, nargs="+")

    sp = verb("q-grid", cmd_q_grid, "critic values over the action box at one position")
    sp.add_argument("--critic", required=True)
    sp.add_argument("--x", type=float, required=True)
    sp.add_argument("--y", type=float, required=True)
    sp.add_argument("--n", type=int, default=41)
    sp.add_argument("--out")

    sp = verb("render-trace", cmd_render_trace, "one trajectory as CSV")
    sp.add_argument("--data", required=True)
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--out")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set, vars(args))
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    try:
        args.fn(cfg, args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except StageError as exc:
        log.error("%s", exc)
        return EXIT_STAGE
    except Exception as exc:  # any other failure inside a stage
        log.error("%s failed: %s: %s", args.verb, type(exc).__name__, exc)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
