"""Twin Q-networks trained with a TD loss plus a calibrated conservative penalty.

The penalty for one Q-network, over a batch of dataset states ``s`` with
dataset actions ``a_D`` and Monte-Carlo returns ``V(s)``::

    R = mean_s [ alpha * mean_j Q(s, u_j)
               + (1 - alpha) * mean_j max(Q(s, a_j), V(s))
               - Q(s, a_D) ]

with ``u_j`` uniform on the action box and ``a_j`` drawn from the proxy actor.
The ``max`` keeps the penalty from pushing actor-likely actions below their
empirical return.  The proxy actor and the entropy temperature are updated
SAC-style in the same loop.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from .numcore import (AdamState, Mlp, TrainingDivergenceError, adam_step,
                      checkpoint_bytes, checkpoint_from_bytes)

log = logging.getLogger(__name__)


class PreconditionError(ValueError):
    pass


@dataclass
class CriticConfig:
    gamma: float = 0.99
    lambda_cons: float = 5.0
    alpha_mix: float = 0.5
    n_uniform: int = 10
    n_actor: int = 10
    calibrated: bool = True
    target_entropy: float | None = None  # None -> -action_dim
    entropy_temp: float | str = "auto"
    init_temp: float = 0.01
    steps: int = 50_000
    batch_size: int = 256
    lr: float = 1e-4
    actor_lr: float = 1e-4
    temp_lr: float = 1e-3
    tau_soft: float = 0.005
    hidden: tuple = (64, 64)
    update_actor: bool = True
    diag_every: int = 1000
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if not 0 <= self.alpha_mix <= 1:
            raise ValueError("alpha_mix must lie in [0, 1]")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if self.n_uniform < 1 or self.n_actor < 1:
            raise ValueError("sample counts must be >= 1")
        if self.lambda_cons < 0:
            raise ValueError("lambda_cons must be >= 0")
        if not 0 < self.tau_soft <= 1:
            raise ValueError("tau_soft must lie in (0, 1]")
        self.hidden = tuple(self.hidden)
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class CriticEnsemble:
    def __init__(self, obs_dim, action_dim, hidden=(64, 64), rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.obs_dim, self.action_dim = int(obs_dim), int(action_dim)
        self.hidden = tuple(hidden)
        sizes = [self.obs_dim + self.action_dim, *self.hidden, 1]
        self.q1 = Mlp(sizes, rng=rng, dtype=dtype)
        self.q2 = Mlp(sizes, rng=rng, dtype=dtype)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        self.log_temp = None

    @property
    def online(self):
        return (self.q1, self.q2)

    @property
    def targets(self):
        return (self.q1_target, self.q2_target)

    def q(self, net, states, actions, cache=False):
        x = np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1)
        return net.forward(x, cache=cache)[:, 0].astype(np.float64)

    def q_min(self, states, actions, target=False):
        n1, n2 = self.targets if target else self.online
        return np.minimum(self.q(n1, states, actions), self.q(n2, states, actions))

    def q_min_candidates(self, states, candidates):
        """``min(q1, q2)`` for ``candidates`` of shape ``(N, K, d)`` -> ``(N, K)``."""
        n, k, d = candidates.shape
        s = np.repeat(np.atleast_2d(states), k, axis=0)
        return self.q_min(s, candidates.reshape(n * k, d)).reshape(n, k)

    def copy(self):
        other = CriticEnsemble.__new__(CriticEnsemble)
        other.obs_dim, other.action_dim, other.hidden = self.obs_dim, self.action_dim, self.hidden
        other.q1, other.q2 = self.q1.copy(), self.q2.copy()
        other.q1_target, other.q2_target = self.q1_target.copy(), self.q2_target.copy()
        other.log_temp = self.log_temp
        return other

    def to_bytes(self, cfg=None, optimizers=None):
        meta = {"kind": "critic", "obs_dim": self.obs_dim, "action_dim": self.action_dim,
                "hidden": list(self.hidden), "log_temp": self.log_temp,
                "config": cfg.to_dict() if cfg is not None else None}
        nets = {"q1": self.q1, "q2": self.q2, "q1_target": self.q1_target, "q2_target": self.q2_target}
        return checkpoint_bytes(nets, optimizers, None, meta)

    @classmethod
    def from_bytes(cls, blob):
        ck = checkpoint_from_bytes(blob)
        meta = ck["meta"]
        if meta.get("kind") != "critic":
            raise ValueError("checkpoint does not hold a critic")
        c = cls.__new__(cls)
        c.obs_dim, c.action_dim, c.hidden = meta["obs_dim"], meta["action_dim"], tuple(meta["hidden"])
        nets = ck["nets"]
        c.q1, c.q2, c.q1_target, c.q2_target = nets["q1"], nets["q2"], nets["q1_target"], nets["q2_target"]
        c.log_temp = meta["log_temp"]
        cfg = CriticConfig.from_dict(meta["config"]) if meta["config"] else None
        return c, cfg


def soft_update(c, tau_soft):
    """target <- (1 - tau) * target + tau * online, in place."""
    if not 0 < tau_soft <= 1:
        raise ValueError("tau_soft must lie in (0, 1]")
    for online, target in zip(c.online, c.targets):
        for p, pt in zip(online.params(), target.params()):
            pt *= 1.0 - tau_soft
            pt += tau_soft * p
    return c


# ------------------------------------------------------------------ TD loss

def td_targets(c, proxy, batch, gamma, temp, rng=None, next_sample=None):
    """``y = r + gamma (1 - done) [min target Q(s', a') - temp log pi(a'|s')]``."""
    if next_sample is None:
        next_sample = proxy.sample(batch["s2"], rng)
    a2, logp2 = next_sample
    qt = c.q_min(batch["s2"], a2, target=True)
    y = batch["r"] + gamma * (1.0 - batch["done"]) * (qt - temp * logp2)
    if not np.all(np.isfinite(y)):
        raise TrainingDivergenceError("non-finite TD target")
    return y


def td_loss(c, proxy, batch, cfg, temp=0.0, rng=None, next_sample=None):
    """Sum over both critics of the mean squared TD error.

    Returns ``(loss, [grads_q1, grads_q2], y)``; targets carry no gradient.
    """
    y = td_targets(c, proxy, batch, cfg.gamma, temp, rng, next_sample)
    n = len(y)
    loss = 0.0
    grads = []
    for net in c.online:
        q = c.q(net, batch["s"], batch["a"], cache=True)
        err = q - y
        loss += float(np.mean(err ** 2))
        g, _ = net.backward((2.0 * err / n)[:, None])
        grads.append(g)
    return loss, grads, y


# -------------------------------------------------------------- regularizer

def draw_regularizer_samples(proxy, states, cfg, rng):
    n, d = len(states), proxy.action_dim
    uni = rng.uniform(-1.0, 1.0, size=(n, cfg.n_uniform, d))
    act, _ = proxy.sample_n(states, cfg.n_actor, rng)
    return uni, act


def regularizer_single(c, net, batch, uni, act, alpha, calibrated=True):
    """Penalty and gradients for one Q-network with fixed samples.

    Returns ``(R, grads, parts)`` where parts holds the batch means of the
    three terms.  At ties ``Q == V`` the gradient flows to ``Q``.
    """
    s, a, v = batch["s"], batch["a"], batch.get("v_mc")
    if v is None:
        raise PreconditionError("regularizer needs Monte-Carlo returns (annotate the dataset)")
    n, nu, d = uni.shape
    na = act.shape[1]
    s_rep_u = np.repeat(s, nu, axis=0)
    s_rep_a = np.repeat(s, na, axis=0)
    x = np.concatenate([
        np.concatenate([s, a], axis=1),
        np.concatenate([s_rep_u, uni.reshape(n * nu, d)], axis=1),
        np.concatenate([s_rep_a, act.reshape(n * na, d)], axis=1),
    ])
    q = net.forward(x, cache=True)[:, 0].astype(np.float64)
    q_data = q[:n]
    q_uni = q[n:n + n * nu].reshape(n, nu)
    q_act = q[n + n * nu:].reshape(n, na)
    if calibrated:
        vv = v[:, None]
        active = q_act >= vv
        q_hat = np.where(active, q_act, vv)
    else:
        active = np.ones_like(q_act, dtype=bool)
        q_hat = q_act
    r_uni = q_uni.mean(axis=1)
    r_act = q_hat.mean(axis=1)
    r_data = q_data
    R = float(np.mean(alpha * r_uni + (1 - alpha) * r_act - r_data))
    up = np.concatenate([
        np.full(n, -1.0 / n),
        np.full(n * nu, alpha / (n * nu)),
        ((1 - alpha) / (n * na)) * active.reshape(-1),
    ])
    grads, _ = net.backward(up[:, None])
    parts = {"r_uni": float(r_uni.mean()), "r_act": float(r_act.mean()), "r_data": float(r_data.mean())}
    return R, grads, parts


def regularizer(c, proxy, batch, cfg, rng=None, samples=None):
    """Penalty summed over both online critics; returns ``(R, [g1, g2], parts)``."""
    if samples is None:
        samples = draw_regularizer_samples(proxy, batch["s"], cfg, rng)
    uni, act = samples
    total = 0.0
    grads, parts = [], []
    for net in c.online:
        R, g, p = regularizer_single(c, net, batch, uni, act, cfg.alpha_mix, cfg.calibrated)
        total += R
        grads.append(g)
        parts.append(p)
    return total, grads, parts


# -------------------------------------------------------------------- actor

def actor_loss(c, proxy, states, eps, temp):
    """``J = mean(temp * log pi(a|s) - min(q1, q2)(s, a))`` with ``a`` reparameterized.

    Returns ``(J, proxy_trunk_grads, log_prob)``.
    """
    a, logp, ctx = proxy.rsample(states, eps)
    n = len(states)
    x = np.concatenate([states, a], axis=1)
    q1 = c.q1.forward(x, cache=True)[:, 0]
    q2 = c.q2.forward(x, cache=True)[:, 0]
    use1 = q1 <= q2
    qmin = np.where(use1, q1, q2)
    J = float(np.mean(temp * logp - qmin))
    # dJ/dq_min = -1/n routed to whichever net attained the min
    w1 = use1.astype(np.float64)
    _, dx1 = c.q1.backward((-w1 / n)[:, None])
    _, dx2 = c.q2.backward((-(1.0 - w1) / n)[:, None])
    d_action = (dx1 + dx2)[:, c.obs_dim:]
    grads = proxy.rsample_backward(ctx, d_action, np.full(n, temp / n))
    return J, grads, logp


# ----------------------------------------------------------------- training

@dataclass
class CriticTrainer:
    """Optimizer state that survives across calls to ``critic_train``."""

    q1_opt: AdamState
    q2_opt: AdamState
    actor_opt: AdamState
    temp_opt: AdamState
    log_temp: np.ndarray
    streams: list
    steps_done: int = 0

    @classmethod
    def create(cls, c, proxy, cfg):
        seq = np.random.SeedSequence(cfg.seed)
        streams = [np.random.default_rng(s) for s in seq.spawn(4)]
        if cfg.entropy_temp == "auto":
            log_temp = np.array([np.log(cfg.init_temp)])
        else:
            log_temp = np.array([np.log(float(cfg.entropy_temp))]) if float(cfg.entropy_temp) > 0 else None
        return cls(
            q1_opt=AdamState.for_params(c.q1.params(), lr=cfg.lr),
            q2_opt=AdamState.for_params(c.q2.params(), lr=cfg.lr),
            actor_opt=AdamState.for_params(proxy.trunk.params(), lr=cfg.actor_lr),
            temp_opt=AdamState(shapes=[(1,)], lr=cfg.temp_lr),
            log_temp=log_temp,
            streams=streams,
        )

    def temperature(self):
        return 0.0 if self.log_temp is None else float(np.exp(self.log_temp[0]))


def _diagnostics(c, proxy, flat, rng, n_states=256):
    idx = rng.integers(len(flat["s"]), size=min(n_states, len(flat["s"])))
    s, a = flat["s"][idx], flat["a"][idx]
    uni = rng.uniform(-1, 1, size=a.shape)
    pa, _ = proxy.sample(s, rng)
    return {"q_data": float(np.mean(c.q_min(s, a))),
            "q_uniform": float(np.mean(c.q_min(s, uni))),
            "q_proxy": float(np.mean(c.q_min(s, pa)))}


def critic_train(c, proxy, ds, cfg, steps=None, trainer=None):
    """Alternate critic, proxy-actor and temperature updates on ``ds``.

    Returns ``(c, trainer, diagnostics)``; pass ``trainer`` back in to resume.
    """
    flat = ds.transitions()
    if cfg.lambda_cons > 0 and "v_mc" not in flat:
        raise PreconditionError("regularizer needs an annotated dataset")
    trainer = trainer or CriticTrainer.create(c, proxy, cfg)
    batch_rng, target_rng, reg_rng, actor_rng = trainer.streams
    steps = cfg.steps if steps is None else steps
    n = len(flat["s"])
    target_entropy = -proxy.action_dim if cfg.target_entropy is None else cfg.target_entropy
    auto = cfg.entropy_temp == "auto"
    diags = []
    for _ in range(steps):
        idx = batch_rng.integers(n, size=min(cfg.batch_size, n))
        batch = {k: v[idx] for k, v in flat.items()}
        temp = trainer.temperature()
        loss, grads, _ = td_loss(c, proxy, batch, cfg, temp, rng=target_rng)
        R = 0.0
        if cfg.lambda_cons > 0:
            R, rgrads, _ = regularizer(c, proxy, batch, cfg, rng=reg_rng)
            for g, rg in zip(grads, rgrads):
                for i in range(len(g)):
                    g[i] = g[i] + cfg.lambda_cons * rg[i]
        total = loss + cfg.lambda_cons * R
        if not np.isfinite(total) or abs(total) > 1e6:
            dump = {"step": trainer.steps_done, "td_loss": loss, "reg": R,
                    **(_diagnostics(c, proxy, flat, np.random.default_rng(0)) if np.isfinite(total) else {})}
            raise TrainingDivergenceError(f"critic diverged at step {trainer.steps_done}", diagnostics=dump)
        adam_step(trainer.q1_opt, c.q1.params(), grads[0])
        adam_step(trainer.q2_opt, c.q2.params(), grads[1])
        if cfg.update_actor:
            eps = actor_rng.standard_normal((len(idx), proxy.action_dim))
            _, agrads, logp = actor_loss(c, proxy, batch["s"], eps, temp)
            adam_step(trainer.actor_opt, proxy.trunk.params(), agrads)
            if auto:
                g = -np.mean(logp + target_entropy)
                adam_step(trainer.temp_opt, [trainer.log_temp], [np.array([g])])
        soft_update(c, cfg.tau_soft)
        trainer.steps_done += 1
        if cfg.diag_every and trainer.steps_done % cfg.diag_every == 0:
            d = _diagnostics(c, proxy, flat, np.random.default_rng(trainer.steps_done))
            d.update(step=trainer.steps_done, td_loss=loss, reg=R, temp=temp)
            diags.append(d)
            log.debug("critic step %d: %s", trainer.steps_done, d)
    c.log_temp = None if trainer.log_temp is None else float(trainer.log_temp[0])
    return c, trainer, diags


def conservatism_gap(c, states, actions, rng):
    """``mean Q(s, data a) - mean Q(s, uniform a)`` (>= 0 when conservative)."""
    uni = rng.uniform(-1, 1, size=np.shape(actions))
    return float(np.mean(c.q_min(states, actions)) - np.mean(c.q_min(states, uni)))
