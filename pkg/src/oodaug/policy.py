"""tanh-squashed diagonal Gaussian policy and behavioral cloning."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import (AdamState, Mlp, TrainingDivergenceError, adam_step,
                      checkpoint_from_bytes, checkpoint_bytes)

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
BOUNDARY_EPS = 1e-6
_HALF_LOG_2PI = 0.5 * np.log(2 * np.pi)
ROLES = ("deployed", "proxy")


class BoundaryError(ValueError):
    """Action lies on or outside the open squash interval (-1, 1)."""


def _softplus(x):
    return np.logaddexp(0.0, x)


def _log_one_minus_tanh_sq(u):
    # log(1 - tanh(u)^2) = 2 * (log 2 - u - softplus(-2u))
    return 2.0 * (np.log(2.0) - u - _softplus(-2.0 * u))


def _log_cosh(u):
    a = np.abs(u)
    return a + np.log1p(np.exp(-2.0 * a)) - np.log(2.0)


def squashed_mode(mu, sigma, grid=129, iters=60):
    """Mode of ``tanh(N(mu, sigma^2))`` elementwise, returned in pre-squash space.

    Maximizes ``-(u - mu)^2 / (2 sigma^2) + 2 log cosh(u)``.  Every stationary
    point lies in ``mu +- 2 sigma^2``; a grid picks the best basin and bisection
    on the derivative refines it.
    """
    mu = np.asarray(mu, dtype=np.float64)
    var = np.asarray(sigma, dtype=np.float64) ** 2
    lo = mu - 2 * var
    hi = mu + 2 * var
    ts = np.linspace(0.0, 1.0, grid)
    g = lo[..., None] + (hi - lo)[..., None] * ts
    f = -(g - mu[..., None]) ** 2 / (2 * var[..., None]) + 2 * _log_cosh(g)
    k = np.clip(np.argmax(f, axis=-1), 1, grid - 2)
    a = np.take_along_axis(g, (k - 1)[..., None], -1)[..., 0]
    b = np.take_along_axis(g, (k + 1)[..., None], -1)[..., 0]
    for _ in range(iters):
        m = 0.5 * (a + b)
        # sign of f'(m) * var = -(m - mu) + 2 var tanh(m)
        rising = -(m - mu) + 2 * var * np.tanh(m) > 0
        a = np.where(rising, m, a)
        b = np.where(rising, b, m)
    return 0.5 * (a + b)


class GaussianPolicy:
    """State -> tanh(N(mean, exp(log_std)^2)); actions live in (-1, 1)^d."""

    def __init__(self, obs_dim, action_dim, hidden=(64, 64), rng=None, role="deployed",
                 dtype=np.float64):
        if role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        self.obs_dim = int(obs_dim)
        self.action_dim = int(action_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.role = role
        self.trunk = Mlp([self.obs_dim, *self.hidden, 2 * self.action_dim], rng=rng, dtype=dtype)

    def copy(self, role=None):
        other = GaussianPolicy.__new__(GaussianPolicy)
        other.obs_dim, other.action_dim, other.hidden = self.obs_dim, self.action_dim, self.hidden
        other.role = role or self.role
        other.trunk = self.trunk.copy()
        return other

    # -- distribution parameters

    def _heads(self, states, cache=False):
        out = self.trunk.forward(np.atleast_2d(states), cache=cache)
        mu = out[:, :self.action_dim].astype(np.float64)
        raw = out[:, self.action_dim:].astype(np.float64)
        log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        inside = (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)
        return mu, log_std, inside

    def dist_params(self, states):
        mu, log_std, _ = self._heads(states)
        if np.ndim(states) == 1:
            return mu[0], log_std[0]
        return mu, log_std

    def mean_action(self, states):
        """Mode of the squashed action distribution (the nominal action)."""
        mu, log_std, _ = self._heads(states)
        a = np.tanh(squashed_mode(mu, np.exp(log_std)))
        return a[0] if np.ndim(states) == 1 else a

    def sample(self, states, rng, return_presquash=False):
        """Draw actions; returns ``(action, log_prob)`` (and pre-squash ``u``)."""
        single = np.ndim(states) == 1
        mu, log_std, _ = self._heads(states)
        eps = rng.standard_normal(mu.shape)
        u = mu + np.exp(log_std) * eps
        a = np.tanh(u)
        logp = np.sum(-0.5 * eps ** 2 - log_std - _HALF_LOG_2PI - _log_one_minus_tanh_sq(u), axis=-1)
        if single:
            a, logp, u = a[0], logp[0], u[0]
        return (a, logp, u) if return_presquash else (a, logp)

    def sample_n(self, states, k, rng):
        """``k`` candidates per state: arrays of shape ``(N, k, d)`` and ``(N, k)``."""
        n = np.atleast_2d(states).shape[0]
        return self.candidates_from_noise(states, rng.standard_normal((n, k, self.action_dim)))

    def candidates_from_noise(self, states, eps):
        """Candidates ``tanh(mean + std * eps)`` for ``eps`` of shape ``(N, k, d)``."""
        mu, log_std, _ = self._heads(states)
        u = mu[:, None, :] + np.exp(log_std)[:, None, :] * eps
        logp = np.sum(-0.5 * eps ** 2 - log_std[:, None, :] - _HALF_LOG_2PI
                      - _log_one_minus_tanh_sq(u), axis=-1)
        return np.tanh(u), logp

    def log_prob(self, states, actions):
        single = np.ndim(states) == 1
        a = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        if np.any(np.abs(a) >= 1.0):
            raise BoundaryError("action on or outside the squash boundary; clip inward first")
        mu, log_std, _ = self._heads(states)
        u = np.arctanh(a)
        z = (u - mu) * np.exp(-log_std)
        lp = np.sum(-0.5 * z ** 2 - log_std - _HALF_LOG_2PI - np.log1p(-a * a), axis=-1)
        return float(lp[0]) if single else lp

    # -- gradients

    def nll_and_grads(self, states, actions):
        """Mean negative log-likelihood of ``actions`` and trunk gradients."""
        a = np.clip(np.asarray(actions, dtype=np.float64), -1 + BOUNDARY_EPS, 1 - BOUNDARY_EPS)
        mu, log_std, inside = self._heads(states, cache=True)
        n = mu.shape[0]
        u = np.arctanh(a)
        inv_std = np.exp(-log_std)
        z = (u - mu) * inv_std
        nll = np.sum(0.5 * z ** 2 + log_std + _HALF_LOG_2PI + np.log1p(-a * a), axis=-1)
        d_mu = -(u - mu) * inv_std ** 2 / n
        d_ls = (1.0 - z ** 2) / n * inside
        grads, _ = self.trunk.backward(np.concatenate([d_mu, d_ls], axis=1))
        return float(np.mean(nll)), grads

    def rsample(self, states, eps):
        """Reparameterized actions for fixed noise ``eps``.

        Returns ``(action, log_prob, ctx)``; pass ``ctx`` to ``rsample_backward``.
        """
        mu, log_std, inside = self._heads(states, cache=True)
        std = np.exp(log_std)
        u = mu + std * eps
        a = np.tanh(u)
        logp = np.sum(-0.5 * eps ** 2 - log_std - _HALF_LOG_2PI - _log_one_minus_tanh_sq(u), axis=-1)
        return a, logp, (a, std, eps, inside)

    def rsample_backward(self, ctx, d_action, d_logp):
        """Trunk gradients given ``dJ/d action`` (N, d) and ``dJ/d log_prob`` (N,)."""
        a, std, eps, inside = ctx
        d_logp = np.asarray(d_logp)[:, None]
        d_u = d_action * (1.0 - a * a) + d_logp * 2.0 * a
        d_mu = d_u
        d_ls = (d_u * std * eps - d_logp) * inside
        grads, _ = self.trunk.backward(np.concatenate([d_mu, d_ls], axis=1))
        return grads

    # -- persistence

    def meta(self):
        return {"kind": "policy", "role": self.role, "obs_dim": self.obs_dim,
                "action_dim": self.action_dim, "hidden": list(self.hidden)}

    def to_bytes(self, optimizer=None, rng=None):
        opts = {"trunk": optimizer} if optimizer is not None else None
        return checkpoint_bytes({"trunk": self.trunk}, opts, rng, self.meta())

    @classmethod
    def from_bytes(cls, blob):
        ck = checkpoint_from_bytes(blob)
        meta = ck["meta"]
        if meta.get("kind") != "policy":
            raise ValueError("checkpoint does not hold a policy")
        p = cls.__new__(cls)
        p.obs_dim, p.action_dim = meta["obs_dim"], meta["action_dim"]
        p.hidden = tuple(meta["hidden"])
        p.role = meta["role"]
        p.trunk = ck["nets"]["trunk"]
        return p


@dataclass
class BCConfig:
    epochs: int = 50
    batch_size: int | None = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0


def bc_train(policy, ds, cfg=None, epochs=None):
    """Fit ``policy`` to the dataset actions by minibatch NLL.

    Returns ``(policy, losses)`` with one mean training loss per epoch; the
    last entry is the full-dataset NLL after training.
    """
    cfg = cfg or BCConfig()
    epochs = cfg.epochs if epochs is None else epochs
    flat = ds.transitions()
    s, a = flat["s"], flat["a"]
    n = len(s)
    bs = n if cfg.batch_size is None else min(cfg.batch_size, n)
    rng = np.random.default_rng(cfg.seed)
    opt = AdamState.for_params(policy.trunk.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        total, batches = 0.0, 0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            loss, grads = policy.nll_and_grads(s[idx], a[idx])
            if not np.isfinite(loss):
                raise TrainingDivergenceError(f"BC loss is {loss} in epoch {epoch}",
                                              diagnostics={"epoch": epoch})
            adam_step(opt, policy.trunk.params(), grads)
            total += loss
            batches += 1
        losses.append(total / batches)
    final, _ = policy.nll_and_grads(s, a)
    losses.append(final)
    return policy, losses
