"""Small dense networks with hand-written gradients, Adam(W) and checkpoints.

Everything here is plain numpy.  Networks are tanh MLPs with a linear output
layer; ``forward`` caches activations so that ``backward`` can return both the
parameter gradients and the gradient with respect to the input (the critic
needs the latter for the actor update).
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Input does not match the network's declared dimensions."""


class UsageError(RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class TrainingDivergenceError(FloatingPointError):
    def __init__(self, message, layer_index=None, diagnostics=None):
        super().__init__(message)
        self.layer_index = layer_index
        self.diagnostics = diagnostics or {}


class CheckpointFormatError(ValueError):
    pass


class Mlp:
    """tanh MLP; ``layer_sizes = [in, h1, ..., out]``."""

    def __init__(self, layer_sizes, rng=None, dtype=np.float64, zero=False):
        sizes = [int(n) for n in layer_sizes]
        if len(sizes) < 2 or any(n <= 0 for n in sizes):
            raise ValueError(f"bad layer sizes {layer_sizes!r}")
        self.layer_sizes = sizes
        self.dtype = np.dtype(dtype)
        self.weights = []
        self.biases = []
        if rng is None and not zero:
            rng = np.random.default_rng(0)
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            if zero:
                w = np.zeros((n_in, n_out), dtype=self.dtype)
            else:
                bound = 1.0 / np.sqrt(n_in)
                w = rng.uniform(-bound, bound, size=(n_in, n_out)).astype(self.dtype)
            self.weights.append(w)
            self.biases.append(np.zeros(n_out, dtype=self.dtype))
        self._cache = None

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def in_dim(self):
        return self.layer_sizes[0]

    @property
    def out_dim(self):
        return self.layer_sizes[-1]

    def params(self):
        """Flat list ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def n_params(self):
        return sum(p.size for p in self.params())

    def get_flat(self):
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat):
        flat = np.asarray(flat)
        if flat.size != self.n_params():
            raise ShapeError(f"expected {self.n_params()} values, got {flat.size}")
        i = 0
        for p in self.params():
            p[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size

    def copy(self):
        other = Mlp.__new__(Mlp)
        other.layer_sizes = list(self.layer_sizes)
        other.dtype = self.dtype
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        other._cache = None
        return other

    def load_from(self, other):
        """Copy parameters of ``other`` into this net in place."""
        for dst, src in zip(self.params(), other.params()):
            dst[...] = src

    def forward(self, x, cache=True):
        x = np.asarray(x, dtype=self.dtype)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"expected input of width {self.in_dim}, got shape {np.shape(x)}")
        acts = [x]
        h = x
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.tanh(h)
            acts.append(h)
        self._cache = (acts, single) if cache else None
        return h[0] if single else h

    __call__ = forward

    def backward(self, upstream):
        """Backpropagate ``upstream = dL/d(output)`` through the cached pass.

        Returns ``(grads, dx)`` where ``grads`` is aligned with ``params()``.
        """
        if self._cache is None:
            raise UsageError("backward() needs a cached forward pass")
        acts, single = self._cache
        g = np.asarray(upstream, dtype=self.dtype)
        if single:
            g = g[None, :]
        if g.shape != acts[-1].shape:
            raise ShapeError(f"upstream gradient shape {g.shape} != output shape {acts[-1].shape}")
        grads = [None] * (2 * self.n_layers)
        last = self.n_layers - 1
        for i in range(last, -1, -1):
            if i < last:
                g = g * (1.0 - acts[i + 1] ** 2)
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grads, (g[0] if single else g)


def forward(net, x):
    return net.forward(x)


def backward(net, x, upstream):
    """Functional form: runs a fresh forward on ``x`` then backpropagates."""
    net.forward(x)
    return net.backward(upstream)


@dataclass
class AdamState:
    """Moment buffers for one parameter list.  ``weight_decay`` is decoupled (AdamW)."""

    shapes: list
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list = field(default=None)
    v: list = field(default=None)

    def __post_init__(self):
        if self.m is None:
            self.m = [np.zeros(s) for s in self.shapes]
        if self.v is None:
            self.v = [np.zeros(s) for s in self.shapes]

    @classmethod
    def for_params(cls, params, **kw):
        return cls(shapes=[p.shape for p in params], **kw)


def adam_step(state, params, grads):
    """In-place bias-corrected Adam update on ``params``; returns ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params / grads / optimizer state length mismatch")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ShapeError(f"gradient {i} has shape {g.shape}, parameter has {params[i].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(
                f"non-finite gradient in layer {i // 2}", layer_index=i // 2)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ---------------------------------------------------------------- checkpoints

def _rng_state_json(rng):
    return json.dumps(rng.bit_generator.state)


def _rng_from_json(text):
    state = json.loads(text)
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def checkpoint_bytes(nets, optimizers=None, rng=None, meta=None):
    """Serialize networks, optimizer states and an RNG into an ``.npz`` blob."""
    optimizers = optimizers or {}
    arrays = {}
    header = {"version": CHECKPOINT_VERSION, "nets": {}, "optimizers": {}, "meta": meta or {}}
    for name, net in nets.items():
        header["nets"][name] = {"layer_sizes": net.layer_sizes, "dtype": net.dtype.str}
        for j, p in enumerate(net.params()):
            arrays[f"net/{name}/{j}"] = p
    for name, st in optimizers.items():
        header["optimizers"][name] = {
            "lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps,
            "weight_decay": st.weight_decay, "step": st.step, "n": len(st.m),
        }
        for j, (m, v) in enumerate(zip(st.m, st.v)):
            arrays[f"opt/{name}/m{j}"] = m
            arrays[f"opt/{name}/v{j}"] = v
    header["rng"] = _rng_state_json(rng) if rng is not None else None
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def checkpoint_from_bytes(blob):
    try:
        with np.load(io.BytesIO(blob), allow_pickle=False) as z:
            files = {k: z[k] for k in z.files}
    except Exception as exc:  # zipfile / npy parse errors
        raise CheckpointFormatError(f"unreadable checkpoint: {exc}") from exc
    if "__header__" not in files:
        raise CheckpointFormatError("checkpoint has no header")
    header = json.loads(files["__header__"].tobytes().decode())
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {header.get('version')!r}")
    nets = {}
    for name, info in header["nets"].items():
        net = Mlp(info["layer_sizes"], dtype=np.dtype(info["dtype"]), zero=True)
        for j, p in enumerate(net.params()):
            p[...] = files[f"net/{name}/{j}"]
        nets[name] = net
    opts = {}
    for name, info in header["optimizers"].items():
        m = [files[f"opt/{name}/m{j}"].copy() for j in range(info["n"])]
        v = [files[f"opt/{name}/v{j}"].copy() for j in range(info["n"])]
        opts[name] = AdamState(shapes=[a.shape for a in m], lr=info["lr"], beta1=info["beta1"],
                               beta2=info["beta2"], eps=info["eps"],
                               weight_decay=info["weight_decay"], step=info["step"], m=m, v=v)
    rng = _rng_from_json(header["rng"]) if header["rng"] is not None else None
    return {"nets": nets, "optimizers": opts, "rng": rng, "meta": header["meta"]}


def save_checkpoint(path, nets, optimizers=None, rng=None, meta=None):
    blob = checkpoint_bytes(nets, optimizers, rng, meta)
    with open(path, "wb") as f:
        f.write(blob)
    return blob


def load_checkpoint(path):
    with open(path, "rb") as f:
        return checkpoint_from_bytes(f.read())


# ------------------------------------------------------- finite differences

def finite_difference_grads(loss_fn, params, h=1e-5):
    """Central differences of scalar ``loss_fn()`` w.r.t. each array in ``params``.

    ``params`` are perturbed in place and restored afterwards.
    """
    out = []
    for p in params:
        g = np.zeros_like(p, dtype=np.float64)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss_fn()
            flat[i] = old - h
            down = loss_fn()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def max_relative_error(analytic, numeric, floor=1e-6):
    """max |a - n| / max(|a| + |n|, floor) over every entry of both lists."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.asarray(a, dtype=np.float64)
        n = np.asarray(n, dtype=np.float64)
        denom = np.maximum(np.abs(a) + np.abs(n), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
