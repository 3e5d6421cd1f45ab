"""Trajectories, Monte-Carlo returns, dataset files and ratio-controlled mixing."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

PROVENANCES = ("demo", "rollout", "exploratory")
FORMAT_NAME = "oodaug-dataset"
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    pass


class SealedError(RuntimeError):
    pass


class Step(NamedTuple):
    state: np.ndarray
    action: np.ndarray
    reward: float
    done: bool
    v_mc: float | None


@dataclass
class Trajectory:
    """One episode stored column-wise.

    ``final_state`` is the observation reached after the last action; it is
    the bootstrap state of the last transition when that transition is not
    terminal.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    final_state: np.ndarray
    provenance: str = "demo"
    succeeded: bool = False
    intervention_indices: list = field(default_factory=list)
    v_mc: np.ndarray | None = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.dones = np.asarray(self.dones, dtype=bool)
        self.final_state = np.asarray(self.final_state, dtype=np.float64)
        self.intervention_indices = [int(i) for i in self.intervention_indices]
        self.succeeded = bool(self.succeeded)
        if self.v_mc is not None:
            self.v_mc = np.asarray(self.v_mc, dtype=np.float64)

    def __len__(self):
        return len(self.rewards)

    @property
    def steps(self):
        return [self[i] for i in range(len(self))]

    def __getitem__(self, i):
        v = None if self.v_mc is None else float(self.v_mc[i])
        return Step(self.states[i], self.actions[i], float(self.rewards[i]), bool(self.dones[i]), v)

    @property
    def next_states(self):
        return np.concatenate([self.states[1:], self.final_state[None, :]], axis=0)

    def validate(self):
        n = len(self.rewards)
        if n == 0:
            raise ValueError("empty trajectory")
        if self.states.shape[0] != n or self.actions.shape[0] != n or self.dones.shape[0] != n:
            raise ValueError("trajectory columns have different lengths")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if np.any(self.dones[:-1]):
            raise ValueError("done flag set before the final step")
        if self.succeeded != bool(self.rewards[-1] == 1.0):
            raise ValueError("succeeded flag disagrees with the final reward")
        idx = self.intervention_indices
        if idx and self.provenance != "exploratory":
            raise ValueError("only exploratory trajectories carry interventions")
        if any(b <= a for a, b in zip(idx, idx[1:])) or any(i < 0 or i >= n for i in idx):
            raise ValueError("intervention indices must be strictly increasing and in range")
        if self.v_mc is not None and self.v_mc.shape != (n,):
            raise ValueError("v_mc has the wrong length")

    def copy(self, **changes):
        kw = dict(states=self.states.copy(), actions=self.actions.copy(),
                  rewards=self.rewards.copy(), dones=self.dones.copy(),
                  final_state=self.final_state.copy(), provenance=self.provenance,
                  succeeded=self.succeeded, intervention_indices=list(self.intervention_indices),
                  v_mc=None if self.v_mc is None else self.v_mc.copy())
        kw.update(changes)
        return Trajectory(**kw)

    def equals(self, other):
        if self.provenance != other.provenance or self.succeeded != other.succeeded:
            return False
        if self.intervention_indices != other.intervention_indices:
            return False
        if (self.v_mc is None) != (other.v_mc is None):
            return False
        pairs = [(self.states, other.states), (self.actions, other.actions),
                 (self.rewards, other.rewards), (self.dones, other.dones),
                 (self.final_state, other.final_state)]
        if self.v_mc is not None:
            pairs.append((self.v_mc, other.v_mc))
        return all(a.shape == b.shape and np.array_equal(a, b) for a, b in pairs)


def discounted_returns(rewards, gamma):
    out = np.empty(len(rewards), dtype=np.float64)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def annotate_returns(traj, gamma):
    """Copy of ``traj`` with ``v_mc[t] = sum_k gamma^(k-t) r_k``."""
    if len(traj) == 0:
        raise ValueError("cannot annotate an empty trajectory")
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    return traj.copy(v_mc=discounted_returns(traj.rewards, gamma))


class Dataset:
    """A list of trajectories; ``seal()`` validates it and freezes it."""

    def __init__(self, trajectories=(), env_spec_id="", gamma=None):
        self._trajectories = list(trajectories)
        self.env_spec_id = env_spec_id
        self.gamma = gamma
        self.sealed = False
        self._flat = None

    @property
    def trajectories(self):
        return tuple(self._trajectories) if self.sealed else self._trajectories

    def __len__(self):
        return len(self._trajectories)

    def __iter__(self):
        return iter(self._trajectories)

    def add(self, traj):
        if self.sealed:
            raise SealedError("dataset is sealed")
        self._trajectories.append(traj)

    def extend(self, trajs):
        for t in trajs:
            self.add(t)

    @property
    def state_dim(self):
        return self._trajectories[0].states.shape[1] if self._trajectories else None

    @property
    def action_dim(self):
        return self._trajectories[0].actions.shape[1] if self._trajectories else None

    def seal(self):
        for t in self._trajectories:
            t.validate()
            if t.v_mc is not None and len(t) and self._sparse(t):
                if np.any(t.v_mc < 0) or np.any(t.v_mc > 1 + 1e-12):
                    raise ValueError("v_mc outside [0, 1] under sparse reward")
        dims = {(t.states.shape[1], t.actions.shape[1]) for t in self._trajectories}
        if len(dims) > 1:
            raise ValueError(f"mixed state/action dimensions {sorted(dims)}")
        self.sealed = True
        return self

    @staticmethod
    def _sparse(t):
        return np.all((t.rewards == 0) | (t.rewards == 1))

    @property
    def annotated(self):
        return all(t.v_mc is not None for t in self._trajectories)

    def annotate(self, gamma):
        """New sealed dataset with every trajectory's returns (re)computed."""
        return Dataset([annotate_returns(t, gamma) for t in self._trajectories],
                       self.env_spec_id, gamma).seal()

    def transitions(self):
        """Flattened arrays ``s, a, r, s2, done, v_mc`` (cached once sealed)."""
        if self._flat is not None:
            return self._flat
        if not self._trajectories:
            raise ValueError("dataset is empty")
        flat = {
            "s": np.concatenate([t.states for t in self._trajectories]),
            "a": np.concatenate([t.actions for t in self._trajectories]),
            "r": np.concatenate([t.rewards for t in self._trajectories]),
            "s2": np.concatenate([t.next_states for t in self._trajectories]),
            "done": np.concatenate([t.dones for t in self._trajectories]).astype(np.float64),
        }
        if self.annotated:
            flat["v_mc"] = np.concatenate([t.v_mc for t in self._trajectories])
        if self.sealed:
            for v in flat.values():
                v.setflags(write=False)
            self._flat = flat
        return flat

    def equals(self, other):
        return (self.env_spec_id == other.env_spec_id and self.gamma == other.gamma
                and len(self) == len(other)
                and all(a.equals(b) for a, b in zip(self, other)))

    def content_hash(self):
        return hashlib.sha256(to_bytes(self)).hexdigest()


def filter_recoveries(rollouts, provenances=("exploratory",)):
    """Split rollouts into (policy_set, critic_set).

    The policy only learns from successful rollouts of the given provenance;
    the critic sees every outcome.
    """
    rollouts = list(rollouts)
    policy_set = [t for t in rollouts if t.succeeded and t.provenance in provenances]
    return policy_set, rollouts


def n_augmented(n_source, ratio):
    if ratio >= 1:
        raise ValueError("ratio must be < 1 while the source is kept in full")
    return int(np.floor(ratio * n_source / (1.0 - ratio) + 0.5))


def mix(source, augmented, ratio, rng):
    """Source kept whole plus augmented draws so that their share is ``ratio``.

    When the pool is smaller than the number of draws, every pool trajectory
    is used ``n // len(pool)`` times and the remainder is drawn without
    replacement, so each trajectory appears at least once.
    """
    if not 0 <= ratio < 1:
        raise ValueError("ratio must lie in [0, 1)")
    pool = list(augmented)
    n_aug = n_augmented(len(source), ratio)
    if n_aug > 0 and not pool:
        raise ValueError("ratio > 0 needs a non-empty augmented pool")
    if pool and len(source) and pool[0].states.shape[1] != source.state_dim:
        raise ValueError("augmented trajectories do not match the source dimensions")
    g_src = getattr(source, "gamma", None)
    g_aug = getattr(augmented, "gamma", None)
    if g_src is not None and g_aug is not None and g_src != g_aug:
        raise ValueError(f"gamma mismatch: source {g_src} vs augmented {g_aug}")
    picks = []
    if n_aug:
        reps, rem = divmod(n_aug, len(pool))
        picks = list(np.repeat(np.arange(len(pool)), reps))
        if rem:
            picks.extend(rng.choice(len(pool), size=rem, replace=False).tolist())
        picks = [int(i) for i in rng.permutation(picks)]
    trajs = list(source) + [pool[i] for i in picks]
    return Dataset(trajs, source.env_spec_id, source.gamma).seal()


# ------------------------------------------------------------------ file I/O

def _traj_record(t):
    return {
        "provenance": t.provenance,
        "succeeded": t.succeeded,
        "intervention_indices": t.intervention_indices,
        "states": t.states.tolist(),
        "actions": t.actions.tolist(),
        "rewards": t.rewards.tolist(),
        "dones": t.dones.tolist(),
        "final_state": t.final_state.tolist(),
        "v_mc": None if t.v_mc is None else t.v_mc.tolist(),
    }


def to_bytes(ds):
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "env_spec_id": ds.env_spec_id,
        "gamma": ds.gamma,
        "state_dim": ds.state_dim,
        "action_dim": ds.action_dim,
        "n_trajectories": len(ds),
    }
    lines = [json.dumps(header)]
    lines.extend(json.dumps(_traj_record(t)) for t in ds)
    return ("\n".join(lines) + "\n").encode()


def from_bytes(blob):
    lines = blob.split(b"\n")
    offset = 0
    try:
        header = json.loads(lines[0])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DatasetFormatError(f"corrupt header at byte 0: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise DatasetFormatError("not a dataset file (bad header at byte 0)")
    if header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {header.get('version')!r}")
    offset = len(lines[0]) + 1
    n = header["n_trajectories"]
    trajs = []
    for k in range(n):
        line = lines[k + 1] if k + 1 < len(lines) else b""
        if not line:
            raise DatasetFormatError(
                f"truncated file: expected {n} records, found {k} (byte offset {offset})")
        try:
            rec = json.loads(line)
            t = Trajectory(
                states=np.asarray(rec["states"], dtype=np.float64).reshape(-1, header["state_dim"]),
                actions=np.asarray(rec["actions"], dtype=np.float64).reshape(-1, header["action_dim"]),
                rewards=rec["rewards"], dones=rec["dones"], final_state=rec["final_state"],
                provenance=rec["provenance"], succeeded=rec["succeeded"],
                intervention_indices=rec["intervention_indices"], v_mc=rec["v_mc"])
        except (json.JSONDecodeError, UnicodeDecodeError, KeyError, ValueError, TypeError) as exc:
            raise DatasetFormatError(f"corrupt record {k} at byte offset {offset}: {exc}") from exc
        trajs.append(t)
        offset += len(line) + 1
    ds = Dataset(trajs, header["env_spec_id"], header["gamma"])
    try:
        return ds.seal()
    except ValueError as exc:
        raise DatasetFormatError(f"invalid dataset contents: {exc}") from exc


def save(ds, path):
    blob = to_bytes(ds)
    with open(path, "wb") as f:
        f.write(blob)
    return blob


def load(path):
    with open(path, "rb") as f:
        return from_bytes(f.read())
