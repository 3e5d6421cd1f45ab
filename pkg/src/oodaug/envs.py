"""2D bottleneck-reach tasks.

The arena is ``[-1, 1]^2``.  A horizontal wall at ``y = wall_y`` spans the
arena except for a gap of width ``gap_width`` around ``gap_center``.  The agent
starts below the wall and must reach ``goal`` (above it).  Moves that would
cross the wall outside the gap stop at the wall, so an agent pressed against
the wall with a mostly-upward action makes no progress; that is the failure
mode the rest of the package learns to recover from.

Actions are normalized to ``[-1, 1]^2`` and multiplied by ``action_scale``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .numcore import UsageError

OBS_DIM = 6
ACTION_DIM = 2
WALL_EPS = 1e-6


@dataclass(frozen=True)
class EnvSpec:
    gap_center: float = 0.0
    gap_width: float = 0.2
    goal: tuple = (0.0, 0.6)
    start_low: tuple = (-0.8, -0.8)
    start_high: tuple = (0.8, -0.5)
    horizon: int = 80
    success_radius: float = 0.06
    wall_y: float = 0.0
    action_scale: float = 0.05
    perturbation: float = 0.0
    expert_speed: float = 0.7

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.success_radius <= 0 or self.gap_width <= 0 or self.action_scale <= 0:
            raise ValueError("success_radius, gap_width and action_scale must be positive")
        half = self.gap_width / 2
        if self.gap_center - half < -1 or self.gap_center + half > 1:
            raise ValueError("gap does not fit in the arena")
        if not -1 < self.wall_y < 1:
            raise ValueError("wall must lie inside the arena")
        lo, hi = np.asarray(self.start_low), np.asarray(self.start_high)
        if np.any(lo > hi):
            raise ValueError("start_low must be <= start_high")
        if self.perturbation < 0:
            raise ValueError("perturbation std must be >= 0")
        # tuples keep the dataclass hashable when built from lists
        for name in ("goal", "start_low", "start_high"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    @property
    def spec_id(self):
        d = self.to_dict()
        d.pop("perturbation")
        blob = json.dumps(d, sort_keys=True).encode()
        return "bneck-" + hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class EnvState:
    agent: np.ndarray
    t: int = 0
    done: bool = False
    succeeded: bool = False

    def copy(self):
        return EnvState(self.agent.copy(), self.t, self.done, self.succeeded)


def observe(spec, agent):
    """Observation vector(s): agent position plus the task parameters."""
    agent = np.asarray(agent, dtype=np.float64)
    task = np.array([spec.gap_center, spec.gap_width, spec.goal[0], spec.goal[1]])
    if agent.ndim == 1:
        return np.concatenate([agent, task])
    return np.concatenate([agent, np.broadcast_to(task, (agent.shape[0], 4))], axis=1)


def reset(spec, rng):
    lo, hi = np.asarray(spec.start_low), np.asarray(spec.start_high)
    return EnvState(agent=rng.uniform(lo, hi))


def move(spec, pos, disp):
    """Resolve displacements ``disp`` from ``pos`` (both ``(N, 2)``) against the walls."""
    pos = np.asarray(pos, dtype=np.float64)
    target = np.clip(pos + disp, -1.0, 1.0)
    wy = spec.wall_y
    below0 = pos[:, 1] < wy
    below1 = target[:, 1] < wy
    crossing = below0 != below1
    if not np.any(crossing):
        return target
    dy = target[:, 1] - pos[:, 1]
    safe_dy = np.where(crossing, dy, 1.0)
    frac = np.where(crossing, (wy - pos[:, 1]) / safe_dy, 0.0)
    xc = pos[:, 0] + frac * (target[:, 0] - pos[:, 0])
    blocked = crossing & (np.abs(xc - spec.gap_center) > spec.gap_width / 2)
    if np.any(blocked):
        target = target.copy()
        target[blocked, 0] = xc[blocked]
        target[blocked, 1] = np.where(below0[blocked], wy - WALL_EPS, wy)
    return target


def segment_crosses_wall(spec, p, q):
    """True if the segment p->q passes through a wall segment (outside the gap)."""
    wy = spec.wall_y
    if (p[1] < wy) == (q[1] < wy):
        return False
    frac = (wy - p[1]) / (q[1] - p[1])
    xc = p[0] + frac * (q[0] - p[0])
    return abs(xc - spec.gap_center) > spec.gap_width / 2


def step_batch(spec, pos, t, actions, noise=None):
    """Vectorized transition for active agents.

    Returns ``(new_pos, reward, success, timeout)``.  ``noise`` is an optional
    ``(N, 2)`` state perturbation added to the displacement, so the logged
    segment between consecutive positions is exactly the resolved move.
    """
    a = np.clip(np.asarray(actions, dtype=np.float64), -1.0, 1.0)
    disp = a * spec.action_scale
    if noise is not None:
        disp = disp + noise
    new = move(spec, pos, disp)
    dist = np.linalg.norm(new - np.asarray(spec.goal), axis=1)
    success = dist <= spec.success_radius
    timeout = np.broadcast_to((np.asarray(t) + 1) >= spec.horizon, success.shape)
    return new, success.astype(np.float64), success, timeout


def step(spec, state, action, rng=None):
    """One transition: returns ``(new_state, reward, done)``.

    With ``spec.perturbation > 0`` an ``rng`` is required for the state noise.
    """
    if state.done:
        raise UsageError("cannot step a finished episode")
    noise = None
    if spec.perturbation > 0:
        if rng is None:
            raise UsageError("perturbed spec needs an rng")
        noise = rng.normal(0.0, spec.perturbation, size=(1, 2))
    new, reward, success, timeout = step_batch(
        spec, state.agent[None, :], state.t, np.asarray(action)[None, :], noise)
    ok = bool(success[0])
    done = ok or bool(timeout[0])
    return EnvState(new[0], state.t + 1, done, ok), float(reward[0]), done


def expert_actions(spec, pos, noise=None):
    """Waypoint controller: aim at the gap center while below the wall, then at the goal."""
    pos = np.atleast_2d(np.asarray(pos, dtype=np.float64))
    gap = np.array([spec.gap_center, spec.wall_y])
    goal = np.asarray(spec.goal)
    below = pos[:, 1] < spec.wall_y
    target = np.where(below[:, None], gap, goal)
    a = (target - pos) / spec.action_scale
    mag = np.max(np.abs(a), axis=1, keepdims=True)
    a = np.where(mag > spec.expert_speed, a * (spec.expert_speed / np.maximum(mag, 1e-12)), a)
    if noise is not None:
        a = a + noise
    return np.clip(a, -1.0, 1.0)


def scripted_expert(spec, state, noise_std=None, rng=None):
    """Expert action for one state; ``noise_std`` is in displacement units."""
    if state.done:
        raise UsageError("expert queried on a finished episode")
    if noise_std is None:
        noise_std = 0.1 * spec.action_scale
    noise = None
    if noise_std > 0:
        if rng is None:
            raise UsageError("noisy expert needs an rng")
        noise = rng.normal(0.0, noise_std / spec.action_scale, size=(1, 2))
    return expert_actions(spec, state.agent, noise)[0]


def make_task_family(category_seed, size=4, base=None):
    """``size`` tasks sharing dynamics; gap position and goal vary."""
    if size < 1:
        raise ValueError("family size must be >= 1")
    base = base or EnvSpec()
    rng = np.random.default_rng(category_seed)
    specs = []
    while len(specs) < size:
        gc = float(np.round(rng.uniform(-0.4, 0.4), 3))
        goal = (float(np.round(rng.uniform(-0.5, 0.5), 3)), float(np.round(rng.uniform(0.45, 0.7), 3)))
        cand = base.replace(gap_center=gc, goal=goal)
        if all(abs(cand.gap_center - s.gap_center) > 0.1 for s in specs):
            specs.append(cand)
    return specs
