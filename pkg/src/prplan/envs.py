"""Deterministic toy control tasks and their scripted data-collection policies.

``PointMaze2D`` is a sparse-reward navigation task in the unit square: a U-shaped
corridor around a central wall leads from the start to a goal disc, while the
closed left end of the bottom corridor is a dead end.  ``LineRunner`` is a
dense-reward 1-D task that pays forward velocity minus an action cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .constants import DTYPE
from .errors import ConfigurationError
from .numerics import Rng

POLICIES = ("expert", "noisy", "random", "dead_end")


@dataclass(frozen=True)
class Wall:
    """Axis-aligned solid block ``[x0, x1] x [y0, y1]``."""

    x0: float
    y0: float
    x1: float
    y1: float

    def contains(self, p, strict: bool = True) -> bool:
        if strict:
            return self.x0 < p[0] < self.x1 and self.y0 < p[1] < self.y1
        return self.x0 <= p[0] <= self.x1 and self.y0 <= p[1] <= self.y1

    def project(self, p) -> np.ndarray:
        """Push a point inside the block out through the nearest face."""
        depths = (p[0] - self.x0, self.x1 - p[0], p[1] - self.y0, self.y1 - p[1])
        k = int(np.argmin(depths))
        q = np.array(p, dtype=np.float64)
        q[k // 2] = (self.x0, self.x1, self.y0, self.y1)[k]
        return q


@dataclass
class PointMaze2D:
    # the wall overhangs the left border so a point clipped onto x = 0 is still inside it
    walls: tuple[Wall, ...] = (Wall(-0.1, 0.4, 0.75, 0.6),)
    start: tuple[float, float] = (0.45, 0.2)
    goal: tuple[float, float] = (0.15, 0.8)
    goal_radius: float = 0.1
    dt: float = 0.05
    max_steps: int = 500
    start_jitter: float = 0.02
    # expert route: right along the bottom corridor, up the right passage, left to the goal
    waypoints: tuple[tuple[float, float], ...] = ((0.86, 0.28), (0.86, 0.72), (0.15, 0.8))
    dead_end: tuple[float, float] = (0.08, 0.2)
    # slow enough that the route (~1.7 long) spans several 128-step plans at dataset pace
    expert_speed: tuple[float, float] = (0.08, 0.12)
    noise_ratio: float = 1.6  # noisy-expert action noise relative to its speed
    bounded: bool = True

    name = "maze"
    obs_dim = 2
    act_dim = 2
    spatial = True  # observations are positions in the unit square

    def reset(self, rng: Rng) -> np.ndarray:
        jitter = rng.uniform(-self.start_jitter, self.start_jitter, 2)
        return (np.array(self.start) + jitter).astype(DTYPE)

    def project(self, p) -> np.ndarray:
        q = np.asarray(p, dtype=np.float64)
        if self.bounded:
            q = np.clip(q, 0.0, 1.0)
        for wall in self.walls:
            if wall.contains(q):
                q = wall.project(q)
        return q

    def in_goal(self, state) -> bool:
        return math.hypot(state[0] - self.goal[0], state[1] - self.goal[1]) <= self.goal_radius

    def goal_membership(self, states: np.ndarray) -> np.ndarray:
        d = np.linalg.norm(np.asarray(states, dtype=np.float64) - np.asarray(self.goal), axis=-1)
        return (d <= self.goal_radius).astype(DTYPE)

    def step(self, state, action):
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        nxt = self.project(np.asarray(state, dtype=np.float64) + self.dt * a).astype(DTYPE)
        reward = float(self.in_goal(nxt))
        return nxt, reward, False

    # rewards re-derived from planned states: reward is paid for the state an action lands in
    def interval_rewards(self, key_points: np.ndarray, jump: int) -> np.ndarray:
        """Estimated reward collected over each ``jump``-step interval between key points."""
        return jump * self.goal_membership(key_points[..., 1:, :])

    def hold_reward(self, states: np.ndarray) -> np.ndarray:
        return self.goal_membership(states)

    def is_success(self, state) -> bool:
        return self.in_goal(state)

    def make_policy(self, kind: str, rng: Rng):
        speed = rng.uniform(*self.expert_speed)
        if kind == "expert":
            return _WaypointPolicy(self, speed, 0.0, rng)
        if kind == "noisy":
            return _WaypointPolicy(self, speed, self.noise_ratio * speed, rng)
        if kind == "random":
            return lambda obs, t: rng.uniform(-1.0, 1.0, 2)
        if kind == "dead_end":
            return _DeadEndPolicy(self, speed, rng)
        raise ConfigurationError(f"unknown maze policy {kind!r}")


class _WaypointPolicy:
    def __init__(self, env: PointMaze2D, speed: float, noise: float, rng: Rng):
        self.env, self.speed, self.noise, self.rng = env, speed, noise, rng
        self.k = 0

    def __call__(self, obs, t):
        env = self.env
        while self.k < len(env.waypoints) - 1 and np.hypot(*(np.array(env.waypoints[self.k]) - obs)) < 0.06:
            self.k += 1
        target = np.array(env.waypoints[self.k])
        delta = target - obs
        dist = float(np.hypot(*delta))
        if self.k == len(env.waypoints) - 1 and dist < self.speed * env.dt:
            a = delta / env.dt
        else:
            a = self.speed * delta / max(dist, 1e-9)
        if self.noise:
            a = a + self.noise * self.rng.randn(2)
        return np.clip(a, -1.0, 1.0)


class _DeadEndPolicy:
    """Heads for the closed end of the bottom corridor and loiters there."""

    def __init__(self, env: PointMaze2D, speed: float, rng: Rng):
        self.env, self.speed, self.rng = env, speed, rng

    def __call__(self, obs, t):
        delta = np.array(self.env.dead_end) - obs
        dist = float(np.hypot(*delta))
        a = self.speed * delta / max(dist, 0.05) + 0.4 * self.speed * self.rng.randn(2)
        return np.clip(a, -1.0, 1.0)


@dataclass
class LineRunner:
    dt: float = 0.05
    v_max: float = 1.0
    action_cost: float = 0.1
    max_steps: int = 100

    name = "runner"
    obs_dim = 2
    act_dim = 1
    spatial = False

    def reset(self, rng: Rng) -> np.ndarray:
        return np.array([0.0, rng.uniform(-0.05, 0.05)], dtype=DTYPE)

    def step(self, state, action):
        a = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0], -1.0, 1.0))
        p, v = float(state[0]), float(state[1])
        v2 = min(max(v + self.dt * a, -self.v_max), self.v_max)
        p2 = p + self.dt * v2
        return np.array([p2, v2], dtype=DTYPE), v2 - self.action_cost * a * a, False

    def interval_rewards(self, key_points: np.ndarray, jump: int) -> np.ndarray:
        kp = np.asarray(key_points, dtype=np.float64)
        v0 = kp[..., :-1, 1]
        dv = kp[..., 1:, 1] - v0
        # constant thrust: velocity ramps linearly, so the per-step velocities sum in
        # closed form; positions are left out since a sampled plan may not integrate
        thrust = np.clip(dv / (jump * self.dt), -1.0, 1.0)
        speed = jump * v0 + dv * (jump + 1) / 2
        return (speed - jump * self.action_cost * thrust**2).astype(DTYPE)

    def hold_reward(self, states: np.ndarray) -> np.ndarray:
        return np.asarray(states, dtype=DTYPE)[..., 1]

    def is_success(self, state) -> bool:
        return False

    def make_policy(self, kind: str, rng: Rng):
        if kind == "expert":
            return lambda obs, t: np.array([1.0])
        if kind == "noisy":
            level = rng.uniform(0.2, 0.8)
            return lambda obs, t: np.clip([level + 0.3 * rng.randn()], -1.0, 1.0)
        if kind == "random":
            return lambda obs, t: rng.uniform(-1.0, 1.0, 1)
        if kind == "dead_end":
            return lambda obs, t: np.clip([-0.5 + 0.2 * rng.randn()], -1.0, 1.0)
        raise ConfigurationError(f"unknown runner policy {kind!r}")


def make_env(name: str):
    if name == "maze":
        return PointMaze2D()
    if name == "pointmass":
        # o' = o + dt * a with nothing in the way; used to check inverse dynamics
        env = PointMaze2D(walls=(), bounded=False)
        env.name = "pointmass"
        return env
    if name == "runner":
        return LineRunner()
    raise ConfigurationError(f"unknown environment {name!r}")


def env_step(env, state, action):
    return env.step(state, action)


@dataclass
class Rollout:
    obs: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    success: bool = False


def rollout(env, policy, rng: Rng, max_steps: int | None = None, stop_on_success: bool = False) -> Rollout:
    obs = env.reset(rng)
    out = Rollout(obs=[obs])
    for t in range(max_steps or env.max_steps):
        a = np.asarray(policy(obs, t), dtype=DTYPE).reshape(env.act_dim)
        obs, r, done = env.step(obs, a)
        out.actions.append(np.clip(a, -1.0, 1.0))
        out.rewards.append(r)
        out.obs.append(obs)
        if env.is_success(obs):
            out.success = True
            if stop_on_success:
                break
        if done:
            break
    return out
