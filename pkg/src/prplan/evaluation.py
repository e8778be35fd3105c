"""Closed-loop evaluation (replanning every step) and the per-decision latency benchmark."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .envs import make_env
from .numerics import Rng
from .prp import Planner, token_count

# seed-space tags keep evaluation streams disjoint from training streams
EVAL_TAG = 7001
BENCH_TAG = 7002


def latency_summary(samples_s) -> dict:
    s = np.asarray(samples_s, dtype=np.float64)
    if s.size == 0:
        return {"count": 0}
    mean = float(s.mean())
    return {
        "count": int(s.size),
        "mean_ms": 1e3 * mean,
        "p50_ms": 1e3 * float(np.percentile(s, 50)),
        "p90_ms": 1e3 * float(np.percentile(s, 90)),
        "p99_ms": 1e3 * float(np.percentile(s, 99)),
        "max_ms": 1e3 * float(s.max()),
        "hz": 1.0 / mean if mean > 0 else float("inf"),
    }


def run_episode(planner: Planner, env, rng: Rng, max_steps: int, timings: list | None = None) -> dict:
    obs = env.reset(rng.child(0))
    total, success, steps = 0.0, False, 0
    for t in range(max_steps):
        tic = time.perf_counter()
        action = planner.act(obs, rng.child(1, t))
        if timings is not None:
            timings.append(time.perf_counter() - tic)
        obs, reward, done = env.step(obs, action)
        total += reward
        steps = t + 1
        if env.is_success(obs):
            success = True
            break
        if done:
            break
    return {"return": total, "success": success, "length": steps}


def evaluate(planner: Planner, env_name: str, n_episodes: int, seed: int, max_steps: int = 0) -> dict:
    """Roll out ``n_episodes`` with one plan per environment step."""
    env = make_env(env_name)
    cap = max_steps or env.max_steps
    timings: list[float] = []
    episodes = [run_episode(planner, env, Rng(seed, EVAL_TAG, i), cap, timings) for i in range(n_episodes)]
    returns = [e["return"] for e in episodes]
    return {
        "env": env_name,
        "episodes": n_episodes,
        "success_rate": float(np.mean([e["success"] for e in episodes])),
        "mean_return": float(np.mean(returns)),
        "std_return": float(np.std(returns)),
        "lengths": [e["length"] for e in episodes],
        "returns": returns,
        "latency": latency_summary(timings),
    }


@dataclass
class BenchReport:
    """Wall-clock cost of ``Planner.plan`` alone (environment stepping excluded)."""

    mode: str
    samples_s: list[float]
    warmup: int
    tokens_per_decision: int
    levels: list[tuple[int, int, int]]
    comparison: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return {"mode": self.mode, "warmup_excluded": self.warmup, "tokens_per_decision": self.tokens_per_decision,
                "levels": [list(lv) for lv in self.levels], **latency_summary(self.samples_s)}

    def csv_rows(self) -> list[str]:
        rows = ["mode,decision,seconds"]
        rows += [f"{self.mode},{i},{s:.9f}" for i, s in enumerate(self.samples_s)]
        return rows


def observation_stream(env_name: str, n: int, seed: int) -> list[np.ndarray]:
    """Fixed start states to plan from, independent of any model."""
    env = make_env(env_name)
    return [env.reset(Rng(seed, BENCH_TAG, i)) for i in range(n)]


def bench(planner: Planner, env_name: str, n_decisions: int, warmup: int, seed: int, mode: str = "prp") -> BenchReport:
    stream = observation_stream(env_name, warmup + n_decisions, seed)
    samples = []
    for i, obs in enumerate(stream):
        rng = Rng(seed, BENCH_TAG, 1, i)
        tic = time.perf_counter()
        planner.plan(obs, rng)
        elapsed = time.perf_counter() - tic
        if i >= warmup:
            samples.append(elapsed)
    levels = [lv.as_tuple() for lv in planner.levels]
    return BenchReport(mode, samples, warmup, token_count(planner.levels), levels)
