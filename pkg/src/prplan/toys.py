"""Two-mode Gaussian toy used to exercise backbones and reflow in isolation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbones import (
    TrainBatchSpec,
    make_backbone,
    reflow_generate,
    reflow_train_step,
    sample,
    straightness,
    train_step,
)
from .constants import DTYPE, NULL_CONDITION
from .numerics import AdamWState, Rng
from .schedules import SamplerConfig


@dataclass(frozen=True)
class TwoGaussians:
    centre: tuple[float, float] = (1.5, 0.0)
    std: float = 0.3

    def sample(self, n: int, rng: Rng) -> np.ndarray:
        """``(n, 1, 2)`` points, half around ``+centre`` and half around ``-centre``."""
        sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)[:, None]
        pts = sign * np.asarray(self.centre) + self.std * rng.randn(n, 2)
        return pts.reshape(n, 1, 2).astype(DTYPE)

    @property
    def mean(self) -> np.ndarray:
        return np.zeros(2)

    @property
    def cov(self) -> np.ndarray:
        c = np.asarray(self.centre)
        return np.outer(c, c) + self.std**2 * np.eye(2)


def moments(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = x.reshape(x.shape[0], -1).astype(np.float64)
    return flat.mean(axis=0), np.cov(flat.T)


def train_toy(kind: str, data: np.ndarray, steps: int, rng: Rng, width: int = 64, batch: int = 256,
              lr: float = 1e-3, losses: list | None = None):
    bb = make_backbone(kind, data.shape[1], data.shape[2], rng.child(0), width=width, lr=lr)
    spec = TrainBatchSpec(batch, keep_prob=0.0)
    null = np.full(batch, NULL_CONDITION, dtype=DTYPE)
    for step in range(steps):
        idx = rng.child(1, step).integers(0, data.shape[0], batch)
        loss = train_step(bb, data[idx], null, rng.child(2, step), spec)
        if losses is not None:
            losses.append(loss)
    return bb


def one_vs_many(bb, noise: np.ndarray, many: int = 20) -> float:
    """Mean distance between 1-step and ``many``-step Euler samples from the same noise."""
    one = sample(bb, len(noise), NULL_CONDITION, SamplerConfig("flow", 1, 0.0), noise=noise)
    ref = sample(bb, len(noise), NULL_CONDITION, SamplerConfig("flow", many, 0.0), noise=noise)
    return float(np.mean(np.linalg.norm((one - ref).reshape(len(noise), -1), axis=1)))


def reflow_experiment(seed: int = 0, n_data: int = 4096, train_steps: int = 3000, n_pairs: int = 8192,
                      reflow_steps: int = 3000, reflow_lr: float = 1e-3, probe: int = 2000) -> dict:
    """Train a flow on the toy, reflow it once, and report straightness and moments before/after."""
    rng = Rng(seed)
    toy = TwoGaussians()
    data = toy.sample(n_data, rng.child(0))
    bb = train_toy("rf", data, train_steps, rng.child(1))
    noise = rng.child(2).randn(probe, 1, 2)
    before = {
        "straightness": straightness(bb, noise),
        "one_vs_many": one_vs_many(bb, noise),
        "moments": moments(sample(bb, probe, NULL_CONDITION, SamplerConfig("flow", 20, 0.0), noise=noise)),
    }
    pairs = reflow_generate(bb, n_pairs, 20, rng.child(3))
    bb.optimizer = AdamWState(lr=reflow_lr, weight_decay=0.0)
    spec = TrainBatchSpec(256, keep_prob=0.0)
    for step in range(reflow_steps):
        idx = rng.child(4, step).integers(0, n_pairs, 256)
        reflow_train_step(bb, pairs, idx, rng.child(5, step), spec)
    after = {
        "straightness": straightness(bb, noise),
        "one_vs_many": one_vs_many(bb, noise),
        "moments": moments(sample(bb, probe, NULL_CONDITION, SamplerConfig("flow", 20, 0.0), noise=noise)),
    }
    return {"before": before, "after": after, "pairs": moments(pairs.x1), "data": moments(data)}
