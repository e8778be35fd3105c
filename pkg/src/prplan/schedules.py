"""Noise schedules and the deterministic solvers that walk them.

Diffusion time is an integer index ``0..T`` (0 = data).  Flow time is a float in
``[0, 1]`` (0 = noise, 1 = data).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .constants import ALPHA_GUARD, DTYPE
from .errors import ConfigurationError, ContractViolation, NumericalGuardError


@dataclass(frozen=True)
class Schedule:
    steps: int
    alpha: np.ndarray  # float64, length steps + 1
    sigma: np.ndarray

    @property
    def snr(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return self.alpha**2 / self.sigma**2


MAX_BETA = 0.999


def make_cosine_schedule(steps: int = 1000, offset: float = 0.008) -> Schedule:
    if steps < 2:
        raise ConfigurationError(f"cosine schedule needs at least 2 steps, got {steps}")
    t = np.arange(steps + 1, dtype=np.float64) / steps
    f = np.cos((t + offset) / (1.0 + offset) * math.pi / 2.0) ** 2
    alpha_bar = np.clip(f / f[0], 0.0, 1.0)
    # per-step betas capped at MAX_BETA keep alpha_T away from zero; only the last step is affected
    beta = np.minimum(1.0 - alpha_bar[1:] / alpha_bar[:-1], MAX_BETA)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    return Schedule(steps, np.sqrt(alpha_bar), np.sqrt(1.0 - alpha_bar))


@dataclass
class Inpaint:
    """Sequence slots pinned to fixed values.

    ``values`` has shape ``(len(slots), token_dim)`` or ``(batch, len(slots), token_dim)``.
    """

    slots: tuple[int, ...]
    values: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        if not self.slots:
            return x
        x[:, list(self.slots), :] = self.values
        return x

    def check(self, n_tokens: int) -> None:
        for slot in self.slots:
            if not -n_tokens <= slot < n_tokens:
                raise ContractViolation(f"inpaint slot {slot} outside a {n_tokens}-token sequence")
        if not np.all(np.isfinite(self.values)):
            raise ContractViolation("inpaint values must be finite")


NO_INPAINT = Inpaint((), np.zeros((0, 0), dtype=DTYPE))


@dataclass
class SamplerConfig:
    kind: str  # "diffusion" | "flow"
    steps: int
    guidance: float = 1.0
    grid: np.ndarray | None = None
    clip_x0: float | None = None  # diffusion only: clamp the reconstructed sample to [-c, c]

    def __post_init__(self):
        if self.kind not in ("diffusion", "flow"):
            raise ConfigurationError(f"unknown sampler kind {self.kind!r}")
        if self.steps < 1:
            raise ConfigurationError("sampler needs at least one step")
        if not math.isfinite(self.guidance):
            raise ConfigurationError("guidance strength must be finite")


def diffusion_grid(schedule: Schedule, steps: int) -> np.ndarray:
    """Uniform integer grid from T down to 0, e.g. T=1000, 3 steps -> 1000, 667, 333, 0."""
    grid = np.round(np.linspace(schedule.steps, 0, steps + 1)).astype(np.int64)
    if np.any(np.diff(grid) >= 0):
        raise ConfigurationError(f"{steps} steps do not fit in a {schedule.steps}-step schedule")
    return grid


def flow_grid(steps: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, steps + 1)


def forward_noise(schedule: Schedule, x0: np.ndarray, s, eps: np.ndarray) -> np.ndarray:
    """``alpha_s * x0 + sigma_s * eps``; ``s`` is a scalar or a per-row index array."""
    if x0.shape != eps.shape:
        raise ContractViolation(f"x0 {x0.shape} and noise {eps.shape} differ")
    a = schedule.alpha[s]
    sg = schedule.sigma[s]
    if np.ndim(a):
        shape = (-1,) + (1,) * (x0.ndim - 1)
        a = a.reshape(shape)
        sg = sg.reshape(shape)
    return (a * x0 + sg * eps).astype(x0.dtype)


def ddim_step(schedule: Schedule, x_s: np.ndarray, eps_hat: np.ndarray, s: int, s_next: int,
              inpaint: Inpaint = NO_INPAINT, clip_x0: float | None = None) -> np.ndarray:
    if s_next > s or s_next < 0:
        raise ContractViolation(f"ddim step must go toward data: {s} -> {s_next}")
    if s_next == s:
        return x_s
    a = schedule.alpha[s]
    if a < ALPHA_GUARD:
        raise NumericalGuardError(f"alpha_{s} = {a:.3g} is too small to invert")
    x0_hat = (x_s - schedule.sigma[s] * eps_hat) / a
    if clip_x0 is not None:
        x0_hat = np.clip(x0_hat, -clip_x0, clip_x0)
    out = (schedule.alpha[s_next] * x0_hat + schedule.sigma[s_next] * eps_hat).astype(x_s.dtype)
    return inpaint.apply(out)


def euler_flow_step(x_s: np.ndarray, v_hat: np.ndarray, s: float, s_next: float,
                    inpaint: Inpaint = NO_INPAINT) -> np.ndarray:
    if x_s.shape != v_hat.shape:
        raise ContractViolation(f"state {x_s.shape} and velocity {v_hat.shape} differ")
    if not 0.0 <= s <= s_next <= 1.0:
        raise ContractViolation(f"euler step outside [0, 1] or backwards: {s} -> {s_next}")
    out = (x_s + DTYPE(s_next - s) * v_hat).astype(x_s.dtype)
    return inpaint.apply(out)


def cfg_combine(pred_cond: np.ndarray, pred_uncond: np.ndarray, w: float) -> np.ndarray:
    if pred_cond.shape != pred_uncond.shape:
        raise ContractViolation("conditional and unconditional predictions differ in shape")
    if w == 1.0:
        return pred_cond
    if w == 0.0:
        return pred_uncond
    return (w * pred_cond + (1.0 - w) * pred_uncond).astype(pred_cond.dtype)
