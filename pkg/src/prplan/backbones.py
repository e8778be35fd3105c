"""Diffusion and rectified-flow backbones behind one train/sample contract.

Both backbones generate fixed-length token sequences of shape
``(n_tokens, token_dim)``.  Slots listed in ``inpaint_slots`` are pinned to known
values: during training the noisy input carries the clean value in those slots
and they are excluded from the loss; during sampling they are clamped in the
initial noise and after every solver step.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .constants import DTYPE, NULL_CONDITION
from .errors import ConfigurationError, ContractViolation, SamplingError, TrainingError
from .network import DenoiserParams, denoiser_apply, denoiser_backward, denoiser_forward, init_denoiser
from .numerics import AdamWState, Rng, adamw_step
from .schedules import (
    NO_INPAINT,
    Inpaint,
    SamplerConfig,
    Schedule,
    cfg_combine,
    ddim_step,
    diffusion_grid,
    euler_flow_step,
    flow_grid,
    forward_noise,
    make_cosine_schedule,
)

KINDS = ("diffusion", "rf")


@dataclass
class TrainBatchSpec:
    batch_size: int = 256
    keep_prob: float = 0.75

    def __post_init__(self):
        if not 0.0 <= self.keep_prob <= 1.0:
            raise ConfigurationError(f"condition keep-probability {self.keep_prob} outside [0, 1]")


@dataclass
class GenerativeBackbone:
    kind: str
    net: DenoiserParams
    schedule: Schedule | None = None
    inpaint_slots: tuple[int, ...] = ()
    optimizer: AdamWState = field(default_factory=AdamWState)
    counters: Counter = field(default_factory=Counter)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown backbone kind {self.kind!r}")
        if self.kind == "diffusion" and self.schedule is None:
            raise ConfigurationError("diffusion backbone needs a schedule")

    @property
    def n_tokens(self) -> int:
        return self.net.n_tokens

    @property
    def token_dim(self) -> int:
        return self.net.token_dim

    @property
    def sampler_kind(self) -> str:
        return "diffusion" if self.kind == "diffusion" else "flow"


def make_backbone(kind: str, n_tokens: int, token_dim: int, rng: Rng, *, width: int = 64, depth: int = 2,
                  diffusion_steps: int = 1000, inpaint_slots=(), lr: float = 2e-4,
                  weight_decay: float = 1e-5) -> GenerativeBackbone:
    schedule = make_cosine_schedule(diffusion_steps) if kind == "diffusion" else None
    return GenerativeBackbone(
        kind=kind,
        net=init_denoiser(n_tokens, token_dim, rng, width=width, depth=depth, context=inpaint_slots),
        schedule=schedule,
        inpaint_slots=tuple(inpaint_slots),
        optimizer=AdamWState(lr=lr, weight_decay=weight_decay),
    )


def _free_mask(backbone: GenerativeBackbone) -> np.ndarray:
    mask = np.ones((1, backbone.n_tokens, 1), dtype=DTYPE)
    for slot in backbone.inpaint_slots:
        mask[:, slot, :] = 0.0
    return mask


def _mask_conditions(cond: np.ndarray, keep_prob: float, rng: Rng, counters: Counter) -> np.ndarray:
    keep = rng.random(cond.shape[0]) < keep_prob
    counters["conditional"] += int(keep.sum())
    counters["unconditional"] += int((~keep).sum())
    return np.where(keep, cond, NULL_CONDITION).astype(DTYPE)


def _regress(backbone: GenerativeBackbone, x_in, s_cont, cond, target) -> float:
    pred, cache = denoiser_forward(backbone.net, x_in, s_cont, cond)
    resid = (pred - target) * _free_mask(backbone)
    b = x_in.shape[0]
    loss = float(np.sum(resid.astype(np.float64) ** 2) / b)
    if not np.isfinite(loss):
        finite = np.isfinite(pred)
        raise TrainingError(
            f"non-finite {backbone.kind} loss (batch {b}, |x| max {np.abs(x_in).max():.3g}, "
            f"{int((~finite).sum())} non-finite predictions)")
    grads, _ = denoiser_backward(backbone.net, cache, (2.0 / b) * resid)
    adamw_step(backbone.net, grads, backbone.optimizer)
    return loss


def _check_batch(backbone, x, cond):
    if x.ndim != 3 or x.shape[1:] != (backbone.n_tokens, backbone.token_dim):
        raise ContractViolation(f"batch shape {x.shape} does not match backbone geometry")
    if cond.shape != (x.shape[0],):
        raise ContractViolation("need one condition per batch row")


def diffusion_train_step(backbone: GenerativeBackbone, x0: np.ndarray, cond: np.ndarray, rng: Rng,
                         spec: TrainBatchSpec) -> float:
    """One epsilon-matching step; returns the batch mean of the squared error norm."""
    _check_batch(backbone, x0, cond)
    b = x0.shape[0]
    sched = backbone.schedule
    s = rng.integers(1, sched.steps + 1, b)
    eps = rng.randn(*x0.shape)
    x_s = forward_noise(sched, x0, s, eps)
    for slot in backbone.inpaint_slots:
        x_s[:, slot, :] = x0[:, slot, :]
    c = _mask_conditions(cond, spec.keep_prob, rng, backbone.counters)
    return _regress(backbone, x_s, s / sched.steps, c, eps)


def rf_train_step(backbone: GenerativeBackbone, x1: np.ndarray, cond: np.ndarray, rng: Rng,
                  spec: TrainBatchSpec, x0: np.ndarray | None = None) -> float:
    """One velocity-matching step on the straight interpolation between noise and data.

    ``x0`` defaults to fresh standard-normal noise (independent coupling); reflow
    passes its stored partners instead.
    """
    _check_batch(backbone, x1, cond)
    b = x1.shape[0]
    if x0 is None:
        x0 = rng.randn(*x1.shape)
    s = rng.random(b).astype(DTYPE)
    sc = s.reshape(-1, 1, 1)
    x_s = (1.0 - sc) * x0 + sc * x1
    for slot in backbone.inpaint_slots:
        x_s[:, slot, :] = x1[:, slot, :]
    c = _mask_conditions(cond, spec.keep_prob, rng, backbone.counters)
    return _regress(backbone, x_s.astype(DTYPE), s, c, (x1 - x0).astype(DTYPE))


def train_step(backbone: GenerativeBackbone, x_data, cond, rng, spec) -> float:
    if backbone.kind == "diffusion":
        return diffusion_train_step(backbone, x_data, cond, rng, spec)
    return rf_train_step(backbone, x_data, cond, rng, spec)


def predict(backbone: GenerativeBackbone, x: np.ndarray, s_cont: float, cond: np.ndarray, w: float) -> np.ndarray:
    """Guided prediction (noise or velocity) for a batch at a single time."""
    n = x.shape[0]
    s_col = np.full(n, s_cont)
    cond = np.broadcast_to(np.asarray(cond, dtype=DTYPE), (n,))
    if w == 1.0:
        return denoiser_apply(backbone.net, x, s_col, cond)
    null = np.full(n, NULL_CONDITION, dtype=DTYPE)
    if w == 0.0:
        return denoiser_apply(backbone.net, x, s_col, null)
    both = denoiser_apply(backbone.net, np.concatenate([x, x]), np.concatenate([s_col, s_col]),
                          np.concatenate([cond, null]))
    return cfg_combine(both[:n], both[n:], w)


def sample(backbone: GenerativeBackbone, n_candidates: int, cond, sampler: SamplerConfig,
           inpaint: Inpaint = NO_INPAINT, rng: Rng | None = None, noise: np.ndarray | None = None) -> np.ndarray:
    """Draw ``n_candidates`` sequences by integrating the deterministic ODE."""
    if n_candidates < 1:
        raise ContractViolation("need at least one candidate")
    if sampler.kind != backbone.sampler_kind:
        raise ConfigurationError(f"{sampler.kind} sampler cannot drive a {backbone.kind} backbone")
    inpaint.check(backbone.n_tokens)
    if noise is None:
        noise = rng.randn(n_candidates, backbone.n_tokens, backbone.token_dim)
    x = inpaint.apply(np.array(noise, dtype=DTYPE))
    w = sampler.guidance
    if backbone.kind == "diffusion":
        sched = backbone.schedule
        grid = sampler.grid if sampler.grid is not None else diffusion_grid(sched, sampler.steps)
        for k, (s, s_next) in enumerate(zip(grid[:-1], grid[1:])):
            eps = predict(backbone, x, s / sched.steps, cond, w)
            x = ddim_step(sched, x, eps, int(s), int(s_next), inpaint, sampler.clip_x0)
            _check_finite(x, k)
    else:
        grid = sampler.grid if sampler.grid is not None else flow_grid(sampler.steps)
        for k, (s, s_next) in enumerate(zip(grid[:-1], grid[1:])):
            v = predict(backbone, x, float(s), cond, w)
            x = euler_flow_step(x, v, float(s), float(s_next), inpaint)
            _check_finite(x, k)
    return x


def _check_finite(x, step):
    if not np.all(np.isfinite(x)):
        raise SamplingError(f"non-finite sample after solver step {step}")


# ------------------------------------------------------------------ reflow


@dataclass
class CoupledPairs:
    x0: np.ndarray
    x1: np.ndarray
    cond: np.ndarray

    def __len__(self):
        return self.x0.shape[0]


def reflow_generate(backbone: GenerativeBackbone, n_pairs: int, sampling_steps: int, rng: Rng,
                    cond: np.ndarray | None = None, inpaint_values: np.ndarray | None = None,
                    chunk: int = 4096) -> CoupledPairs:
    """Push fresh noise through the current flow and keep the (noise, sample) pairs.

    ``cond`` gives one condition per pair (null token when omitted); pairs are
    generated with the conditional field alone.  ``inpaint_values`` supplies
    per-pair values for the backbone's inpainted slots.
    """
    if backbone.kind != "rf":
        raise ConfigurationError("reflow needs a rectified-flow backbone")
    if cond is None:
        cond = np.full(n_pairs, NULL_CONDITION, dtype=DTYPE)
    cond = np.asarray(cond, dtype=DTYPE)
    if cond.shape != (n_pairs,):
        raise ContractViolation("need one condition per pair")
    sampler = SamplerConfig("flow", sampling_steps, 1.0)
    x0 = rng.randn(n_pairs, backbone.n_tokens, backbone.token_dim)
    x1 = np.empty_like(x0)
    for lo in range(0, n_pairs, chunk):
        hi = min(lo + chunk, n_pairs)
        inpaint = NO_INPAINT
        if backbone.inpaint_slots:
            inpaint = Inpaint(backbone.inpaint_slots, inpaint_values[lo:hi])
        x1[lo:hi] = _sample_rows(backbone, x0[lo:hi], cond[lo:hi], sampler, inpaint)
    return CoupledPairs(x0, x1, cond)


def _sample_rows(backbone, noise, cond, sampler, inpaint):
    """Like :func:`sample` but with a per-row condition vector."""
    x = inpaint.apply(noise.copy())
    grid = flow_grid(sampler.steps)
    for k, (s, s_next) in enumerate(zip(grid[:-1], grid[1:])):
        v = denoiser_apply(backbone.net, x, np.full(x.shape[0], s), cond)
        x = euler_flow_step(x, v, float(s), float(s_next), inpaint)
        _check_finite(x, k)
    return x


def reflow_train_step(backbone: GenerativeBackbone, pairs: CoupledPairs, idx: np.ndarray, rng: Rng,
                      spec: TrainBatchSpec) -> float:
    return rf_train_step(backbone, pairs.x1[idx], pairs.cond[idx], rng, spec, x0=pairs.x0[idx])


def straightness(backbone: GenerativeBackbone, x0: np.ndarray, cond=None, steps: int = 20,
                 inpaint: Inpaint = NO_INPAINT) -> float:
    """Mean over an s-grid of ``||(x1 - x0) - v(x_s, s)||^2`` along the model's own ODE path.

    Zero exactly when every trajectory is a straight line traversed at constant speed.
    """
    n = x0.shape[0]
    cond = np.full(n, NULL_CONDITION, dtype=DTYPE) if cond is None else np.broadcast_to(
        np.asarray(cond, dtype=DTYPE), (n,))
    x = inpaint.apply(np.array(x0, dtype=DTYPE))
    start = x.copy()
    grid = flow_grid(steps)
    velocities = []
    for s, s_next in zip(grid[:-1], grid[1:]):
        v = denoiser_apply(backbone.net, x, np.full(n, s), cond)
        velocities.append(v * _free_mask(backbone))
        x = euler_flow_step(x, v, float(s), float(s_next), inpaint)
    disp = (x - start) * _free_mask(backbone)
    errs = [np.sum((disp - v).astype(np.float64) ** 2) / n for v in velocities]
    return float(np.mean(errs))
