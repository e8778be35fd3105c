"""Dense-array substrate: seeded randomness, MLPs with hand-written backprop, AdamW.

Arrays are plain ``numpy`` arrays.  Everything runs in float32 by default; the
layer code is dtype-preserving so gradient checks can run a float64 copy of the
same network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .constants import DTYPE, LAYERNORM_EPS, TIME_EMBED_DIM
from .errors import ContractViolation, TrainingError

ACTIVATIONS = ("mish", "mish_ln", "tanh", "identity")


# --------------------------------------------------------------------------- rng


class Rng:
    """Counter-based (Philox) generator with cheap, reproducible child streams."""

    def __init__(self, seed: int, *path: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(int(p) for p in path)
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, *self.path])))

    def child(self, *tag: int) -> "Rng":
        """Independent stream keyed by ``tag``; does not advance this stream."""
        return Rng(self.seed, *self.path, *tag)

    def randn(self, *shape: int) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=DTYPE)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, a, size=None, p=None):
        return self._gen.choice(a, size=size, p=p)


def randn(rng: Rng, rows: int, cols: int) -> np.ndarray:
    return rng.randn(rows, cols)


# -------------------------------------------------------------- pointwise pieces


def mish(x: np.ndarray) -> np.ndarray:
    return mish_with_grad(x)[0]


def mish_with_grad(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``mish(x)`` and ``d mish / dx``.

    Uses ``tanh(softplus(x)) = (e^2x + 2e^x) / (e^2x + 2e^x + 2)`` so only one
    exponential is needed.
    """
    e = np.exp(np.minimum(x, 20.0))
    n = e + 2.0
    n *= e
    t = n + 2.0
    np.divide(n, t, out=t)
    y = x * t
    np.add(e, 1.0, out=n)
    np.divide(e, n, out=e)  # e now holds sigmoid(x)
    d = t * t
    np.subtract(1.0, d, out=d)
    d *= x
    d *= e
    d += t
    return y, d


def layer_norm(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalize over the last axis (no affine).  Returns output and 1/std."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LAYERNORM_EPS)
    return xc * inv, inv.astype(x.dtype)


def layer_norm_backward(grad: np.ndarray, xhat: np.ndarray, inv: np.ndarray) -> np.ndarray:
    g_mean = grad.mean(axis=-1, keepdims=True)
    gx_mean = (grad * xhat).mean(axis=-1, keepdims=True)
    return inv * (grad - g_mean - xhat * gx_mean)


def time_embedding(s: np.ndarray, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    """Sinusoidal features of a continuous time ``s`` in [0, 1]."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(s, dtype=np.float64).reshape(-1, 1) * 1000.0 * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(DTYPE)


# --------------------------------------------------------------------------- mlp


class Parametrized:
    """Anything with named, in-place-updatable tensors.

    ``version`` is bumped on every optimizer update so caches produced before
    the update can be detected as stale.
    """

    version: int = 0

    def named_tensors(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_tensors().values())

    def astype(self, dtype):
        raise NotImplementedError


@dataclass
class MlpParams(Parametrized):
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]
    version: int = 0

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ContractViolation("weights, biases and activations must have equal length")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ContractViolation(f"layer {i}: unknown activation {act!r}")
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ContractViolation(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ContractViolation(f"layer {i}: widths do not chain")

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    def astype(self, dtype) -> "MlpParams":
        return MlpParams(
            [w.astype(dtype) for w in self.weights],
            [b.astype(dtype) for b in self.biases],
            list(self.activations),
        )


def mlp_param_count(widths: list[int]) -> int:
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


def init_mlp(widths: list[int], activations: list[str], rng: Rng, final_scale: float = 1.0) -> MlpParams:
    """Uniform(+-1/sqrt(fan_in)) init, the usual default for linear layers."""
    if len(activations) != len(widths) - 1:
        raise ContractViolation("need one activation per layer")
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, (fan_in, fan_out)).astype(DTYPE)
        b = rng.uniform(-bound, bound, fan_out).astype(DTYPE)
        if i == len(widths) - 2:
            w *= final_scale
            b *= final_scale
        weights.append(w)
        biases.append(b)
    return MlpParams(weights, biases, list(activations))


@dataclass
class MlpCache:
    owner: int
    version: int
    inputs: list = field(default_factory=list)
    derivs: list = field(default_factory=list)
    norms: list = field(default_factory=list)


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ContractViolation(f"mlp input shape {x.shape} does not match width {params.in_dim}")
    cache = MlpCache(id(params), params.version)
    h = x
    for w, b, act in zip(params.weights, params.biases, params.activations):
        cache.inputs.append(h)
        z = h @ w + b
        norm = None
        if act == "identity":
            h, d = z, None
        elif act == "tanh":
            h = np.tanh(z)
            d = 1.0 - h * h
        else:
            h, d = mish_with_grad(z)
            if act == "mish_ln":
                h, inv = layer_norm(h)
                norm = (h, inv)
        cache.derivs.append(d)
        cache.norms.append(norm)
    return h, cache


def mlp_apply(params: MlpParams, x: np.ndarray) -> np.ndarray:
    return mlp_forward(params, x)[0]


def mlp_backward(params: MlpParams, cache: MlpCache, grad_out: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients for every tensor (keyed like ``named_tensors``) and the input."""
    if cache.owner != id(params) or cache.version != params.version:
        raise ContractViolation("stale or foreign forward cache")
    if len(cache.inputs) != len(params.weights):
        raise ContractViolation("cache depth does not match network")
    grads: dict[str, np.ndarray] = {}
    g = grad_out
    for i in reversed(range(len(params.weights))):
        norm = cache.norms[i]
        if norm is not None:
            g = layer_norm_backward(g, *norm)
        if cache.derivs[i] is not None:
            g = g * cache.derivs[i]
        grads[f"w{i}"] = cache.inputs[i].T @ g
        grads[f"b{i}"] = g.sum(axis=0)
        g = g @ params.weights[i].T
    return grads, g


# ------------------------------------------------------------------------- adamw


@dataclass
class AdamWState:
    lr: float = 2e-4
    weight_decay: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class NonFiniteGradient(TrainingError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in tensor {name!r}")
        self.name = name
        digits = "".join(ch for ch in name.rsplit(".", 1)[-1] if ch.isdigit())
        self.layer = int(digits) if digits else None


def adamw_step(params: Parametrized, grads: dict[str, np.ndarray], state: AdamWState):
    """One decoupled-weight-decay Adam update, in place.  Returns ``(params, state)``."""
    tensors = params.named_tensors()
    for name, g in grads.items():
        if name not in tensors:
            raise ContractViolation(f"gradient for unknown tensor {name!r}")
        if g.shape != tensors[name].shape:
            raise ContractViolation(f"{name}: gradient {g.shape} vs parameter {tensors[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = tensors[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        p -= (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
    params.version += 1
    return params, state


def clone_params(params: MlpParams) -> MlpParams:
    return params.astype(params.weights[0].dtype)


def iter_batches(n: int, batch: int, rng: Rng) -> Iterable[np.ndarray]:
    """Endless stream of index batches drawn with replacement."""
    while True:
        yield rng.integers(0, n, batch)
