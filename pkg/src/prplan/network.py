"""Token-wise MLP denoiser used by both generative backbones.

Each token (one observation of a jumpy sequence) is embedded to ``width``
channels, then a stack of residual blocks alternates a linear token-mixing map
(acting along the sequence axis) and a per-token channel MLP.  Time, condition and the
values of the pinned context tokens enter through one small MLP whose output is
added to every token, so a known start (or end) point steers the whole sequence
directly rather than through the token mixers alone.  Compute grows
linearly with the number of tokens, which is what makes short coarse-to-fine
sequences cheap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .constants import DTYPE, TIME_EMBED_DIM
from .errors import ContractViolation
from .numerics import (
    MlpParams,
    Parametrized,
    Rng,
    init_mlp,
    layer_norm,
    layer_norm_backward,
    mlp_backward,
    mlp_forward,
    time_embedding,
)


@dataclass
class DenoiserParams(Parametrized):
    n_tokens: int
    token_dim: int
    width: int
    embed: MlpParams
    pos: np.ndarray
    cond: MlpParams
    token_mlps: list[MlpParams]
    channel_mlps: list[MlpParams]
    head: MlpParams
    context: tuple[int, ...] = ()
    version: int = 0

    @property
    def depth(self) -> int:
        return len(self.token_mlps)

    def _parts(self):
        yield "embed", self.embed
        yield "cond", self.cond
        for i, (tok, ch) in enumerate(zip(self.token_mlps, self.channel_mlps)):
            yield f"block{i}.token", tok
            yield f"block{i}.channel", ch
        yield "head", self.head

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {"pos": self.pos}
        for prefix, mlp in self._parts():
            for name, t in mlp.named_tensors().items():
                out[f"{prefix}.{name}"] = t
        return out

    def astype(self, dtype) -> "DenoiserParams":
        return DenoiserParams(
            self.n_tokens, self.token_dim, self.width,
            self.embed.astype(dtype), self.pos.astype(dtype), self.cond.astype(dtype),
            [m.astype(dtype) for m in self.token_mlps], [m.astype(dtype) for m in self.channel_mlps],
            self.head.astype(dtype), self.context,
        )

    def geometry(self) -> dict:
        return {
            "n_tokens": self.n_tokens, "token_dim": self.token_dim, "width": self.width,
            "depth": self.depth, "context": list(self.context),
        }


def init_denoiser(n_tokens: int, token_dim: int, rng: Rng, width: int = 64, depth: int = 2,
                  context=()) -> DenoiserParams:
    context = tuple(int(i) for i in context)
    if any(not 0 <= i < n_tokens for i in context):
        raise ContractViolation(f"context slots {context} outside 0..{n_tokens - 1}")
    return DenoiserParams(
        n_tokens=n_tokens,
        token_dim=token_dim,
        width=width,
        embed=init_mlp([token_dim, width], ["identity"], rng.child(0)),
        pos=(0.02 * rng.child(1).randn(n_tokens, width)).astype(DTYPE),
        cond=init_mlp([TIME_EMBED_DIM + 1 + len(context) * token_dim, width, width], ["mish", "identity"],
                      rng.child(2)),
        token_mlps=[init_mlp([n_tokens, n_tokens], ["identity"], rng.child(3, i)) for i in range(depth)],
        channel_mlps=[init_mlp([width, 2 * width, width], ["mish", "identity"], rng.child(4, i))
                      for i in range(depth)],
        # zero head: an untrained net predicts exactly zero
        head=init_mlp([width, token_dim], ["identity"], rng.child(5), final_scale=0.0),
        context=context,
    )


def denoiser_from_tensors(geometry: dict, tensors: dict[str, np.ndarray]) -> DenoiserParams:
    params = init_denoiser(geometry["n_tokens"], geometry["token_dim"], Rng(0), geometry["width"],
                           geometry["depth"], geometry.get("context", ()))
    own = params.named_tensors()
    if set(own) != set(tensors):
        raise ContractViolation("checkpoint tensors do not match denoiser geometry")
    for name, t in own.items():
        if t.shape != tensors[name].shape:
            raise ContractViolation(f"{name}: shape {tensors[name].shape}, expected {t.shape}")
        t[...] = tensors[name]
    return params


def denoiser_inputs(s: np.ndarray, cond: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    cond = np.asarray(cond, dtype=DTYPE).reshape(-1, 1)
    return np.concatenate([time_embedding(s), cond], axis=1)


@dataclass
class DenoiserCache:
    owner: int
    version: int
    shape: tuple
    embed: object = None
    cond: object = None
    blocks: list = field(default_factory=list)
    head_norm: tuple = None
    head: object = None


def denoiser_forward(params: DenoiserParams, x: np.ndarray, s: np.ndarray, cond: np.ndarray):
    """Predict noise (or velocity) for a batch of token sequences.

    Args:
        x: ``(batch, n_tokens, token_dim)`` noisy sequences.
        s: ``(batch,)`` continuous time in [0, 1].
        cond: ``(batch,)`` normalized condition or the null token.
    """
    if x.ndim != 3 or x.shape[1:] != (params.n_tokens, params.token_dim):
        raise ContractViolation(
            f"denoiser expects (batch, {params.n_tokens}, {params.token_dim}), got {x.shape}")
    b, n, d = x.shape
    w = params.width
    dtype = params.pos.dtype
    cache = DenoiserCache(id(params), params.version, x.shape)

    e, cache.embed = mlp_forward(params.embed, x.reshape(b * n, d).astype(dtype, copy=False))
    c_in = denoiser_inputs(s, cond)
    if params.context:
        c_in = np.concatenate([c_in, x[:, list(params.context), :].reshape(b, -1)], axis=1)
    c, cache.cond = mlp_forward(params.cond, c_in.astype(dtype, copy=False))
    c = c[:, None, :]
    h = e.reshape(b, n, w) + params.pos + c

    for tok, ch in zip(params.token_mlps, params.channel_mlps):
        u, inv1 = layer_norm(h)
        ut = u.transpose(0, 2, 1).reshape(b * w, n)
        t_out, t_cache = mlp_forward(tok, ut)
        h = h + t_out.reshape(b, w, n).transpose(0, 2, 1)
        u2, inv2 = layer_norm(h + c)
        c_out, c_cache = mlp_forward(ch, u2.reshape(b * n, w))
        h = h + c_out.reshape(b, n, w)
        cache.blocks.append((u, inv1, t_cache, u2, inv2, c_cache))

    u, inv = layer_norm(h)
    cache.head_norm = (u, inv)
    out, cache.head = mlp_forward(params.head, u.reshape(b * n, w))
    return out.reshape(b, n, d), cache


def denoiser_apply(params: DenoiserParams, x, s, cond) -> np.ndarray:
    return denoiser_forward(params, x, s, cond)[0]


def denoiser_backward(params: DenoiserParams, cache: DenoiserCache, grad_out: np.ndarray):
    """Return ``(grads, grad_x)`` for a forward cache of the same parameters."""
    if cache.owner != id(params) or cache.version != params.version:
        raise ContractViolation("stale or foreign denoiser cache")
    if grad_out.shape != cache.shape:
        raise ContractViolation(f"output gradient {grad_out.shape} vs output {cache.shape}")
    b, n, d = cache.shape
    w = params.width
    grads: dict[str, np.ndarray] = {}

    def put(prefix, g):
        for k, v in g.items():
            grads[f"{prefix}.{k}"] = v

    g_head, gu = mlp_backward(params.head, cache.head, grad_out.reshape(b * n, d))
    put("head", g_head)
    gh = layer_norm_backward(gu.reshape(b, n, w), *cache.head_norm)
    gc = np.zeros((b, 1, w), dtype=gh.dtype)

    for i in reversed(range(params.depth)):
        u, inv1, t_cache, u2, inv2, c_cache = cache.blocks[i]
        g_ch, gu2 = mlp_backward(params.channel_mlps[i], c_cache, gh.reshape(b * n, w))
        put(f"block{i}.channel", g_ch)
        g_pre = layer_norm_backward(gu2.reshape(b, n, w), u2, inv2)
        gh = gh + g_pre
        gc += g_pre.sum(axis=1, keepdims=True)
        gt = gh.transpose(0, 2, 1).reshape(b * w, n)
        g_tok, gut = mlp_backward(params.token_mlps[i], t_cache, gt)
        put(f"block{i}.token", g_tok)
        gh = gh + layer_norm_backward(gut.reshape(b, w, n).transpose(0, 2, 1), u, inv1)

    grads["pos"] = gh.sum(axis=0)
    gc += gh.sum(axis=1, keepdims=True)
    g_cond, g_cin = mlp_backward(params.cond, cache.cond, gc[:, 0, :])
    put("cond", g_cond)
    g_embed, gx = mlp_backward(params.embed, cache.embed, gh.reshape(b * n, w))
    put("embed", g_embed)
    gx = gx.reshape(b, n, d)
    if params.context:
        gx[:, list(params.context), :] += g_cin[:, TIME_EMBED_DIM + 1:].reshape(b, len(params.context), d)
    return grads, gx
