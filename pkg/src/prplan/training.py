"""Model assembly, the interleaved multi-level training loop, and checkpoint I/O."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .backbones import GenerativeBackbone, TrainBatchSpec, make_backbone, train_step
from .config import RunConfig
from .constants import DTYPE
from .critics import InverseDynamics, PropertyCritic, ValueCritic, train_inverse_dynamics, train_value
from .data import Dataset, ObsStats
from .envs import make_env
from .errors import ConfigurationError, TrainingError, VersioningError
from .network import denoiser_from_tensors
from .numerics import MlpParams, Rng
from .prp import ConditionNormalizer, PlanCoder, Planner, SliceBank
from .schedules import SamplerConfig

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "prplan-planner"


@dataclass
class TrainedModel:
    config: RunConfig
    planner: Planner
    value: ValueCritic | None
    losses: list[tuple[str, int, float]] = field(default_factory=list)  # (component, step, loss)
    invdyn_mse: float = float("nan")

    @property
    def backbones(self) -> list[GenerativeBackbone]:
        return self.planner.backbones


def samplers_for(cfg: RunConfig, n_levels: int, clip_x0: float | None = None) -> list[SamplerConfig]:
    kind = "diffusion" if cfg.backbone.kind == "diffusion" else "flow"
    clip = clip_x0 if kind == "diffusion" else None
    # guidance only at the first level; finer levels sample unconditionally
    return [SamplerConfig(kind, cfg.backbone.sampling_steps, cfg.backbone.guidance if l == 0 else 0.0, clip_x0=clip)
            for l in range(n_levels)]


def build_untrained(cfg: RunConfig, obs_dim: int, stats: ObsStats, rng: Rng, value: ValueCritic | None = None,
                    normalizer: ConditionNormalizer | None = None,
                    inverse_dynamics: InverseDynamics | None = None, clip_x0: float | None = None) -> Planner:
    env = make_env(cfg.run.env)
    levels = cfg.level_configs()
    critic = PropertyCritic(cfg.critic.kind, env, cfg.critic.gamma, value)
    backbones = [
        make_backbone(cfg.backbone.kind, lv.n_tokens, obs_dim, rng.child(lv.index),
                      width=cfg.backbone.width, depth=cfg.backbone.depth,
                      diffusion_steps=cfg.backbone.diffusion_steps, inpaint_slots=lv.inpaint_slots,
                      lr=cfg.backbone.lr, weight_decay=cfg.backbone.weight_decay)
        for lv in levels
    ]
    return Planner(levels, backbones, critic, stats, samplers_for(cfg, len(levels), clip_x0),
                   inverse_dynamics, normalizer, cfg.planner.candidates, cfg.planner.select_every_level)


def train_backbones(planner: Planner, bank: SliceBank, steps: int, batch_size: int, keep_prob: float,
                    rng: Rng, log_every: int = 50, losses: list | None = None) -> list:
    """Each step draws one batch of windows and updates every level on its own slice of them."""
    spec = TrainBatchSpec(batch_size, keep_prob)
    losses = [] if losses is None else losses
    acc = np.zeros(len(planner.levels))
    for step in range(steps):
        idx = rng.child(0, step).integers(0, len(bank), batch_size)
        for l, bb in enumerate(planner.backbones):
            try:
                acc[l] += train_step(bb, bank.coded[l][idx], bank.conditions[l][idx], rng.child(1, step, l), spec)
            except TrainingError as exc:
                raise TrainingError(f"level {l}: {exc}") from exc
        if (step + 1) % log_every == 0 or step + 1 == steps:
            span = (step % log_every) + 1
            for l in range(len(acc)):
                losses.append((f"level{l}", step + 1, float(acc[l] / span)))
            acc[:] = 0.0
    return losses


def train_all(cfg: RunConfig, dataset: Dataset, progress=None) -> TrainedModel:
    cfg.validate()
    env = make_env(cfg.run.env)
    if (dataset.obs_dim, dataset.act_dim) != (env.obs_dim, env.act_dim):
        raise ConfigurationError(f"dataset dims ({dataset.obs_dim}, {dataset.act_dim}) do not fit env {env.name}")
    rng = Rng(cfg.run.seed)
    losses = []
    value = None
    if cfg.critic.kind == "value":
        value = train_value(dataset, cfg.critic.gamma, cfg.critic.expectile, cfg.critic.steps,
                            cfg.train.batch_size, rng.child(1), cfg.critic.width, cfg.backbone.lr,
                            cfg.train.log_every)
        losses += [("value", (i + 1) * cfg.train.log_every, l) for i, l in enumerate(value.history)]
        log.info("value critic trained, final loss %.4g", value.history[-1] if value.history else float("nan"))
    planner = build_untrained(cfg, dataset.obs_dim, dataset.stats, rng.child(2), value)
    bank = SliceBank.build(dataset, planner.levels, planner.critic, cfg.planner.target)
    planner.normalizer = bank.normalizer
    planner.coder = bank.coder
    planner.samplers = samplers_for(cfg, len(planner.levels), bank.token_bound())
    train_backbones(planner, bank, cfg.train.steps, cfg.train.batch_size, cfg.backbone.keep_prob, rng.child(3),
                    cfg.train.log_every, losses)
    invdyn, mse = train_inverse_dynamics(dataset, cfg.train.invdyn_steps, cfg.train.batch_size, rng.child(4),
                                         cfg.train.invdyn_width, cfg.backbone.lr, log_every=cfg.train.log_every)
    losses += [("invdyn", (i + 1) * cfg.train.log_every, l) for i, l in enumerate(invdyn.history)]
    planner.inverse_dynamics = invdyn
    log.info("inverse dynamics held-out mse %.3g", mse)
    return TrainedModel(cfg, planner, value, losses, mse)


# ------------------------------------------------------------- persistence


def _mlp_meta(mlp: MlpParams) -> dict:
    return {"widths": mlp.widths, "activations": list(mlp.activations)}


def _mlp_restore(meta: dict, prefix: str, tensors: dict) -> MlpParams:
    widths = meta["widths"]
    shapes = {}
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        shapes[f"w{i}"] = (a, b)
        shapes[f"b{i}"] = (b,)
    t = checkpoint.unprefixed(prefix, tensors, shapes)
    n = len(widths) - 1
    return MlpParams([t[f"w{i}"] for i in range(n)], [t[f"b{i}"] for i in range(n)], list(meta["activations"]))


def checkpoint_payload(model: TrainedModel) -> tuple[dict, dict[str, np.ndarray]]:
    p = model.planner
    doc = {
        "kind": CHECKPOINT_KIND,
        "config": model.config.to_dict(),
        "levels": [list(lv.as_tuple()) for lv in p.levels],
        "geometry": [bb.net.geometry() for bb in p.backbones],
        "stats": {"mean": np.asarray(p.stats.mean, dtype=np.float64).tolist(),
                  "std": np.asarray(p.stats.std, dtype=np.float64).tolist()},
        "normalizer": p.normalizer.to_dict() if p.normalizer else None,
        "coder": p.coder.to_dict() if p.coder else None,
        "invdyn_mse": model.invdyn_mse,
        "clip_x0": p.samplers[0].clip_x0,
    }
    tensors = {}
    for l, bb in enumerate(p.backbones):
        tensors.update(checkpoint.prefixed(f"level{l}", bb.net.named_tensors()))
    if model.value is not None:
        doc["value"] = {**_mlp_meta(model.value.net), "scale": model.value.scale, "gamma": model.value.gamma}
        tensors.update(checkpoint.prefixed("value", model.value.net.named_tensors()))
    if p.inverse_dynamics is not None:
        inv = p.inverse_dynamics
        doc["invdyn"] = {**_mlp_meta(inv.net), "action_scale": inv.action_scale,
                         "delta_std": np.asarray(inv.delta_std, dtype=np.float64).tolist()}
        tensors.update(checkpoint.prefixed("invdyn", inv.net.named_tensors()))
    return doc, tensors


def save_model(model: TrainedModel, path) -> None:
    checkpoint.save(path, *checkpoint_payload(model))


def load_model(path, expect: RunConfig | None = None) -> TrainedModel:
    """Rebuild a trained planner; ``expect`` must agree with the stored model-defining settings."""
    doc, tensors = checkpoint.load(path)
    if doc.get("kind") != CHECKPOINT_KIND:
        raise VersioningError(f"{path} is not a planner checkpoint")
    cfg = RunConfig.from_dict(doc["config"])
    if expect is not None:
        check_compatible(cfg, expect)
    stats = ObsStats(np.asarray(doc["stats"]["mean"], dtype=DTYPE), np.asarray(doc["stats"]["std"], dtype=DTYPE))
    env = make_env(cfg.run.env)
    value = None
    if "value" in doc:
        meta = doc["value"]
        value = ValueCritic(_mlp_restore(meta, "value", tensors), stats, meta["gamma"], meta["scale"])
    invdyn = None
    if "invdyn" in doc:
        meta = doc["invdyn"]
        invdyn = InverseDynamics(_mlp_restore(meta, "invdyn", tensors), stats,
                                 np.asarray(meta["delta_std"], dtype=np.float64), meta["action_scale"])
    norm = None
    if doc.get("normalizer"):
        norm = ConditionNormalizer(**doc["normalizer"])
    planner = build_untrained(cfg, env.obs_dim, stats, Rng(0), value, norm, invdyn, doc.get("clip_x0"))
    if doc.get("coder"):
        planner.coder = PlanCoder(**doc["coder"])
    if [list(lv.as_tuple()) for lv in planner.levels] != doc["levels"]:
        raise VersioningError("stored level geometry disagrees with the stored config")
    for l, (bb, geom) in enumerate(zip(planner.backbones, doc["geometry"])):
        shapes = {k: v.shape for k, v in bb.net.named_tensors().items()}
        bb.net = denoiser_from_tensors(geom, checkpoint.unprefixed(f"level{l}", tensors, shapes))
    return TrainedModel(cfg, planner, value, [], doc.get("invdyn_mse", float("nan")))


# settings that change what the checkpoint contains
MODEL_KEYS = {
    "run": ("env", "mode"),
    "levels": ("horizon", "jumps"),
    "backbone": ("kind", "width", "depth", "diffusion_steps"),
    "critic": ("kind",),
}


def check_compatible(stored: RunConfig, wanted: RunConfig) -> None:
    a, b = stored.to_dict(), wanted.to_dict()
    for section, keys in MODEL_KEYS.items():
        for key in keys:
            if a[section][key] != b[section][key]:
                raise VersioningError(
                    f"checkpoint has {section}.{key} = {a[section][key]!r}, run asks for {b[section][key]!r}")
