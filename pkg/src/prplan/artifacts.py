"""Files the CLI writes (loss curves, bench reports, plan exports) and reflow of a trained planner."""

from __future__ import annotations

import copy
import dataclasses
import json
from pathlib import Path

import numpy as np

from .backbones import TrainBatchSpec, reflow_generate, reflow_train_step, straightness
from .config import RunConfig
from .constants import DTYPE
from .data import Dataset, denormalize_obs
from .envs import make_env
from .errors import ConfigurationError, UnsupportedVisualizationError
from .evaluation import BenchReport
from .numerics import AdamWState, Rng
from .prp import PlanCoder, PrpPlan, SliceBank
from .schedules import Inpaint
from .training import TrainedModel, build_untrained

SCHEMA_VERSION = 1
LOSS_HEADER = "component,step,loss"
REFLOW_TAG = 7003


def write_losses(path, losses) -> None:
    lines = [LOSS_HEADER] + [f"{name},{step},{loss:.9g}" for name, step, loss in losses]
    Path(path).write_text("\n".join(lines) + "\n")


def read_losses(path) -> list[tuple[str, int, float]]:
    rows = Path(path).read_text().splitlines()
    if not rows or rows[0] != LOSS_HEADER:
        raise ValueError(f"{path}: unexpected header")
    out = []
    for line in rows[1:]:
        name, step, loss = line.split(",")
        out.append((name, int(step), float(loss)))
    return out


def write_bench(out_dir, reports: list[BenchReport]) -> dict:
    out = Path(out_dir)
    rows = ["mode,decision,seconds"]
    for r in reports:
        rows += r.csv_rows()[1:]
    (out / "bench.csv").write_text("\n".join(rows) + "\n")
    summaries = [r.summary() for r in reports]
    base = summaries[0]["mean_ms"]
    for s in summaries:
        s["latency_vs_first"] = s["mean_ms"] / base
    doc = {
        "schema": SCHEMA_VERSION,
        "timer": "time.perf_counter (monotonic); plan only, environment stepping excluded",
        "rows": summaries,
    }
    (out / "bench.json").write_text(json.dumps(doc, indent=1))
    return doc


def untrained_like(model: TrainedModel, mode: str):
    """A planner of the same width and solver settings in another mode; weights do not affect cost."""
    cfg = copy.deepcopy(model.config)
    cfg.run.mode = mode
    cfg.validate()
    p = model.planner
    other = build_untrained(cfg, p.backbones[0].token_dim, p.stats, Rng(0), model.value, p.normalizer,
                            p.inverse_dynamics, p.samplers[0].clip_x0)
    if p.coder is not None:
        # unit scales: same coding work per decision as a trained planner
        other.coder = PlanCoder([[1.0] * p.backbones[0].token_dim for _ in other.levels])
    return other


# ------------------------------------------------------------------ reflow


def reflow_model(model: TrainedModel, dataset: Dataset, cfg: RunConfig, probe: int = 512) -> dict:
    """Straighten every level's flow in place on self-generated couplings."""
    if model.config.backbone.kind != "rf":
        raise ConfigurationError("reflow needs a rectified-flow checkpoint")
    p = model.planner
    bank = SliceBank.build(dataset, p.levels, p.critic, p.normalizer.target if p.normalizer else 1.0)
    rng = Rng(cfg.run.seed, REFLOW_TAG)
    spec = TrainBatchSpec(cfg.train.batch_size, cfg.backbone.keep_prob)
    n_pairs = cfg.reflow_pairs(len(dataset.episodes))
    rows = []
    for l, (lv, bb) in enumerate(zip(p.levels, p.backbones)):
        slots = list(lv.inpaint_slots)
        idx = rng.child(l, 0).integers(0, len(bank), n_pairs)
        pairs = reflow_generate(bb, n_pairs, cfg.reflow.sampling_steps, rng.child(l, 1),
                                cond=bank.conditions[l][idx], inpaint_values=bank.coded[l][idx][:, slots])
        pidx = rng.child(l, 2).integers(0, len(bank), probe)
        noise = rng.child(l, 3).randn(probe, bb.n_tokens, bb.token_dim)
        inpaint = Inpaint(tuple(slots), bank.coded[l][pidx][:, slots])
        before = straightness(bb, noise, bank.conditions[l][pidx], inpaint=inpaint)
        # warm start from the trained flow with a fresh optimizer at the reflow rate
        bb.optimizer = AdamWState(lr=cfg.reflow.lr, weight_decay=cfg.backbone.weight_decay)
        losses = []
        for step in range(cfg.reflow.steps):
            batch = rng.child(l, 4, step).integers(0, len(pairs), spec.batch_size)
            losses.append(reflow_train_step(bb, pairs, batch, rng.child(l, 5, step), spec))
        after = straightness(bb, noise, bank.conditions[l][pidx], inpaint=inpaint)
        rows.append({"level": l, "before": before, "after": after,
                     "final_loss": float(np.mean(losses[-50:])) if losses else float("nan")})
    model.config.reflow = dataclasses.replace(cfg.reflow)
    return {"schema": SCHEMA_VERSION, "pairs": n_pairs, "steps": cfg.reflow.steps,
            "lr": cfg.reflow.lr, "warm_start": True, "levels": rows}


# ------------------------------------------------------------- plan export

LEVEL_COLORS = ("#9ecae1", "#4292c6", "#08519c", "#08306b", "#041f45")
SVG_SIZE = 480


def far_dispersion(plan: PrpPlan, stats, level: int = 0) -> float:
    """Total variance of the candidates' final key points at one level (raw units)."""
    last = denormalize_obs(stats, plan.candidates[level][:, -1, :]).astype(np.float64)
    return float(last.var(axis=0).sum())


def export_plans(model: TrainedModel, obs, n_candidates: int, seed: int, out_dir) -> dict:
    env = make_env(model.config.run.env)
    if not getattr(env, "spatial", False):
        raise UnsupportedVisualizationError(f"env {env.name!r} has no 2-D spatial observations to draw")
    planner = dataclasses.replace(model.planner, n_candidates=n_candidates)
    if obs is None:
        obs = env.reset(Rng(seed))
    obs = np.asarray(obs, dtype=DTYPE)
    plan = planner.plan(obs, Rng(seed, 9000))
    doc = plan.to_dict(planner.stats)
    doc["schema"] = SCHEMA_VERSION
    doc["mode"] = model.config.run.mode
    doc["dispersion"] = far_dispersion(plan, planner.stats)
    out = Path(out_dir)
    (out / "plan.json").write_text(json.dumps(doc))
    (out / "plans.svg").write_text(render_svg(plan, planner.stats, env))
    return doc


def _xy(p) -> str:
    return f"{p[0] * SVG_SIZE:.2f},{(1.0 - p[1]) * SVG_SIZE:.2f}"


def render_svg(plan: PrpPlan, stats, env) -> str:
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" height="{SVG_SIZE}" '
             f'viewBox="0 0 {SVG_SIZE} {SVG_SIZE}">',
             f'<rect width="{SVG_SIZE}" height="{SVG_SIZE}" fill="white" stroke="black"/>']
    for w in getattr(env, "walls", ()):
        x, y = w.x0 * SVG_SIZE, (1.0 - w.y1) * SVG_SIZE
        parts.append(f'<rect class="wall" x="{x:.2f}" y="{y:.2f}" width="{(w.x1 - w.x0) * SVG_SIZE:.2f}" '
                     f'height="{(w.y1 - w.y0) * SVG_SIZE:.2f}" fill="#555"/>')
    gx, gy = _xy(env.goal).split(",")
    parts.append(f'<circle class="goal" cx="{gx}" cy="{gy}" r="{env.goal_radius * SVG_SIZE:.2f}" '
                 f'fill="#b7e4c7"/>')
    for l, cand in enumerate(plan.candidates):
        color = LEVEL_COLORS[min(l, len(LEVEL_COLORS) - 1)]
        raw = denormalize_obs(stats, cand)
        parts.append(f'<g class="level" data-level="{l}" stroke="{color}" fill="none">')
        for i, seq in enumerate(raw):
            width = 2.5 if i == plan.selected[l] else 0.8
            pts = " ".join(_xy(p) for p in seq)
            parts.append(f'<polyline class="candidate" stroke-width="{width}" points="{pts}"/>')
        parts.append("</g>")
    ox, oy = _xy(plan.obs).split(",")
    parts.append(f'<circle class="obs" cx="{ox}" cy="{oy}" r="4" fill="red"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
