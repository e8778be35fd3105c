"""Coarse-to-fine planning over a chain of jumpy levels.

Level ``l`` plans ``H_l`` environment steps with key points every ``I_l`` steps,
so it emits ``n_l = (H_l - 1) / I_l + 1`` tokens.  The next level re-plans only
the first interval of the selected plan: ``H_{l+1} = I_l + 1``, with its first
token pinned to the current observation and its last token pinned to the
previous level's second key point.  The last level has ``I = 1`` and its first
two states drive the inverse-dynamics model.

Plans live in normalized observation space; the critic and the inverse-dynamics
model see raw observations.  Each level's generator works in its own coding of
that space (``PlanCoder``): the first token as is, every later token as its
displacement from the first, scaled to unit spread for that level.  Without it
the finest level has to resolve a one-step move that is a few percent of the
observation range.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .backbones import GenerativeBackbone, sample
from .constants import DTYPE
from .critics import InverseDynamics, PropertyCritic, extract_action  # noqa: F401
from .data import Dataset, Episode, ObsStats, denormalize_obs, normalize_obs
from .errors import ConfigurationError, DataError, PlanningError
from .numerics import Rng
from .schedules import Inpaint, SamplerConfig

MODES = ("prp", "one-shot", "only-last-level")


@dataclass(frozen=True)
class LevelConfig:
    index: int
    horizon: int
    jump: int

    @property
    def n_tokens(self) -> int:
        return (self.horizon - 1) // self.jump + 1

    @property
    def inpaint_slots(self) -> tuple[int, ...]:
        return (0,) if self.index == 0 else (0, self.n_tokens - 1)

    def as_tuple(self) -> tuple[int, int, int]:
        return self.horizon, self.jump, self.n_tokens


def build_levels(total_horizon: int, jumps) -> list[LevelConfig]:
    jumps = [int(j) for j in jumps]
    if not jumps or jumps[-1] != 1:
        raise ConfigurationError(f"jumps {jumps} must end in 1")
    if total_horizon < 2:
        raise ConfigurationError("planning horizon must cover at least one step")
    if any(j < 1 for j in jumps):
        raise ConfigurationError("jumps must be positive")
    if (total_horizon - 1) % jumps[0]:
        raise ConfigurationError(f"jump {jumps[0]} does not divide horizon-1 = {total_horizon - 1}")
    for prev, cur in zip(jumps, jumps[1:]):
        if prev % cur:
            raise ConfigurationError(f"jump {cur} does not divide the previous jump {prev}")
    levels, horizon = [], total_horizon
    for i, jump in enumerate(jumps):
        levels.append(LevelConfig(i, horizon, jump))
        horizon = jump + 1
    return levels


def mode_jumps(mode: str, total_horizon: int, jumps) -> tuple[int, list[int]]:
    """(horizon, jumps) of the planner used by an ablation mode."""
    jumps = list(jumps)
    if mode == "prp":
        return total_horizon, jumps
    if mode == "one-shot":
        return total_horizon, [1]
    if mode == "only-last-level":
        last = build_levels(total_horizon, jumps)[-1]
        return last.horizon, [1]
    raise ConfigurationError(f"unknown mode {mode!r}; choose from {MODES}")


def token_count(levels: list[LevelConfig]) -> int:
    return sum(lv.n_tokens for lv in levels)


# ------------------------------------------------------------- conditions


@dataclass
class ConditionNormalizer:
    """Per-level affine map of property labels onto [-1, 1] from the dataset range."""

    lo: list[float]
    hi: list[float]
    target: float = 1.0

    @classmethod
    def fit(cls, labels_per_level, target: float = 1.0) -> "ConditionNormalizer":
        lo = [float(np.min(v)) for v in labels_per_level]
        hi = [float(np.max(v)) for v in labels_per_level]
        return cls(lo, hi, target)

    def _span(self, level: int) -> float:
        # a constant label set maps everything to -1; the map stays invertible
        return max(self.hi[level] - self.lo[level], 1e-8)

    def normalize(self, level: int, c):
        return (2.0 * (np.asarray(c, dtype=np.float64) - self.lo[level]) / self._span(level) - 1.0).astype(DTYPE)

    def denormalize(self, level: int, z):
        return (np.asarray(z, dtype=np.float64) + 1.0) * 0.5 * self._span(level) + self.lo[level]

    def to_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "target": self.target}


# ----------------------------------------------------------------- coding


@dataclass
class PlanCoder:
    """Per-level map between normalized plans and generator tokens."""

    scale: list[list[float]]  # per level, per observation dim

    @classmethod
    def fit(cls, tokens_per_level) -> "PlanCoder":
        scale = []
        for t in tokens_per_level:
            d = np.asarray(t[:, 1:] - t[:, :1], dtype=np.float64).reshape(-1, t.shape[-1])
            sd = d.std(axis=0) if d.size else np.ones(t.shape[-1])
            scale.append(np.where(sd > 1e-6, sd, 1.0).tolist())
        return cls(scale)

    def _s(self, level: int) -> np.ndarray:
        return np.asarray(self.scale[level], dtype=DTYPE)

    def encode(self, level: int, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=DTYPE)
        z = x.copy()
        z[..., 1:, :] = (x[..., 1:, :] - x[..., :1, :]) / self._s(level)
        return z

    def decode(self, level: int, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=DTYPE)
        x = z.copy()
        x[..., 1:, :] = z[..., :1, :] + z[..., 1:, :] * self._s(level)
        return x

    def to_dict(self) -> dict:
        return {"scale": self.scale}


# --------------------------------------------------------------- training


def _padded(episode: Episode, pad: int):
    """States and rewards extended by ``pad`` copies of the last state earning 0."""
    if len(episode) == 0:
        raise DataError("cannot slice an empty episode")
    obs = np.concatenate([episode.obs, np.repeat(episode.obs[-1:], pad, axis=0)])
    rew = np.concatenate([np.asarray(episode.rewards, dtype=np.float64), np.zeros(pad + 1)])
    return obs, rew


def make_training_slices(episode: Episode, levels: list[LevelConfig], critic: PropertyCritic,
                         starts=None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per level, jumpy state sequences and raw property labels for each start index.

    The label of a jumpy sequence is the property of the dense window it was cut from.
    """
    h0 = levels[0].horizon
    obs, rew = _padded(episode, h0)
    if starts is None:
        starts = np.arange(len(episode))
    starts = np.asarray(starts, dtype=np.int64)
    out = []
    for lv in levels:
        idx = starts[:, None] + lv.jump * np.arange(lv.n_tokens)
        dense = starts[:, None] + np.arange(lv.horizon)
        labels = critic.label(rew[dense], obs[starts + lv.horizon - 1])
        out.append((obs[idx], labels))
    return out


@dataclass
class SliceBank:
    """All training windows of a dataset, with per-level normalized tokens and conditions."""

    levels: list[LevelConfig]
    tokens: list[np.ndarray]  # per level (N, n_l, obs_dim), normalized observations
    conditions: list[np.ndarray]  # per level (N,), in [-1, 1]
    normalizer: ConditionNormalizer
    coder: PlanCoder
    coded: list[np.ndarray]  # tokens as the generators see them

    def __len__(self):
        return self.tokens[0].shape[0]

    def token_bound(self) -> float:
        """Largest coded coordinate seen in training; bounds reconstructed samples."""
        return float(max(np.abs(t).max() for t in self.coded))

    @classmethod
    def build(cls, dataset: Dataset, levels: list[LevelConfig], critic: PropertyCritic,
              target: float = 1.0) -> "SliceBank":
        per_episode = [make_training_slices(ep, levels, critic) for ep in dataset.episodes]
        raw_labels = [np.concatenate([pe[l][1] for pe in per_episode]) for l in range(len(levels))]
        norm = ConditionNormalizer.fit(raw_labels, target)
        tokens = [normalize_obs(dataset.stats, np.concatenate([pe[l][0] for pe in per_episode]))
                  for l in range(len(levels))]
        conds = [norm.normalize(l, raw_labels[l]) for l in range(len(levels))]
        coder = PlanCoder.fit(tokens)
        return cls(levels, tokens, conds, norm, coder, [coder.encode(l, t) for l, t in enumerate(tokens)])


# -------------------------------------------------------------- inference


def select_candidate(scores, mode: str = "argmax", target: float | None = None) -> int:
    """Index of the best score; ties go to the lowest index."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise PlanningError("no candidates to select from")
    if not np.all(np.isfinite(s)):
        raise PlanningError(f"non-finite candidate score at index {int(np.argmin(np.isfinite(s)))}")
    if mode == "argmax":
        return int(np.argmax(s))
    if mode == "nearest":
        return int(np.argmin(np.abs(s - target)))
    raise ConfigurationError(f"unknown selection mode {mode!r}")


@dataclass
class PrpPlan:
    levels: list[LevelConfig]
    obs: np.ndarray
    candidates: list[np.ndarray]  # per level (N, n_l, obs_dim), normalized
    scores: list[np.ndarray]
    selected: list[int]
    action: np.ndarray | None = None

    def chosen(self, level: int) -> np.ndarray:
        return self.candidates[level][self.selected[level]]

    def to_dict(self, stats: ObsStats) -> dict:
        return {
            "observation": np.asarray(self.obs, dtype=np.float64).tolist(),
            "action": None if self.action is None else np.asarray(self.action, dtype=np.float64).tolist(),
            "levels": [
                {
                    "horizon": lv.horizon,
                    "jump": lv.jump,
                    "n_tokens": lv.n_tokens,
                    "candidates": denormalize_obs(stats, self.candidates[i]).astype(np.float64).tolist(),
                    "scores": np.asarray(self.scores[i], dtype=np.float64).tolist(),
                    "selected": self.selected[i],
                }
                for i, lv in enumerate(self.levels)
            ],
        }

    def to_json(self, stats: ObsStats) -> str:
        return json.dumps(self.to_dict(stats))


@dataclass
class Planner:
    levels: list[LevelConfig]
    backbones: list[GenerativeBackbone]
    critic: PropertyCritic
    stats: ObsStats
    samplers: list[SamplerConfig]
    inverse_dynamics: InverseDynamics | None = None
    normalizer: ConditionNormalizer | None = None
    n_candidates: int = 32
    select_every_level: bool = True
    selection: str = "argmax"
    coder: PlanCoder | None = None  # None: generators work on normalized plans directly
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.backbones) != len(self.levels) or len(self.samplers) != len(self.levels):
            raise ConfigurationError("need one backbone and one sampler per level")
        for lv, bb in zip(self.levels, self.backbones):
            if bb.n_tokens != lv.n_tokens:
                raise ConfigurationError(f"level {lv.index} backbone has {bb.n_tokens} tokens, needs {lv.n_tokens}")
        if self.n_candidates < 1:
            raise ConfigurationError("need at least one candidate")

    def condition(self) -> float:
        return 1.0 if self.normalizer is None else self.normalizer.target

    def plan(self, obs: np.ndarray, rng: Rng) -> PrpPlan:
        o = normalize_obs(self.stats, np.asarray(obs)[None])[0]
        plan = PrpPlan(self.levels, np.asarray(obs), [], [], [])
        anchor = None
        for lv, bb, sampler in zip(self.levels, self.backbones, self.samplers):
            values = np.stack([o] if anchor is None else [o, anchor])
            if self.coder is None:
                cand = sample(bb, self.n_candidates, self.condition(), sampler, Inpaint(lv.inpaint_slots, values),
                              rng.child(lv.index))
            else:
                pinned = self.coder.encode(lv.index, values[None])[0]
                z = sample(bb, self.n_candidates, self.condition(), sampler, Inpaint(lv.inpaint_slots, pinned),
                           rng.child(lv.index))
                cand = self.coder.decode(lv.index, z)
                cand[:, list(lv.inpaint_slots)] = values  # exact, whatever the coding's rounding
            if lv.index == 0 or self.select_every_level:
                raw = denormalize_obs(self.stats, cand)
                scores = self.critic.score(raw, lv.jump)
                if not np.all(np.isfinite(scores)):
                    raise PlanningError(f"level {lv.index}: non-finite candidate score")
                pick = select_candidate(scores, self.selection, self.condition_target())
            else:
                scores, pick = np.zeros(self.n_candidates), 0
            plan.candidates.append(cand)
            plan.scores.append(scores)
            plan.selected.append(pick)
            anchor = cand[pick, 1]
        if self.inverse_dynamics is not None:
            nxt = denormalize_obs(self.stats, plan.chosen(len(self.levels) - 1)[1][None])
            plan.action = self.inverse_dynamics(np.asarray(obs)[None], nxt)[0]
        return plan

    def condition_target(self) -> float | None:
        return self.extras.get("score_target")

    def act(self, obs: np.ndarray, rng: Rng) -> np.ndarray:
        return self.plan(obs, rng).action
