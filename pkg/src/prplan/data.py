"""Episode datasets: scripted generation, the ``PRPD`` binary format, normalization.

Binary layout (little-endian)::

    b"PRPD", u32 version, u32 obs_dim, u32 act_dim, u32 episode_count
    per episode: u32 length, f32 obs[(length+1) * obs_dim], f32 act[length * act_dim],
                 f32 rew[length], u8 terminal
    stats block: f32 obs_mean[obs_dim], f32 obs_std[obs_dim]
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .constants import DTYPE, STD_GUARD
from .envs import POLICIES, make_env, rollout
from .errors import ConfigurationError, DataError
from .numerics import Rng

MAGIC = b"PRPD"
FORMAT_VERSION = 1


@dataclass
class Episode:
    obs: np.ndarray  # (length + 1, obs_dim)
    actions: np.ndarray  # (length, act_dim)
    rewards: np.ndarray  # (length,)
    terminal: bool = False

    def __len__(self):
        return self.rewards.shape[0]


@dataclass
class ObsStats:
    mean: np.ndarray
    std: np.ndarray

    def check(self):
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.std))):
            raise DataError("normalization stats are not finite")
        for i, s in enumerate(self.std):
            if s <= STD_GUARD:
                raise DataError(f"observation dimension {i} has degenerate std {s:.3g}")


def normalize_obs(stats: ObsStats, obs: np.ndarray) -> np.ndarray:
    stats.check()
    return ((np.asarray(obs, dtype=np.float64) - stats.mean) / stats.std).astype(DTYPE)


def denormalize_obs(stats: ObsStats, obs: np.ndarray) -> np.ndarray:
    stats.check()
    return (np.asarray(obs, dtype=np.float64) * stats.std + stats.mean).astype(DTYPE)


def compute_stats(episodes: list[Episode]) -> ObsStats:
    allobs = np.concatenate([ep.obs for ep in episodes]).astype(np.float64)
    return ObsStats(allobs.mean(axis=0).astype(DTYPE), allobs.std(axis=0).astype(DTYPE))


@dataclass
class Dataset:
    obs_dim: int
    act_dim: int
    episodes: list[Episode]
    stats: ObsStats | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.episodes:
            raise DataError("dataset has no episodes")
        for i, ep in enumerate(self.episodes):
            n = len(ep)
            if ep.obs.shape != (n + 1, self.obs_dim) or ep.actions.shape != (n, self.act_dim):
                raise DataError(f"episode {i}: array shapes inconsistent with header dims")
        if self.stats is None:
            self.stats = compute_stats(self.episodes)

    @property
    def n_transitions(self) -> int:
        return sum(len(ep) for ep in self.episodes)

    def transitions(self):
        """Stacked ``(obs, action, next_obs)`` arrays over all episodes."""
        o = np.concatenate([ep.obs[:-1] for ep in self.episodes])
        a = np.concatenate([ep.actions for ep in self.episodes])
        o2 = np.concatenate([ep.obs[1:] for ep in self.episodes])
        return o, a, o2


# ----------------------------------------------------------------- format


def dumps(ds: Dataset) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IIII", FORMAT_VERSION, ds.obs_dim, ds.act_dim, len(ds.episodes)))
    for ep in ds.episodes:
        buf.write(struct.pack("<I", len(ep)))
        buf.write(np.asarray(ep.obs, dtype="<f4").tobytes())
        buf.write(np.asarray(ep.actions, dtype="<f4").tobytes())
        buf.write(np.asarray(ep.rewards, dtype="<f4").tobytes())
        buf.write(struct.pack("<B", int(ep.terminal)))
    buf.write(np.asarray(ds.stats.mean, dtype="<f4").tobytes())
    buf.write(np.asarray(ds.stats.std, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(data: bytes) -> Dataset:
    if data[:4] != MAGIC:
        raise DataError("not a dataset file (bad magic)")
    try:
        version, obs_dim, act_dim, count = struct.unpack_from("<IIII", data, 4)
    except struct.error as exc:
        raise DataError("truncated dataset header") from exc
    if version != FORMAT_VERSION:
        raise DataError(f"dataset format {version}, this build reads {FORMAT_VERSION}")
    pos = 20

    def take(n_floats):
        nonlocal pos
        end = pos + 4 * n_floats
        if end > len(data):
            raise DataError("truncated dataset payload")
        arr = np.frombuffer(data, dtype="<f4", count=n_floats, offset=pos).astype(DTYPE)
        pos = end
        return arr

    episodes = []
    for _ in range(count):
        if pos + 4 > len(data):
            raise DataError("truncated dataset payload")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        obs = take((n + 1) * obs_dim).reshape(n + 1, obs_dim)
        act = take(n * act_dim).reshape(n, act_dim)
        rew = take(n)
        if pos >= len(data):
            raise DataError("truncated dataset payload")
        terminal = bool(data[pos])
        pos += 1
        episodes.append(Episode(obs, act, rew, terminal))
    stats = ObsStats(take(obs_dim), take(obs_dim))
    if pos != len(data):
        raise DataError("trailing bytes after stats block")
    return Dataset(obs_dim, act_dim, episodes, stats)


def sidecar_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".json")


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dumps(ds))
    sidecar_path(path).write_text(json.dumps(ds.provenance, indent=1, sort_keys=True))


def load_dataset(path) -> Dataset:
    p = Path(path)
    if not p.exists():
        raise DataError(f"dataset {p} does not exist")
    ds = loads(p.read_bytes())
    side = sidecar_path(p)
    if side.exists():
        ds.provenance = json.loads(side.read_text())
    return ds


# ------------------------------------------------------------- generation

DEFAULT_MIX = {
    "maze": {"expert": 0.3, "noisy": 0.3, "random": 0.15, "dead_end": 0.25},
    "pointmass": {"random": 1.0},
    "runner": {"expert": 0.25, "noisy": 0.35, "random": 0.2, "dead_end": 0.2},
}


def parse_mix(text: str) -> dict[str, float]:
    """``"expert=0.5,random=0.5"`` -> dict."""
    mix = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        key, _, val = part.partition("=")
        try:
            mix[key.strip()] = float(val)
        except ValueError as exc:
            raise ConfigurationError(f"bad policy-mix entry {part!r}") from exc
    return mix


def check_mix(mix: dict[str, float]) -> None:
    for key, frac in mix.items():
        if key not in POLICIES:
            raise ConfigurationError(f"unknown policy {key!r}; choose from {POLICIES}")
        if frac < 0:
            raise ConfigurationError(f"negative fraction for {key!r}")
    if abs(sum(mix.values()) - 1.0) > 1e-6:
        raise ConfigurationError(f"policy fractions sum to {sum(mix.values())}, not 1")


def allocate(mix: dict[str, float], n: int) -> list[str]:
    """Largest-remainder split of ``n`` episodes between policies, in a fixed order."""
    keys = [k for k in POLICIES if mix.get(k, 0.0) > 0]
    raw = [mix[k] * n for k in keys]
    counts = [int(np.floor(r)) for r in raw]
    order = sorted(range(len(keys)), key=lambda i: -(raw[i] - counts[i]))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return [k for k, c in zip(keys, counts) for _ in range(c)]


def generate_dataset(env_name: str, mix: dict[str, float] | None, n_episodes: int, seed: int) -> Dataset:
    if n_episodes <= 0:
        raise DataError("cannot generate a dataset with zero episodes")
    env = make_env(env_name)
    mix = dict(DEFAULT_MIX[env_name] if mix is None else mix)
    check_mix(mix)
    kinds = allocate(mix, n_episodes)
    rng = Rng(seed)
    episodes, labels = [], []
    for i, kind in enumerate(kinds):
        r = rng.child(i)
        ro = rollout(env, env.make_policy(kind, r), r)
        episodes.append(Episode(
            np.asarray(ro.obs, dtype=DTYPE),
            np.asarray(ro.actions, dtype=DTYPE).reshape(-1, env.act_dim),
            np.asarray(ro.rewards, dtype=DTYPE),
            terminal=False,
        ))
        labels.append({"policy": kind, "success": bool(ro.success)})
    provenance = {"env": env_name, "seed": seed, "mix": mix, "episodes": labels}
    return Dataset(env.obs_dim, env.act_dim, episodes, provenance=provenance)
