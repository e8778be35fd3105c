"""Run configuration: a sectioned ``key = value`` file, overridable from the CLI.

Example::

    [run]
    env = maze
    seed = 0
    mode = prp

    [levels]
    horizon = 129
    jumps = 32, 8, 1

Unknown sections or keys are rejected.  ``RunConfig.to_dict`` is what gets
embedded in checkpoints; ``RunConfig.from_dict`` restores it exactly.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .backbones import KINDS
from .critics import CRITIC_KINDS
from .data import DEFAULT_MIX, check_mix, parse_mix
from .envs import make_env
from .errors import ConfigurationError
from .prp import MODES, build_levels, mode_jumps


@dataclass
class RunSection:
    env: str = "maze"
    seed: int = 0
    mode: str = "prp"
    out: str = "runs/default"


@dataclass
class DataSection:
    path: str = ""
    episodes: int = 300
    mix: str = ""  # "expert=0.3,noisy=0.3,..."; empty means the env's default mixture


@dataclass
class LevelSection:
    horizon: int = 129
    jumps: tuple[int, ...] = (32, 8, 1)


@dataclass
class BackboneSection:
    kind: str = "diffusion"
    width: int = 64
    depth: int = 2
    diffusion_steps: int = 1000
    sampling_steps: int = 3
    guidance: float = 0.0
    keep_prob: float = 0.75
    lr: float = 1e-3
    weight_decay: float = 1e-5


@dataclass
class CriticSection:
    kind: str = "value"
    gamma: float = 0.99
    expectile: float = 0.9
    steps: int = 3000
    width: int = 256


@dataclass
class PlannerSection:
    candidates: int = 32
    target: float = 1.0
    select_every_level: bool = True


@dataclass
class TrainSection:
    steps: int = 3000
    batch_size: int = 256
    invdyn_steps: int = 3000
    invdyn_width: int = 256
    log_every: int = 50


@dataclass
class EvalSection:
    episodes: int = 100
    max_steps: int = 0  # 0: the environment's own cap


@dataclass
class BenchSection:
    decisions: int = 200
    warmup: int = 10


@dataclass
class ReflowSection:
    pairs: int = 0  # 0: 50 couplings per dataset episode
    steps: int = 2000
    lr: float = 2e-5
    sampling_steps: int = 20


SECTIONS = {
    "run": RunSection,
    "data": DataSection,
    "levels": LevelSection,
    "backbone": BackboneSection,
    "critic": CriticSection,
    "planner": PlannerSection,
    "train": TrainSection,
    "eval": EvalSection,
    "bench": BenchSection,
    "reflow": ReflowSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    levels: LevelSection = field(default_factory=LevelSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    critic: CriticSection = field(default_factory=CriticSection)
    planner: PlannerSection = field(default_factory=PlannerSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    bench: BenchSection = field(default_factory=BenchSection)
    reflow: ReflowSection = field(default_factory=ReflowSection)

    # -- conversions

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            sec = dataclasses.asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items()}
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        cfg = cls()
        for name, values in doc.items():
            for key, value in values.items():
                cfg.set(name, key, value)
        return cfg

    def set(self, section: str, key: str, value) -> None:
        if section not in SECTIONS:
            raise ConfigurationError(f"unknown config section [{section}]")
        sec = getattr(self, section)
        fields = {f.name: f for f in dataclasses.fields(sec)}
        if key not in fields:
            raise ConfigurationError(f"unknown key {key!r} in [{section}]")
        setattr(sec, key, _coerce(type(getattr(sec, key)), value, f"{section}.{key}"))

    def dumps(self) -> str:
        lines = []
        for name, values in self.to_dict().items():
            lines.append(f"[{name}]")
            for key, value in values.items():
                if isinstance(value, list):
                    value = ", ".join(str(v) for v in value)
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)

    # -- derived

    def planner_geometry(self) -> tuple[int, list[int]]:
        return mode_jumps(self.run.mode, self.levels.horizon, self.levels.jumps)

    def level_configs(self):
        return build_levels(*self.planner_geometry())

    def reflow_pairs(self, n_episodes: int) -> int:
        return self.reflow.pairs or 50 * n_episodes

    def policy_mix(self) -> dict[str, float]:
        return parse_mix(self.data.mix) if self.data.mix else dict(DEFAULT_MIX[self.run.env])

    def validate(self) -> "RunConfig":
        make_env(self.run.env)
        if self.run.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.run.mode!r}; choose from {MODES}")
        build_levels(self.levels.horizon, self.levels.jumps)
        self.level_configs()
        if self.backbone.kind not in KINDS:
            raise ConfigurationError(f"unknown backbone {self.backbone.kind!r}; choose from {KINDS}")
        if self.critic.kind not in CRITIC_KINDS:
            raise ConfigurationError(f"unknown critic {self.critic.kind!r}; choose from {CRITIC_KINDS}")
        check_mix(self.policy_mix())
        positive = {
            "data.episodes": self.data.episodes,
            "backbone.width": self.backbone.width,
            "backbone.depth": self.backbone.depth,
            "backbone.sampling_steps": self.backbone.sampling_steps,
            "planner.candidates": self.planner.candidates,
            "train.batch_size": self.train.batch_size,
            "eval.episodes": self.eval.episodes,
            "bench.decisions": self.bench.decisions,
            "reflow.sampling_steps": self.reflow.sampling_steps,
        }
        for key, value in positive.items():
            if value < 1:
                raise ConfigurationError(f"{key} must be positive, got {value}")
        nonneg = {"train.steps": self.train.steps, "train.invdyn_steps": self.train.invdyn_steps,
                  "critic.steps": self.critic.steps, "bench.warmup": self.bench.warmup,
                  "eval.max_steps": self.eval.max_steps, "reflow.steps": self.reflow.steps,
                  "reflow.pairs": self.reflow.pairs}
        for key, value in nonneg.items():
            if value < 0:
                raise ConfigurationError(f"{key} must be non-negative, got {value}")
        if self.backbone.kind == "diffusion" and self.backbone.sampling_steps > self.backbone.diffusion_steps:
            raise ConfigurationError("more sampling steps than diffusion steps")
        if not 0.0 <= self.backbone.keep_prob <= 1.0:
            raise ConfigurationError("backbone.keep_prob must lie in [0, 1]")
        if not 0.0 < self.critic.gamma <= 1.0 or not 0.0 < self.critic.expectile < 1.0:
            raise ConfigurationError("critic.gamma must lie in (0, 1] and critic.expectile in (0, 1)")
        for key in ("backbone.lr", "reflow.lr"):
            sec, name = key.split(".")
            if getattr(getattr(self, sec), name) <= 0:
                raise ConfigurationError(f"{key} must be positive")
        return self


def _coerce(kind, value, where: str):
    try:
        if kind is tuple:
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split()]
            return tuple(int(v) for v in value)
        if kind is bool:
            if isinstance(value, str):
                low = value.strip().lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return low in ("true", "1", "yes")
            return bool(value)
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind is float:
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{where}: cannot read {value!r} as {kind.__name__}") from exc


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Read a config file (if any), apply ``section.key -> value`` overrides, validate."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigurationError(f"config file {p} does not exist")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(p.read_text())
        except configparser.Error as exc:
            raise ConfigurationError(f"cannot parse {p}: {exc}") from exc
        for section in parser.sections():
            for key, value in parser.items(section):
                cfg.set(section, key, value)
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        cfg.set(section, key, value)
    return cfg.validate()
