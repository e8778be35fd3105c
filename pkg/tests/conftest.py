import pytest

from prplan.config import RunConfig
from prplan.data import generate_dataset
from prplan.training import train_all

TINY = {
    "data.episodes": 6,
    "levels.horizon": 17,
    "levels.jumps": "4, 1",
    "backbone.width": 8,
    "backbone.depth": 1,
    "backbone.diffusion_steps": 50,
    "backbone.lr": 1e-3,
    "critic.steps": 20,
    "critic.width": 16,
    "planner.candidates": 4,
    "train.steps": 30,
    "train.batch_size": 32,
    "train.invdyn_steps": 20,
    "train.invdyn_width": 16,
    "train.log_every": 10,
    "eval.episodes": 2,
    "eval.max_steps": 5,
    "bench.decisions": 4,
    "bench.warmup": 1,
    "reflow.pairs": 64,
    "reflow.steps": 10,
}


def tiny_config(**extra) -> RunConfig:
    cfg = RunConfig()
    for dotted, value in {**TINY, **extra}.items():
        section, _, key = dotted.partition(".")
        cfg.set(section, key, value)
    return cfg.validate()


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset("maze", None, TINY["data.episodes"], 0)


@pytest.fixture(scope="session")
def tiny_model(tiny_dataset):
    return train_all(tiny_config(), tiny_dataset)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
