import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prplan.backbones import make_backbone, sample
from prplan.critics import PropertyCritic, make_inverse_dynamics
from prplan.data import Episode, ObsStats, generate_dataset, normalize_obs
from prplan.envs import PointMaze2D
from prplan.errors import ConfigurationError, DataError, PlanningError
from prplan.numerics import Rng
from prplan.prp import (
    ConditionNormalizer,
    PlanCoder,
    Planner,
    SliceBank,
    build_levels,
    make_training_slices,
    mode_jumps,
    select_candidate,
    token_count,
)
from prplan.schedules import Inpaint, SamplerConfig

STATS = ObsStats(np.array([0.5, 0.5], np.float32), np.array([0.3, 0.25], np.float32))


class IndexCritic:
    """Scores each candidate by its position in the batch."""

    def score(self, raw, jump):
        return np.arange(raw.shape[0], dtype=np.float64)


def tiny_planner(seed=0, horizon=129, jumps=(32, 8, 1), kind="diffusion", critic=None, n_candidates=6, **kw):
    levels = build_levels(horizon, jumps)
    rng = Rng(seed)
    backbones = []
    for lv in levels:
        bb = make_backbone(kind, lv.n_tokens, 2, rng.child(lv.index), width=8, depth=1, diffusion_steps=50,
                           inpaint_slots=lv.inpaint_slots)
        bb.net.head.weights[0][...] = 0.5 * rng.child(lv.index, 1).randn(*bb.net.head.weights[0].shape)
        backbones.append(bb)
    solver = "diffusion" if kind == "diffusion" else "flow"
    samplers = [SamplerConfig(solver, 3, 1.5 if lv.index == 0 else 0.0) for lv in levels]
    critic = critic or PropertyCritic("reward", PointMaze2D())
    inv = make_inverse_dynamics(2, 2, STATS, rng.child(99), width=8)
    return Planner(levels, backbones, critic, STATS, samplers, inv, n_candidates=n_candidates, **kw)


# ----------------------------------------------------------------- geometry


@pytest.mark.parametrize("horizon, jumps, expect", [
    (129, [32, 8, 1], [(129, 32, 5), (33, 8, 5), (9, 1, 9)]),
    (49, [16, 4, 1], [(49, 16, 4), (17, 4, 5), (5, 1, 5)]),
    (9, [1], [(9, 1, 9)]),
])
def test_build_levels_examples(horizon, jumps, expect):
    assert [lv.as_tuple() for lv in build_levels(horizon, jumps)] == expect


def test_token_counts():
    assert token_count(build_levels(129, [32, 8, 1])) == 19
    assert token_count(build_levels(*mode_jumps("one-shot", 129, [32, 8, 1]))) == 129
    assert [lv.as_tuple() for lv in build_levels(*mode_jumps("only-last-level", 129, [32, 8, 1]))] == [(9, 1, 9)]


@pytest.mark.parametrize("horizon, jumps", [(129, [32, 8, 2]), (130, [32, 8, 1]), (129, [32, 6, 1]),
                                            (129, []), (1, [1]), (129, [0, 1])])
def test_build_levels_rejects(horizon, jumps):
    with pytest.raises(ConfigurationError):
        build_levels(horizon, jumps)


def test_unknown_mode():
    with pytest.raises(ConfigurationError):
        mode_jumps("two-shot", 129, [32, 8, 1])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from([2, 3, 4]), min_size=0, max_size=3), st.integers(1, 6))
def test_chaining_rule_property(factors, n0):
    jumps = [1]
    for f in factors:
        jumps.insert(0, jumps[0] * f)
    horizon = jumps[0] * n0 + 1
    levels = build_levels(horizon, jumps)
    assert levels[0].horizon == horizon and levels[-1].jump == 1
    for a, b in zip(levels, levels[1:]):
        assert b.horizon == a.jump + 1
    for lv in levels:
        assert (lv.horizon - 1) % lv.jump == 0 and lv.n_tokens == (lv.horizon - 1) // lv.jump + 1


# ------------------------------------------------------------------ slicing


def integer_episode(n_states=129, reward=0.0):
    obs = np.arange(n_states, dtype=np.float32)[:, None]
    return Episode(obs, np.zeros((n_states - 1, 1), np.float32), np.full(n_states - 1, reward, np.float32))


def test_jumpy_slice_indexing():
    levels = build_levels(129, [32, 8, 1])
    crit = PropertyCritic("reward", PointMaze2D())
    out = make_training_slices(integer_episode(), levels, crit, starts=[0])
    assert out[0][0][0, :, 0].tolist() == [0, 32, 64, 96, 128]
    assert out[1][0][0, :, 0].tolist() == [0, 8, 16, 24, 32]
    assert out[2][0][0, :, 0].tolist() == list(range(9))


def test_reward_label_sums_window():
    levels = build_levels(9, [1])
    crit = PropertyCritic("reward", PointMaze2D())
    _, labels = make_training_slices(integer_episode(40, 1.0), levels, crit, starts=[0, 5])[0]
    assert labels.tolist() == [9.0, 9.0]


def test_short_episode_padded_with_last_state():
    levels = build_levels(9, [1])
    crit = PropertyCritic("reward", PointMaze2D())
    ep = integer_episode(4, 1.0)  # 3 transitions
    seq, labels = make_training_slices(ep, levels, crit, starts=[1])[0]
    assert seq[0, :, 0].tolist() == [1, 2, 3, 3, 3, 3, 3, 3, 3]
    assert labels.tolist() == [2.0]


def test_constant_episode_constant_slices():
    ep = Episode(np.full((50, 2), 0.3, np.float32), np.zeros((49, 2), np.float32), np.zeros(49, np.float32))
    for seq, _ in make_training_slices(ep, build_levels(129, [32, 8, 1]), PropertyCritic("reward", PointMaze2D())):
        assert np.all(seq == np.float32(0.3))


def test_empty_episode_rejected():
    ep = Episode(np.zeros((1, 1), np.float32), np.zeros((0, 1), np.float32), np.zeros(0, np.float32))
    with pytest.raises(DataError):
        make_training_slices(ep, build_levels(9, [1]), PropertyCritic("reward", PointMaze2D()))


def test_slice_bank_normalizes_per_level():
    ds = generate_dataset("maze", None, 12, 0)
    bank = SliceBank.build(ds, build_levels(129, [32, 8, 1]), PropertyCritic("reward", PointMaze2D()))
    assert len(bank) == ds.n_transitions
    for l, c in enumerate(bank.conditions):
        assert c.min() == pytest.approx(-1.0) and c.max() == pytest.approx(1.0)
        assert bank.tokens[l].shape == (len(bank), bank.levels[l].n_tokens, 2)
    assert bank.token_bound() > 1.0


# --------------------------------------------------------------- normalizer


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=30))
def test_normalizer_monotone_and_invertible(values):
    v = np.asarray(values)
    norm = ConditionNormalizer.fit([v])
    z = norm.normalize(0, v)
    assert np.all((z >= -1 - 1e-5) & (z <= 1 + 1e-5))
    order = np.argsort(v, kind="stable")
    assert np.all(np.diff(z[order].astype(np.float64)) >= 0)
    span = max(v.max() - v.min(), 1.0)
    assert np.allclose(norm.denormalize(0, z), v, atol=1e-5 * span)


# ------------------------------------------------------------------- coding


def test_plan_coder_round_trip_and_scale():
    rng = np.random.default_rng(0)
    start = rng.normal(size=(500, 1, 2))
    tokens = (start + np.cumsum(rng.normal(scale=[0.1, 0.02], size=(500, 5, 2)), axis=1)).astype(np.float32)
    tokens[:, 0] = start[:, 0]
    coder = PlanCoder.fit([tokens])
    z = coder.encode(0, tokens)
    assert np.array_equal(z[:, 0], tokens[:, 0])
    # the coded displacements have unit spread per dim
    assert np.allclose(z[:, 1:].reshape(-1, 2).std(axis=0), 1.0, atol=1e-3)
    assert np.allclose(coder.decode(0, z), tokens, atol=1e-5)


def test_plan_coder_constant_dim_keeps_unit_scale():
    tokens = np.zeros((10, 3, 2), np.float32)
    tokens[:, 1:, 0] = np.arange(10)[:, None]
    assert PlanCoder.fit([tokens]).scale[0][1] == 1.0


def test_coded_planner_keeps_pins_exact():
    planner = tiny_planner(n_candidates=3)
    planner.coder = PlanCoder([[0.37, 0.21], [0.11, 0.05], [0.013, 0.007]])
    for i in range(50):
        obs = np.random.default_rng(i).uniform(0, 1, 2).astype(np.float32)
        plan = planner.plan(obs, Rng(3, i))
        o = normalize_obs(STATS, obs[None])[0]
        for l, cand in enumerate(plan.candidates):
            assert np.array_equal(cand[:, 0], np.broadcast_to(o, cand[:, 0].shape))
            if l:
                assert np.array_equal(cand[:, -1], np.broadcast_to(plan.chosen(l - 1)[1], cand[:, -1].shape))


def test_coder_changes_what_the_generator_sees():
    plain = tiny_planner(n_candidates=2).plan(np.array([0.45, 0.2], np.float32), Rng(2))
    coded_planner = tiny_planner(n_candidates=2)
    coded_planner.coder = PlanCoder([[0.1, 0.1]] * 3)
    coded = coded_planner.plan(np.array([0.45, 0.2], np.float32), Rng(2))
    # with small scales the coded plans stay near the observation
    spread = lambda p: np.abs(p.candidates[0][:, 1:] - p.candidates[0][:, :1]).mean()  # noqa: E731
    assert spread(coded) < spread(plain)


# ---------------------------------------------------------------- selection


def test_select_examples():
    assert select_candidate([1, 3, 2]) == 1
    assert select_candidate([1, 3, 2], "nearest", 1.9) == 2
    assert select_candidate([4, 4, 4]) == 0
    assert select_candidate([1, 3, 3, 0], "nearest", 3.0) == 1


def test_select_errors():
    with pytest.raises(PlanningError, match="index 1"):
        select_candidate([0.0, np.nan])
    with pytest.raises(PlanningError):
        select_candidate([])
    with pytest.raises(ConfigurationError):
        select_candidate([1.0], "softmax")


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=1, max_size=40), st.floats(0.01, 10), st.floats(-10, 10))
def test_selection_invariant_under_increasing_maps(scores, a, b):
    s = np.asarray(scores)
    pick = select_candidate(s)
    assert select_candidate(a * s + b) == pick
    assert select_candidate(np.tanh(s / 25.0)) == pick
    assert select_candidate(np.exp(s / 5.0)) == pick


# ----------------------------------------------------------------- planning


def test_plan_shapes_and_action():
    planner = tiny_planner()
    plan = planner.plan(np.array([0.45, 0.2], np.float32), Rng(1))
    assert [c.shape for c in plan.candidates] == [(6, 5, 2), (6, 5, 2), (6, 9, 2)]
    assert plan.action.shape == (2,) and np.all(np.abs(plan.action) <= 1)


def test_chaining_and_anchoring_bit_exact_on_1000_plans():
    planner = tiny_planner(n_candidates=2)
    obs_rng = np.random.default_rng(0)
    for i in range(1000):
        obs = obs_rng.uniform(0, 1, 2).astype(np.float32)
        plan = planner.plan(obs, Rng(7, i))
        o = normalize_obs(STATS, obs[None])[0]
        for l, cand in enumerate(plan.candidates):
            assert np.array_equal(cand[:, 0], np.broadcast_to(o, cand[:, 0].shape))
            if l:
                anchor = plan.chosen(l - 1)[1]
                assert np.array_equal(cand[:, -1], np.broadcast_to(anchor, cand[:, -1].shape))


def test_single_level_planner_equals_direct_sample():
    planner = tiny_planner(horizon=9, jumps=(1,))
    obs = np.array([0.3, 0.3], np.float32)
    plan = planner.plan(obs, Rng(4))
    o = normalize_obs(STATS, obs[None])
    direct = sample(planner.backbones[0], 6, 1.0, planner.samplers[0], Inpaint((0,), o), Rng(4).child(0))
    assert np.array_equal(plan.candidates[0], direct)


def test_index_critic_picks_last_candidate():
    plan = tiny_planner(critic=IndexCritic()).plan(np.array([0.5, 0.2], np.float32), Rng(0))
    assert plan.selected == [5, 5, 5]


def test_select_only_at_level_zero_flag():
    plan = tiny_planner(critic=IndexCritic(), select_every_level=False).plan(np.array([0.5, 0.2]), Rng(0))
    assert plan.selected == [5, 0, 0]


def test_nonfinite_scores_raise():
    class Bad:
        def score(self, raw, jump):
            return np.full(raw.shape[0], np.inf)

    with pytest.raises(PlanningError, match="level 0"):
        tiny_planner(critic=Bad()).plan(np.array([0.5, 0.2]), Rng(0))


def test_replanning_determinism():
    obs_stream = np.random.default_rng(3).uniform(0, 1, (20, 2)).astype(np.float32)

    def actions():
        planner = tiny_planner(seed=2)
        return np.stack([planner.act(o, Rng(11, t)) for t, o in enumerate(obs_stream)])

    assert np.array_equal(actions(), actions())


def test_planner_geometry_checked():
    p = tiny_planner()
    with pytest.raises(ConfigurationError):
        Planner(p.levels, p.backbones[:2], p.critic, STATS, p.samplers)
    with pytest.raises(ConfigurationError):
        Planner(p.levels, list(reversed(p.backbones)), p.critic, STATS, p.samplers)


def test_plan_json_export():
    planner = tiny_planner(kind="rf")
    plan = planner.plan(np.array([0.45, 0.2], np.float32), Rng(1))
    doc = json.loads(plan.to_json(STATS))
    assert doc["observation"] == pytest.approx([0.45, 0.2])
    assert [lv["n_tokens"] for lv in doc["levels"]] == [5, 5, 9]
    first = np.asarray(doc["levels"][0]["candidates"])[:, 0]
    assert np.allclose(first, [0.45, 0.2], atol=1e-6)
    assert len(doc["levels"][2]["scores"]) == 6 and len(doc["action"]) == 2
