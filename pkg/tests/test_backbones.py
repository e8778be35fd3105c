import numpy as np
import pytest

from prplan.backbones import (
    CoupledPairs,
    TrainBatchSpec,
    diffusion_train_step,
    make_backbone,
    predict,
    reflow_generate,
    reflow_train_step,
    rf_train_step,
    sample,
)
from prplan.constants import DTYPE, NULL_CONDITION
from prplan.errors import ConfigurationError, ContractViolation, TrainingError
from prplan.network import denoiser_apply
from prplan.numerics import Rng
from prplan.schedules import Inpaint, SamplerConfig, ddim_step, diffusion_grid, euler_flow_step, flow_grid
from prplan.toys import TwoGaussians, moments, train_toy


def frozen(kind, n_tokens=3, dim=2, seed=0, **kw):
    """A backbone whose optimizer does nothing, so repeated steps see the same net."""
    return make_backbone(kind, n_tokens, dim, Rng(seed), width=16, lr=0.0, weight_decay=0.0,
                         diffusion_steps=100, **kw)


def randomized(kind, seed=0, **kw):
    """Non-zero head so predictions depend on the condition."""
    bb = make_backbone(kind, 4, 2, Rng(seed), width=16, diffusion_steps=100, **kw)
    head = bb.net.head
    head.weights[0][...] = 0.3 * Rng(seed, 1).randn(*head.weights[0].shape)
    return bb


# ------------------------------------------------------------------ training


def test_untrained_diffusion_loss_is_noise_energy():
    bb = frozen("diffusion")
    spec = TrainBatchSpec(64, 0.75)
    x0 = Rng(1).randn(64, 3, 2)
    losses = [diffusion_train_step(bb, x0, np.zeros(64, DTYPE), Rng(2, i), spec) for i in range(100)]
    assert np.mean(losses) == pytest.approx(6.0, rel=0.2)


def test_inpainted_slots_leave_the_loss():
    bb = frozen("diffusion", inpaint_slots=(0, 2))
    spec = TrainBatchSpec(64, 0.75)
    losses = [diffusion_train_step(bb, Rng(1).randn(64, 3, 2), np.zeros(64, DTYPE), Rng(2, i), spec)
              for i in range(100)]
    assert np.mean(losses) == pytest.approx(2.0, rel=0.2)


@pytest.mark.parametrize("p, expect", [(1.0, (64 * 5, 0)), (0.0, (0, 64 * 5))])
def test_keep_probability_extremes(p, expect):
    bb = frozen("diffusion")
    for i in range(5):
        diffusion_train_step(bb, Rng(1).randn(64, 3, 2), np.zeros(64, DTYPE), Rng(2, i), TrainBatchSpec(64, p))
    assert (bb.counters["conditional"], bb.counters["unconditional"]) == expect


def test_keep_probability_rate():
    bb = frozen("rf")
    for i in range(20):
        rf_train_step(bb, Rng(1).randn(256, 3, 2), np.zeros(256, DTYPE), Rng(2, i), TrainBatchSpec(256, 0.75))
    frac = bb.counters["conditional"] / (bb.counters["conditional"] + bb.counters["unconditional"])
    assert frac == pytest.approx(0.75, abs=0.02)


def test_keep_probability_validated():
    with pytest.raises(ConfigurationError):
        TrainBatchSpec(8, 1.5)


def test_diffusion_loss_decreases_on_two_gaussians():
    data = TwoGaussians().sample(2048, Rng(0))
    losses = []
    train_toy("diffusion", data, 1500, Rng(1), losses=losses)
    assert np.mean(losses[-100:]) < 0.8 * np.mean(losses[:100])


def test_rf_degenerate_coupling_has_zero_loss():
    bb = frozen("rf")
    x = Rng(1).randn(32, 3, 2)
    assert rf_train_step(bb, x, np.zeros(32, DTYPE), Rng(2), TrainBatchSpec(32), x0=x) == 0.0


def test_untrained_rf_loss_matches_moment():
    toy = TwoGaussians()
    bb = make_backbone("rf", 1, 2, Rng(0), width=16, lr=0.0, weight_decay=0.0)
    data = toy.sample(4096, Rng(1))
    losses = [rf_train_step(bb, data[i * 256:(i + 1) * 256], np.zeros(256, DTYPE), Rng(2, i), TrainBatchSpec(256))
              for i in range(16)]
    # E||x1 - x0||^2 = tr cov(x1) + |mean(x1)|^2 + dim
    expected = np.trace(toy.cov) + 2.0
    assert np.mean(losses) == pytest.approx(expected, rel=0.05)


def test_rf_point_mass_target():
    mu = np.array([0.7, -0.4])
    data = np.broadcast_to(mu, (512, 1, 2)).astype(DTYPE).copy()
    bb = train_toy("rf", data, 1500, Rng(3))
    out = sample(bb, 500, NULL_CONDITION, SamplerConfig("flow", 20, 0.0), rng=Rng(4))
    assert np.allclose(out.reshape(-1, 2).mean(axis=0), mu, atol=0.05)


def test_nonfinite_loss_reports_batch():
    bb = frozen("diffusion")
    x = np.full((4, 3, 2), np.nan, dtype=DTYPE)
    with pytest.raises(TrainingError, match="batch 4"):
        diffusion_train_step(bb, x, np.zeros(4, DTYPE), Rng(0), TrainBatchSpec(4))


def test_batch_geometry_checked():
    bb = frozen("rf")
    with pytest.raises(ContractViolation):
        rf_train_step(bb, np.zeros((4, 2, 2), DTYPE), np.zeros(4, DTYPE), Rng(0), TrainBatchSpec(4))
    with pytest.raises(ContractViolation):
        rf_train_step(bb, np.zeros((4, 3, 2), DTYPE), np.zeros(3, DTYPE), Rng(0), TrainBatchSpec(4))


# ------------------------------------------------------------------ sampling


def manual_sample(bb, noise, cond, steps):
    """Solver loop written out against the raw predictor, no guidance code path."""
    x = noise.astype(DTYPE)
    c = np.full(len(x), cond, dtype=DTYPE)
    if bb.kind == "diffusion":
        grid = diffusion_grid(bb.schedule, steps)
        for s, s_next in zip(grid[:-1], grid[1:]):
            eps = denoiser_apply(bb.net, x, np.full(len(x), s / bb.schedule.steps), c)
            x = ddim_step(bb.schedule, x, eps, int(s), int(s_next))
    else:
        grid = flow_grid(steps)
        for s, s_next in zip(grid[:-1], grid[1:]):
            x = euler_flow_step(x, denoiser_apply(bb.net, x, np.full(len(x), s), c), float(s), float(s_next))
    return x


@pytest.mark.parametrize("kind", ["diffusion", "rf"])
def test_cfg_degenerate_weights_bit_equal(kind):
    bb = randomized(kind)
    solver = "diffusion" if kind == "diffusion" else "flow"
    noise = Rng(9).randn(8, 4, 2)
    cond = 0.4
    w1 = sample(bb, 8, cond, SamplerConfig(solver, 4, 1.0), noise=noise)
    w0 = sample(bb, 8, cond, SamplerConfig(solver, 4, 0.0), noise=noise)
    null = sample(bb, 8, NULL_CONDITION, SamplerConfig(solver, 4, 1.0), noise=noise)
    assert np.array_equal(w1, manual_sample(bb, noise, cond, 4))
    assert np.array_equal(w0, manual_sample(bb, noise, NULL_CONDITION, 4))
    assert np.array_equal(null, w0)
    w2 = sample(bb, 8, cond, SamplerConfig(solver, 4, 2.0), noise=noise)
    assert not np.allclose(w2, w1) and not np.allclose(w2, w0)


def test_guidance_is_extrapolation_of_predictions():
    bb = randomized("rf")
    x = Rng(1).randn(5, 4, 2).astype(DTYPE)
    c, u = predict(bb, x, 0.3, 0.5, 1.0), predict(bb, x, 0.3, 0.5, 0.0)
    assert np.allclose(predict(bb, x, 0.3, 0.5, 3.0), u + 3.0 * (c - u), atol=1e-5)


@pytest.mark.parametrize("kind", ["diffusion", "rf"])
def test_sample_inpaint_bit_equal(kind):
    bb = randomized(kind, inpaint_slots=(0, 3))
    values = Rng(3).randn(2, 2).astype(DTYPE)
    solver = "diffusion" if kind == "diffusion" else "flow"
    out = sample(bb, 16, 0.2, SamplerConfig(solver, 5, 1.5), Inpaint((0, 3), values), rng=Rng(4))
    assert np.array_equal(out[:, 0], np.broadcast_to(values[0], (16, 2)))
    assert np.array_equal(out[:, 3], np.broadcast_to(values[1], (16, 2)))


def test_single_candidate_deterministic():
    bb = randomized("diffusion")
    a = sample(bb, 1, 0.1, SamplerConfig("diffusion", 3, 1.2), rng=Rng(5))
    b = sample(bb, 1, 0.1, SamplerConfig("diffusion", 3, 1.2), rng=Rng(5))
    assert np.array_equal(a, b)


def test_sampler_must_match_backbone():
    with pytest.raises(ConfigurationError):
        sample(randomized("rf"), 2, 0.0, SamplerConfig("diffusion", 3), rng=Rng(0))
    with pytest.raises(ContractViolation):
        sample(randomized("rf"), 0, 0.0, SamplerConfig("flow", 3), rng=Rng(0))


# ------------------------------------------------------------------- reflow


def test_reflow_pairs_count_and_consistency():
    bb = randomized("rf")
    pairs = reflow_generate(bb, 37, 6, Rng(2), chunk=10)
    assert len(pairs) == 37 and pairs.x0.shape == pairs.x1.shape == (37, 4, 2)
    again = sample(bb, 37, NULL_CONDITION, SamplerConfig("flow", 6, 1.0), noise=pairs.x0)
    assert np.allclose(pairs.x1, again, atol=1e-6)


def test_reflow_rejects_diffusion():
    with pytest.raises(ConfigurationError):
        reflow_generate(randomized("diffusion"), 4, 2, Rng(0))


def test_reflow_loss_zero_on_straight_field():
    bb = frozen("rf")
    x = Rng(0).randn(16, 3, 2).astype(DTYPE)
    pairs = CoupledPairs(x, x.copy(), np.zeros(16, DTYPE))
    assert reflow_train_step(bb, pairs, np.arange(16), Rng(1), TrainBatchSpec(16)) == 0.0


def test_straight_field_one_step_equals_many():
    """A flow trained toward a point mass is straight: one Euler step already lands."""
    mu = np.array([0.5, 0.5])
    data = np.broadcast_to(mu, (512, 1, 2)).astype(DTYPE).copy()
    bb = train_toy("rf", data, 1500, Rng(3))
    noise = Rng(4).randn(200, 1, 2)
    one = sample(bb, 200, NULL_CONDITION, SamplerConfig("flow", 1, 0.0), noise=noise)
    many = sample(bb, 200, NULL_CONDITION, SamplerConfig("flow", 20, 0.0), noise=noise)
    assert np.abs(one - many).mean() < 0.05


def test_toy_moments_helper():
    toy = TwoGaussians()
    mean, cov = moments(toy.sample(20000, Rng(0)))
    assert np.allclose(mean, toy.mean, atol=0.05)
    assert np.allclose(cov, toy.cov, atol=0.05)
