"""Trajectory properties, the expectile value learner, and inverse dynamics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .constants import DTYPE
from .data import Dataset, ObsStats, normalize_obs
from .errors import ConfigurationError, TrainingError
from .numerics import AdamWState, MlpParams, Rng, adamw_step, init_mlp, mlp_apply, mlp_backward, mlp_forward


def eval_reward_property(rewards) -> float:
    """Cumulative reward of a trajectory segment."""
    return float(np.sum(np.asarray(rewards, dtype=np.float64)))


def eval_value_property(rewards, terminal_obs, gamma: float, value_fn) -> float:
    """Discounted rewards over the first H-1 steps plus the discounted value of the last state.

    ``rewards`` holds the H-1 per-step rewards; ``terminal_obs`` is state H-1.
    """
    r = np.asarray(rewards, dtype=np.float64)
    h = r.shape[0] + 1
    disc = gamma ** np.arange(h - 1)
    v = float(np.asarray(value_fn(np.asarray(terminal_obs)[None]), dtype=np.float64).reshape(-1)[0])
    return float(np.dot(disc, r) + gamma ** (h - 1) * v)


# ------------------------------------------------------------------- value


@dataclass
class ValueCritic:
    """V(o) fit to Monte-Carlo returns; inputs are raw observations."""

    net: MlpParams
    stats: ObsStats
    gamma: float = 0.99
    scale: float = 1.0
    history: list = field(default_factory=list)

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs)
        flat = normalize_obs(self.stats, obs.reshape(-1, obs.shape[-1]))
        v = mlp_apply(self.net, flat)[:, 0] * self.scale
        return v.reshape(obs.shape[:-1])


def returns_to_go(rewards: np.ndarray, gamma: float) -> np.ndarray:
    out = np.zeros(len(rewards) + 1, dtype=np.float64)
    for t in range(len(rewards) - 1, -1, -1):
        out[t] = rewards[t] + gamma * out[t + 1]
    return out[:-1]


def expectile_loss(u: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    """Mean of ``|tau - 1{u<0}| * u^2`` and its gradient w.r.t. ``u``."""
    weight = np.where(u < 0, 1.0 - tau, tau)
    return float(np.mean(weight * u * u)), 2.0 * weight * u / u.size


def train_value(dataset: Dataset, gamma: float = 0.99, tau: float = 0.9, steps: int = 20000,
                batch_size: int = 256, rng: Rng | None = None, width: int = 256, lr: float = 2e-4,
                log_every: int = 100) -> ValueCritic:
    if not 0.0 < gamma <= 1.0 or not 0.0 < tau < 1.0:
        raise ConfigurationError("need gamma in (0, 1] and expectile in (0, 1)")
    rng = rng or Rng(0)
    obs = np.concatenate([ep.obs[:-1] for ep in dataset.episodes])
    targets = np.concatenate([returns_to_go(ep.rewards, gamma) for ep in dataset.episodes])
    scale = float(max(np.abs(targets).max(), 1.0))
    x = normalize_obs(dataset.stats, obs)
    y = (targets / scale).astype(DTYPE)
    # zero head: V starts at 0 and stays there wherever the data never pull it away
    net = init_mlp([dataset.obs_dim, width, width, 1], ["mish", "mish", "identity"], rng.child(0), final_scale=0.0)
    opt = AdamWState(lr=lr)
    critic = ValueCritic(net, dataset.stats, gamma, scale)
    acc = 0.0
    for step in range(steps):
        idx = rng.integers(0, len(y), batch_size)
        pred, cache = mlp_forward(net, x[idx])
        loss, g = expectile_loss(y[idx] - pred[:, 0], tau)
        if not np.isfinite(loss):
            raise TrainingError(f"value loss diverged at step {step}")
        grads, _ = mlp_backward(net, cache, (-g).astype(DTYPE)[:, None])
        adamw_step(net, grads, opt)
        acc += loss
        if (step + 1) % log_every == 0:
            critic.history.append(acc / log_every)
            acc = 0.0
    return critic


# -------------------------------------------------------- inverse dynamics


@dataclass
class InverseDynamics:
    """a = h(o, o'), a 3-layer MLP over the standardized pair.

    The pair enters as ``(o, o' - o)`` with each half standardized, an invertible
    linear re-coding of the concatenation that spares the first layer from
    having to cancel absolute positions to recover a small displacement.
    """

    net: MlpParams
    stats: ObsStats
    delta_std: np.ndarray
    action_scale: float = 1.0
    history: list = field(default_factory=list)

    def features(self, o: np.ndarray, o_next: np.ndarray) -> np.ndarray:
        delta = (np.asarray(o_next, dtype=np.float64) - o) / self.delta_std
        return np.concatenate([normalize_obs(self.stats, o), delta.astype(DTYPE)], axis=-1)

    def __call__(self, o: np.ndarray, o_next: np.ndarray) -> np.ndarray:
        o = np.atleast_2d(o)
        o_next = np.atleast_2d(o_next)
        return mlp_apply(self.net, self.features(o, o_next)) * self.action_scale


def make_inverse_dynamics(obs_dim: int, act_dim: int, stats: ObsStats, rng: Rng, width: int = 256,
                          action_scale: float = 1.0, delta_std=None) -> InverseDynamics:
    net = init_mlp([2 * obs_dim, width, width, act_dim], ["mish_ln", "mish_ln", "tanh"], rng)
    if delta_std is None:
        delta_std = np.ones(obs_dim)
    return InverseDynamics(net, stats, np.maximum(np.asarray(delta_std, dtype=np.float64), 1e-6), action_scale)


def extract_action(model: InverseDynamics, o_t: np.ndarray, o_next: np.ndarray) -> np.ndarray:
    return model(o_t, o_next)[0]


def train_inverse_dynamics(dataset: Dataset, steps: int = 20000, batch_size: int = 256, rng: Rng | None = None,
                           width: int = 256, lr: float = 2e-4, holdout: float = 0.1, action_scale: float = 1.0,
                           log_every: int = 100, shuffle_labels: bool = False):
    """Regress actions from consecutive observation pairs.  Returns ``(model, heldout_mse)``."""
    rng = rng or Rng(0)
    o, a, o2 = dataset.transitions()
    if shuffle_labels:
        a = a[rng.child(99).permutation(len(a))]
    order = rng.child(1).permutation(len(a))
    n_test = int(round(holdout * len(a)))
    test, train = order[:n_test], order[n_test:]
    model = make_inverse_dynamics(dataset.obs_dim, dataset.act_dim, dataset.stats, rng.child(0), width,
                                  action_scale, delta_std=(o2 - o).astype(np.float64).std(axis=0))
    feats = model.features(o, o2)
    target = (a / action_scale).astype(DTYPE)
    opt = AdamWState(lr=lr)
    acc = 0.0
    for step in range(steps):
        idx = train[rng.integers(0, len(train), batch_size)]
        pred, cache = mlp_forward(model.net, feats[idx])
        resid = pred - target[idx]
        loss = float(np.mean(resid * resid))
        if not np.isfinite(loss):
            raise TrainingError(f"inverse-dynamics loss diverged at step {step}")
        grads, _ = mlp_backward(model.net, cache, (2.0 / resid.size) * resid)
        adamw_step(model.net, grads, opt)
        acc += loss
        if (step + 1) % log_every == 0:
            model.history.append(acc / log_every)
            acc = 0.0
    mse = float("nan")
    if n_test:
        pred = model(o[test], o2[test])
        mse = float(np.mean((pred - a[test]) ** 2))
    return model, mse


# ------------------------------------------------- batched property critic


CRITIC_KINDS = ("reward", "value")


@dataclass
class PropertyCritic:
    """Batched trajectory property used both for training labels and candidate scoring.

    ``reward``: sum of the H rewards collected from the H states of a window.
    ``value``: discounted sum of the first H-1 rewards plus the discounted value
    of the last state.
    """

    kind: str
    env: object
    gamma: float = 0.99
    value_fn: ValueCritic | None = None

    def __post_init__(self):
        if self.kind not in CRITIC_KINDS:
            raise ConfigurationError(f"unknown critic {self.kind!r}; choose from {CRITIC_KINDS}")
        if self.kind == "value" and self.value_fn is None:
            raise ConfigurationError("value critic needs a value function")

    def label(self, rewards: np.ndarray, last_obs: np.ndarray) -> np.ndarray:
        """Property of dense windows: ``rewards`` is (B, H), ``last_obs`` is (B, obs_dim)."""
        r = np.asarray(rewards, dtype=np.float64)
        if self.kind == "reward":
            return r.sum(axis=1)
        h = r.shape[1]
        disc = self.gamma ** np.arange(h - 1)
        return r[:, : h - 1] @ disc + self.gamma ** (h - 1) * self._value(last_obs)

    def score(self, key_points: np.ndarray, jump: int) -> np.ndarray:
        """Property of jumpy sequences (raw observations), shape (N, n, obs_dim) -> (N,).

        Interval rewards come from the environment's reward model; for discounting,
        each interval's total is spread evenly over its ``jump`` steps.
        """
        kp = np.asarray(key_points)
        inter = np.asarray(self.env.interval_rewards(kp, jump), dtype=np.float64)
        last = kp[:, -1, :]
        if self.kind == "reward":
            return inter.sum(axis=1) + np.asarray(self.env.hold_reward(last), dtype=np.float64)
        n = kp.shape[1]
        h = (n - 1) * jump + 1
        step_disc = (self.gamma ** np.arange(h - 1)).reshape(max(n - 1, 0), jump).sum(axis=1) / jump
        return inter @ step_disc + self.gamma ** (h - 1) * self._value(last)

    def _value(self, obs):
        return np.asarray(self.value_fn(np.asarray(obs)), dtype=np.float64).reshape(-1)
