"""Deterministic toy control tasks, an exact-simulator return oracle, and perturbed model ensembles.

Simulator functions are pure and vectorised over leading dimensions, so the
same code serves single environment steps and batched oracle rollouts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from etdmpc._io import atomic_write_csv
from etdmpc.worldmodel import LatentModel, PolicyDistribution

EPISODE_LENGTH = 500


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int
    action_dim: int
    state_dim: int
    step: Callable[[np.ndarray, np.ndarray], np.ndarray]
    reward: Callable[[np.ndarray, np.ndarray], np.ndarray]
    observe: Callable[[np.ndarray], np.ndarray]
    state_from_obs: Callable[[np.ndarray], np.ndarray]
    reset: Callable[[np.random.Generator], np.ndarray]
    episode_length: int = EPISODE_LENGTH


# ---------------------------------------------------------------------------
# Pendulum swing-up
# ---------------------------------------------------------------------------

PENDULUM = dict(g=10.0, m=1.0, l=1.0, max_torque=2.0, max_speed=8.0, dt=0.05)


def wrap_angle(x):
    return (np.asarray(x) + np.pi) % (2 * np.pi) - np.pi


def _pendulum_step(s, a):
    s = np.asarray(s, dtype=np.float64)
    a = np.clip(np.asarray(a, dtype=np.float64), -1.0, 1.0)[..., 0]
    g, m, l, dt = PENDULUM["g"], PENDULUM["m"], PENDULUM["l"], PENDULUM["dt"]
    th, thdot = s[..., 0], s[..., 1]
    # theta = 0 is upright; gravity pushes away from it
    acc = 3 * g / (2 * l) * np.sin(th) + 3.0 / (m * l * l) * PENDULUM["max_torque"] * a
    thdot = np.clip(thdot + acc * dt, -PENDULUM["max_speed"], PENDULUM["max_speed"])
    th = wrap_angle(th + thdot * dt)
    return np.stack([th, thdot], axis=-1)


def _pendulum_reward(s, a):
    return 1.0 - np.abs(wrap_angle(np.asarray(s)[..., 0])) / np.pi


def _pendulum_obs(s):
    s = np.asarray(s, dtype=np.float64)
    return np.stack([np.cos(s[..., 0]), np.sin(s[..., 0]), s[..., 1]], axis=-1)


def _pendulum_state(obs):
    obs = np.asarray(obs, dtype=np.float64)
    return np.stack([np.arctan2(obs[..., 1], obs[..., 0]), obs[..., 2]], axis=-1)


def _pendulum_reset(rng):
    return np.array([rng.uniform(-np.pi, np.pi), rng.uniform(-1.0, 1.0)])


def pendulum_spec(episode_length: int = EPISODE_LENGTH) -> EnvSpec:
    return EnvSpec("pendulum", 3, 1, 2, _pendulum_step, _pendulum_reward, _pendulum_obs,
                   _pendulum_state, _pendulum_reset, episode_length)


# ---------------------------------------------------------------------------
# Point mass
# ---------------------------------------------------------------------------

POINTMASS = dict(gain=2.0, damping=0.5, dt=0.05, bound=1.0, goal=(0.0, 0.0))


def _pointmass_step(s, a):
    s = np.asarray(s, dtype=np.float64)
    a = np.clip(np.asarray(a, dtype=np.float64), -1.0, 1.0)
    pos, vel = s[..., :2], s[..., 2:]
    vel = vel + (POINTMASS["gain"] * a - POINTMASS["damping"] * vel) * POINTMASS["dt"]
    pos = np.clip(pos + vel * POINTMASS["dt"], -POINTMASS["bound"], POINTMASS["bound"])
    return np.concatenate([pos, vel], axis=-1)


def _pointmass_reward(s, a):
    d = np.asarray(s)[..., :2] - np.asarray(POINTMASS["goal"])
    return np.exp(-(d * d).sum(axis=-1))


def _pointmass_reset(rng):
    return np.concatenate([rng.uniform(-1.0, 1.0, size=2), np.zeros(2)])


def pointmass_spec(episode_length: int = EPISODE_LENGTH) -> EnvSpec:
    ident = lambda x: np.asarray(x, dtype=np.float64).copy()  # noqa: E731
    return EnvSpec("pointmass", 4, 2, 4, _pointmass_step, _pointmass_reward, ident, ident,
                   _pointmass_reset, episode_length)


SPECS = {"pendulum": pendulum_spec, "pointmass": pointmass_spec}


def make_spec(name: str, episode_length: int = EPISODE_LENGTH) -> EnvSpec:
    try:
        return SPECS[name](episode_length)
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(SPECS)}") from None


class Env:
    """Stateful wrapper running fixed-length episodes of an :class:`EnvSpec`."""

    def __init__(self, spec: EnvSpec, seed: int = 0):
        self.spec = spec
        self.rng = np.random.default_rng(seed)
        self.state: np.ndarray | None = None
        self.t = 0

    def reset(self, state: np.ndarray | None = None) -> np.ndarray:
        self.state = self.spec.reset(self.rng) if state is None else np.asarray(state, dtype=np.float64).copy()
        self.t = 0
        return self.spec.observe(self.state)

    def step(self, action):
        if self.state is None:
            raise RuntimeError("call reset() first")
        if self.t >= self.spec.episode_length:
            raise RuntimeError("episode finished; call reset()")
        action = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        r = float(self.spec.reward(self.state, action))
        self.state = self.spec.step(self.state, action)
        self.t += 1
        done = self.t >= self.spec.episode_length
        return self.spec.observe(self.state), r, done, {"state": self.state.copy()}


def oracle_return(spec: EnvSpec, state, actions, value_fn: Callable[[np.ndarray], np.ndarray],
                  gamma: float) -> np.ndarray:
    """Exact-simulator rollout of ``actions`` (``(..., h, A)``) bootstrapped with ``value_fn``."""
    actions = np.asarray(actions, dtype=np.float64)
    s = np.broadcast_to(np.asarray(state, dtype=np.float64), actions.shape[:-2] + (spec.state_dim,))
    total = np.zeros(actions.shape[:-2])
    h = actions.shape[-2]
    for u in range(h):
        a = actions[..., u, :]
        total = total + gamma ** u * spec.reward(s, a)
        s = spec.step(s, a)
    return total + gamma ** h * value_fn(s)


def dump_trajectory(path: str | Path, states, actions, rewards) -> None:
    states, actions = np.asarray(states), np.asarray(actions)
    header = ["step"] + [f"s{k}" for k in range(states.shape[1])] + [f"a{k}" for k in range(actions.shape[1])] + ["reward"]
    rows = ([t, *map(float, states[t]), *map(float, actions[t]), float(rewards[t])] for t in range(len(rewards)))
    atomic_write_csv(path, header, rows)


# ---------------------------------------------------------------------------
# Perturbed model ensembles
# ---------------------------------------------------------------------------


def pendulum_value(gamma: float, scale: float = 1.0) -> Callable[[np.ndarray], np.ndarray]:
    """A crude value heuristic for pendulum states: discounted sum of the current reward."""
    def value(s):
        return scale * _pendulum_reward(s, None) / (1.0 - gamma)
    return value


def zero_value(s):
    return np.zeros(np.shape(s)[:-1])


@dataclass
class PerturbedModelEnsemble(LatentModel):
    """Exact simulator plus a fixed, smooth, per-head bias field on next state and reward.

    Latents are ``[state, one-hot head tag]``; the tag lets the reward of a
    rolled-out latent carry the reward bias of the head that produced it,
    while the start latent (tag zero) always receives the exact reward.
    """

    spec: EnvSpec
    num_dynamics: int = 4
    state_scale: float = 0.0
    reward_scale: float = 0.0
    seed: int = 0
    value_fns: Sequence[Callable[[np.ndarray], np.ndarray]] = (zero_value,)
    policy_fn: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]] | None = None
    corrupted: Sequence[int] | None = None
    num_features: int = 8
    _fields: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.state_scale < 0 or self.reward_scale < 0:
            raise ValueError("perturbation scales must be >= 0")
        self.action_dim = self.spec.action_dim
        self.num_values = len(self.value_fns)
        rng = np.random.default_rng(self.seed)
        sd, ad, M, N = self.spec.state_dim, self.spec.action_dim, self.num_features, self.num_dynamics
        W = rng.normal(size=(sd + ad, M))
        phase = rng.uniform(0, 2 * np.pi, size=M)
        amp = rng.normal(size=(N, M, sd))
        ramp = rng.normal(size=(N, M))
        if self.corrupted is None:
            # biases sum to zero across heads at every (state, action)
            amp = amp - amp.mean(axis=0, keepdims=True)
            ramp = ramp - ramp.mean(axis=0, keepdims=True)
        else:
            mask = np.zeros(N)
            mask[list(self.corrupted)] = 1.0
            amp = amp * mask[:, None, None]
            ramp = ramp * mask[:, None]
        self._fields = dict(W=W, phase=phase, amp=amp / np.sqrt(M), ramp=ramp / np.sqrt(M))

    @property
    def latent_dim(self) -> int:
        return self.spec.state_dim + self.num_dynamics

    def _features(self, s, a):
        x = np.concatenate([s, np.broadcast_to(a, s.shape[:-1] + a.shape[-1:])], axis=-1)
        return np.sin(x @ self._fields["W"] + self._fields["phase"])

    def state_bias(self, s, a, head: int) -> np.ndarray:
        return self.state_scale * (self._features(s, a) @ self._fields["amp"][head])

    def reward_bias(self, s, a, head: int) -> np.ndarray:
        return self.reward_scale * (self._features(s, a) @ self._fields["ramp"][head])

    def latent_from_state(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        return np.concatenate([s, np.zeros(s.shape[:-1] + (self.num_dynamics,))], axis=-1)

    def encode(self, obs):
        return self.latent_from_state(self.spec.state_from_obs(obs))

    def _split(self, z):
        z = np.asarray(z, dtype=np.float64)
        return z[..., :self.spec.state_dim], z[..., self.spec.state_dim:]

    def dynamics_step(self, z, a, head):
        self._check_dynamics_head(head)
        s, _ = self._split(z)
        a = np.asarray(a, dtype=np.float64)
        nxt = self.spec.step(s, a)
        if self.state_scale != 0:
            nxt = nxt + self.state_bias(s, a, head)
        tag = np.zeros(nxt.shape[:-1] + (self.num_dynamics,))
        tag[..., head] = 1.0
        return np.concatenate([nxt, tag], axis=-1)

    def predict_reward(self, z, a):
        s, tag = self._split(z)
        a = np.asarray(a, dtype=np.float64)
        r = self.spec.reward(s, a)
        if self.reward_scale != 0:
            for i in range(self.num_dynamics):
                if np.any(tag[..., i]):
                    r = r + tag[..., i] * self.reward_bias(s, a, i)
        return r

    def predict_value(self, z, head, use_target=False):
        self._check_value_head(head)
        s, _ = self._split(z)
        return np.asarray(self.value_fns[head](s), dtype=np.float64)

    def policy_prior(self, z):
        s, _ = self._split(z)
        if self.policy_fn is None:
            mean_action = np.zeros(s.shape[:-1] + (self.action_dim,))
            log_std = np.full_like(mean_action, -1.0)
        else:
            mean_action, log_std = self.policy_fn(s)
        return PolicyDistribution(np.arctanh(np.clip(mean_action, -0.999999, 0.999999)), np.asarray(log_std, dtype=np.float64))


def make_perturbed_ensemble(spec: EnvSpec, scales=(0.0, 0.0), num_heads: int = 4, seed: int = 0,
                            value_fns=(zero_value,), policy_fn=None, corrupted=None) -> PerturbedModelEnsemble:
    """``scales`` is ``(state_bias_scale, reward_bias_scale)`` or a single state scale."""
    if np.isscalar(scales):
        scales = (float(scales), 0.0)
    return PerturbedModelEnsemble(spec, num_heads, float(scales[0]), float(scales[1]), seed,
                                  tuple(value_fns), policy_fn, corrupted)
