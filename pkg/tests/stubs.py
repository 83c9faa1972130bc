"""Hand-built latent models with closed-form behaviour, used as test oracles."""

from __future__ import annotations

import numpy as np

from etdmpc.worldmodel import LatentModel, PolicyDistribution


class ConstantModel(LatentModel):
    """Identity dynamics, constant reward and value on every head."""

    def __init__(self, reward=1.0, value=10.0, num_dynamics=2, num_values=2, latent_dim=3, action_dim=1):
        self.reward, self.value = reward, value
        self.num_dynamics, self.num_values, self.action_dim = num_dynamics, num_values, action_dim
        self.latent_dim = latent_dim

    def encode(self, obs):
        return np.asarray(obs, dtype=np.float64)

    def dynamics_step(self, z, a, head):
        self._check_dynamics_head(head)
        z = np.asarray(z, dtype=np.float64)
        return np.broadcast_to(z, np.broadcast_shapes(z.shape[:-1], np.shape(a)[:-1]) + z.shape[-1:]).copy()

    def predict_reward(self, z, a):
        shape = np.broadcast_shapes(np.shape(z)[:-1], np.shape(a)[:-1])
        return np.full(shape, float(self.reward))

    def predict_value(self, z, head, use_target=False):
        self._check_value_head(head)
        return np.full(np.shape(z)[:-1], float(self.value))

    def policy_prior(self, z):
        shape = np.shape(z)[:-1] + (self.action_dim,)
        return PolicyDistribution(np.zeros(shape), np.full(shape, -1.0))


class QuadraticModel(LatentModel):
    """One head, reward ``-(a - target)^2`` on the first action component, zero value."""

    def __init__(self, target=0.3, action_dim=1, latent_dim=2):
        self.target = target
        self.num_dynamics = self.num_values = 1
        self.action_dim, self.latent_dim = action_dim, latent_dim

    def encode(self, obs):
        return np.asarray(obs, dtype=np.float64)

    def dynamics_step(self, z, a, head):
        z = np.asarray(z, dtype=np.float64)
        return np.broadcast_to(z, np.broadcast_shapes(z.shape[:-1], np.shape(a)[:-1]) + z.shape[-1:]).copy()

    def predict_reward(self, z, a):
        a = np.asarray(a, dtype=np.float64)
        r = -((a - self.target) ** 2).sum(axis=-1)
        return np.broadcast_to(r, np.broadcast_shapes(np.shape(z)[:-1], r.shape)).copy()

    def predict_value(self, z, head, use_target=False):
        return np.zeros(np.shape(z)[:-1])

    def policy_prior(self, z):
        shape = np.shape(z)[:-1] + (self.action_dim,)
        return PolicyDistribution(np.zeros(shape), np.zeros(shape))


class FlatModel(QuadraticModel):
    """Every action sequence scores the same."""

    def predict_reward(self, z, a):
        shape = np.broadcast_shapes(np.shape(z)[:-1], np.shape(a)[:-1])
        return np.zeros(shape)


class TwoRegionModel(LatentModel):
    """One-step construction for pessimism: the sign of the action picks a region.

    Positive actions lead to a state whose value heads average ``high`` but
    disagree (spread ``spread``); negative actions lead to a state every value
    head scores ``moderate``.  Rewards are zero.
    """

    def __init__(self, high=1.0, spread=1.5, moderate=0.6, num_values=4):
        self.high, self.spread, self.moderate = high, spread, moderate
        self.num_dynamics, self.num_values, self.action_dim = 1, num_values, 1
        offsets = np.linspace(-1.0, 1.0, num_values)
        self.offsets = offsets - offsets.mean()

    def encode(self, obs):
        return np.zeros(np.shape(obs)[:-1] + (1,))

    def dynamics_step(self, z, a, head):
        shape = np.broadcast_shapes(np.shape(z)[:-1], np.shape(a)[:-1])
        return np.broadcast_to((np.asarray(a)[..., :1] > 0).astype(np.float64), shape + (1,)).copy()

    def predict_reward(self, z, a):
        return np.zeros(np.broadcast_shapes(np.shape(z)[:-1], np.shape(a)[:-1]))

    def predict_value(self, z, head, use_target=False):
        pos = np.asarray(z)[..., 0] > 0.5
        return np.where(pos, self.high + self.spread * self.offsets[head], self.moderate)

    def policy_prior(self, z):
        shape = np.shape(z)[:-1] + (1,)
        return PolicyDistribution(np.zeros(shape), np.zeros(shape))
