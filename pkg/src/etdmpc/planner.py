"""MPPI over action sequences, scored by the return objectives in :mod:`etdmpc.returns`.

Planning is vectorised over a batch of start latents so that reanalyze can
refresh many replay states with one call.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from etdmpc import returns
from etdmpc.returns import AggregateHorizon, ObjectiveMode, Pessimistic
from etdmpc.worldmodel import LatentModel


class PlanningError(RuntimeError):
    pass


@dataclass
class PlannerConfig:
    horizon: int = 6
    iterations: int = 6
    num_samples: int = 512
    num_elites: int = 64
    num_policy_trajectories: int = 24
    temperature: float = 0.5
    sigma_min: float = 0.05
    sigma_max: float = 2.0
    objective: ObjectiveMode = field(default_factory=AggregateHorizon)
    gamma: float = 0.99
    warm_start: bool = True
    # dynamics head used to roll out policy-prior trajectories
    policy_head: int = 0

    def __post_init__(self):
        counts = (self.horizon, self.iterations, self.num_samples, self.num_elites)
        if min(counts) < 1 or self.num_policy_trajectories < 0:
            raise ValueError("planner counts must be >= 1 (policy trajectories >= 0)")
        if self.num_elites > self.num_samples + self.num_policy_trajectories:
            raise ValueError("num_elites exceeds the number of candidates")
        if not 0 < self.sigma_min <= self.sigma_max:
            raise ValueError("need 0 < sigma_min <= sigma_max")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    def effective_iterations(self, action_dim: int) -> int:
        return self.iterations + (2 if action_dim > 20 else 0)


def acting_config(**overrides) -> PlannerConfig:
    return replace(PlannerConfig(), **overrides)


def reanalyze_config(beta: float = 10.0, **overrides) -> PlannerConfig:
    base = PlannerConfig(horizon=3, num_samples=64, num_elites=8, num_policy_trajectories=3,
                         objective=Pessimistic(beta))
    return replace(base, **overrides)


@dataclass
class PlanDistribution:
    """Per-step diagonal Gaussian over an action sequence, shape ``(..., H, A)``."""

    mu: np.ndarray
    sigma: np.ndarray

    @property
    def horizon(self) -> int:
        return self.mu.shape[-2]

    def first(self) -> "GaussianAction":
        return GaussianAction(self.mu[..., 0, :].copy(), self.sigma[..., 0, :].copy())

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "sigma": self.sigma.tolist()}


@dataclass
class GaussianAction:
    """The expert policy: a Gaussian over the first action, samples clamped to [-1, 1]."""

    mean: np.ndarray
    std: np.ndarray

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return np.clip(self.mean + self.std * rng.standard_normal(self.mean.shape), -1.0, 1.0)


def expert_policy(plan: PlanDistribution) -> GaussianAction:
    return plan.first()


def shift_warm_start(prev: PlanDistribution, sigma_max: float = 2.0) -> PlanDistribution:
    """Drop the first step and append a zero-mean, max-std step."""
    mu = np.concatenate([prev.mu[..., 1:, :], np.zeros_like(prev.mu[..., :1, :])], axis=-2)
    sigma = np.concatenate([prev.sigma[..., 1:, :], np.full_like(prev.sigma[..., :1, :], sigma_max)], axis=-2)
    return PlanDistribution(mu, sigma)


@dataclass
class PlanResult:
    plan: PlanDistribution
    ok: np.ndarray  # (B,) False where every candidate score was non-finite
    trace: list[dict] | None = None


def _policy_trajectories(z, model: LatentModel, cfg: PlannerConfig, rng) -> np.ndarray:
    B, P, H = z.shape[0], cfg.num_policy_trajectories, cfg.horizon
    zp = np.broadcast_to(z[:, None, :], (B, P, z.shape[-1]))
    acts = np.empty((B, P, H, model.action_dim))
    for u in range(H):
        acts[:, :, u] = model.policy_prior(zp).sample(rng)
        if u < H - 1:
            zp = model.dynamics_step(zp, acts[:, :, u], cfg.policy_head)
    return acts


def plan_batch(z, model: LatentModel, cfg: PlannerConfig, rng: np.random.Generator,
               warm_start: PlanDistribution | None = None, trace: bool = False) -> PlanResult:
    """Run MPPI independently for each row of ``z`` (shape ``(B, D)``)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    B, H, A = z.shape[0], cfg.horizon, model.action_dim
    S, P, K = cfg.num_samples, cfg.num_policy_trajectories, cfg.num_elites
    if warm_start is not None:
        mu = np.broadcast_to(warm_start.mu, (B, H, A)).copy()
    else:
        mu = np.zeros((B, H, A))
    mu_init = mu.copy()
    sigma = np.full((B, H, A), cfg.sigma_max)
    ok = np.ones(B, dtype=bool)
    records = [] if trace else None

    pol = _policy_trajectories(z, model, cfg, rng) if P > 0 else np.empty((B, 0, H, A))
    zc = z[:, None, :]
    rows = np.arange(B)[:, None]
    for it in range(cfg.effective_iterations(A)):
        eps = rng.standard_normal((B, S, H, A))
        samples = np.clip(mu[:, None] + sigma[:, None] * eps, -1.0, 1.0)
        cands = np.concatenate([samples, pol], axis=1)
        scores = returns.evaluate(zc, cands, model, cfg.gamma, cfg.objective, check_finite=False)
        scores = np.where(np.isfinite(scores), scores, -np.inf)
        dead = ~np.isfinite(scores.max(axis=1))
        if dead.any():
            ok &= ~dead
            if not ok.any():
                raise PlanningError(f"all candidate scores are non-finite under objective {cfg.objective}")
            scores[dead] = 0.0
        order = np.argsort(-scores, axis=1, kind="stable")[:, :K]
        elite_scores = scores[rows, order]
        elites = cands[rows, order]  # (B, K, H, A)
        w = np.exp((elite_scores - elite_scores[:, :1]) / cfg.temperature)
        w /= w.sum(axis=1, keepdims=True)
        wx = w[:, :, None, None]
        new_mu = (wx * elites).sum(axis=1)
        new_sigma = np.sqrt((wx * (elites - new_mu[:, None]) ** 2).sum(axis=1))
        new_sigma = np.clip(new_sigma, cfg.sigma_min, cfg.sigma_max)
        # rows whose candidates all score the same carry no signal; keep their distribution
        flat = (scores.max(axis=1) == scores.min(axis=1))[:, None, None]
        mu = np.where(flat, mu, new_mu)
        sigma = np.where(flat, sigma, new_sigma)
        if records is not None:
            records.append({"iteration": it, "elite_scores": elite_scores.tolist(),
                            "mu": mu.tolist(), "sigma": sigma.tolist()})

    # keep the returned mean no worse than where the search started
    pair = np.stack([mu, mu_init], axis=1)
    final = returns.evaluate(zc, pair, model, cfg.gamma, cfg.objective, check_finite=False)
    final = np.where(np.isfinite(final), final, -np.inf)
    revert = final[:, 1] > final[:, 0]
    mu[revert] = mu_init[revert]
    mu[~ok] = mu_init[~ok]
    sigma[~ok] = cfg.sigma_max
    return PlanResult(PlanDistribution(mu, sigma), ok, records)


def plan(z, model: LatentModel, cfg: PlannerConfig, warm_start: PlanDistribution | None = None,
         rng: np.random.Generator | None = None, trace_path: str | Path | None = None) -> PlanDistribution:
    """Plan from a single latent ``z`` (shape ``(D,)``); returns ``(H, A)`` mean and std."""
    rng = rng if rng is not None else np.random.default_rng(0)
    res = plan_batch(np.asarray(z)[None], model, cfg, rng,
                     None if warm_start is None else PlanDistribution(warm_start.mu[None], warm_start.sigma[None]),
                     trace=trace_path is not None)
    if not res.ok[0]:
        raise PlanningError(f"all candidate scores are non-finite under objective {cfg.objective}")
    if trace_path is not None:
        from etdmpc._io import atomic_write_text

        atomic_write_text(trace_path, json.dumps({"objective": str(cfg.objective), "iterations": res.trace}))
    return PlanDistribution(res.plan.mu[0], res.plan.sigma[0])
