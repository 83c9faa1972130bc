from __future__ import annotations

import json

import numpy as np
import pytest

from etdmpc.planner import (
    GaussianAction,
    PlanDistribution,
    PlannerConfig,
    PlanningError,
    acting_config,
    expert_policy,
    plan,
    plan_batch,
    reanalyze_config,
    shift_warm_start,
)
from etdmpc.returns import AggregateHorizon, EnsembleMean, Pessimistic
from stubs import ConstantModel, FlatModel, QuadraticModel


def quad_config(**kw):
    base = dict(horizon=1, iterations=6, num_samples=512, num_elites=64, num_policy_trajectories=0,
                objective=EnsembleMean(), gamma=0.99)
    base.update(kw)
    return PlannerConfig(**base)


def test_quadratic_argmax():
    m = QuadraticModel(0.3)
    for seed in range(5):
        d = plan(np.zeros(2), m, quad_config(), rng=np.random.default_rng(seed))
        assert abs(d.mu[0, 0] - 0.3) < 0.02


def test_flat_objective_keeps_initial_distribution():
    cfg = quad_config(horizon=3)
    d = plan(np.zeros(2), FlatModel(), cfg, rng=np.random.default_rng(0))
    assert np.all(d.sigma == cfg.sigma_max)
    assert np.all(d.mu == 0.0)


def test_iteration_rule():
    assert PlannerConfig().effective_iterations(21) == 8
    assert PlannerConfig().effective_iterations(20) == 6


def test_config_invariants():
    with pytest.raises(ValueError):
        PlannerConfig(num_samples=4, num_elites=8, num_policy_trajectories=2)
    with pytest.raises(ValueError):
        PlannerConfig(iterations=0)
    with pytest.raises(ValueError):
        PlannerConfig(sigma_min=0.0)
    a = acting_config()
    assert (a.horizon, a.num_samples, a.num_elites, a.num_policy_trajectories, a.temperature) == (6, 512, 64, 24, 0.5)
    assert isinstance(a.objective, AggregateHorizon)
    r = reanalyze_config(beta=10.0)
    assert (r.horizon, r.num_samples, r.num_elites, r.num_policy_trajectories) == (3, 64, 8, 3)
    assert r.objective == Pessimistic(10.0)


def test_shift_warm_start_example():
    prev = PlanDistribution(np.array([[0.5], [-0.2]]), np.array([[0.1], [0.3]]))
    new = shift_warm_start(prev, 2.0)
    assert new.mu.tolist() == [[-0.2], [0.0]]
    assert new.sigma.tolist() == [[0.3], [2.0]]
    d = PlanDistribution(np.random.default_rng(0).normal(size=(4, 2)), np.ones((4, 2)))
    for _ in range(4):
        d = shift_warm_start(d)
    assert np.all(d.mu == 0)


def test_expert_policy_sampling():
    d = PlanDistribution(np.full((3, 1), 0.2), np.full((3, 1), 0.05))
    e = expert_policy(d)
    assert isinstance(e, GaussianAction)
    rng = np.random.default_rng(0)
    draws = np.stack([e.sample(rng) for _ in range(10_000)])
    assert np.all(np.abs(draws - 0.2) <= 0.05 * 5)
    se = 0.05 / np.sqrt(len(draws))
    assert abs(draws.mean() - 0.2) < 3 * se
    tight = GaussianAction(np.zeros(1), np.full(1, 0.05))
    tight_draws = np.stack([tight.sample(rng) for _ in range(2000)])
    assert np.ptp(tight_draws) <= 2 * 3 * 0.05 + 0.2  # spread set by sigma_min, far inside the action box
    assert np.all(np.abs(np.stack([GaussianAction(np.ones(1), np.full(1, 2.0)).sample(rng) for _ in range(100)])) <= 1)


def test_elite_weights_use_only_elites_and_trace(tmp_path):
    path = tmp_path / "trace.json"
    plan(np.zeros(2), QuadraticModel(0.3), quad_config(num_samples=64, num_elites=8), rng=np.random.default_rng(0),
         trace_path=path)
    doc = json.loads(path.read_text())
    assert len(doc["iterations"]) == 6
    for rec in doc["iterations"]:
        scores = np.array(rec["elite_scores"][0])
        assert len(scores) == 8
        assert np.all(np.diff(scores) <= 0)


def test_batched_rows_are_independent():
    m = QuadraticModel(0.3)
    cfg = quad_config(num_samples=128, num_elites=16)
    res = plan_batch(np.zeros((4, 2)), m, cfg, np.random.default_rng(0))
    assert res.plan.mu.shape == (4, 1, 1) and res.ok.all()
    assert np.all(np.abs(res.plan.mu[:, 0, 0] - 0.3) < 0.05)


def test_returned_mean_never_worse_than_warm_start():
    m = QuadraticModel(0.3)
    cfg = quad_config(num_samples=16, num_elites=2, iterations=1)
    ws = PlanDistribution(np.full((1, 1), 0.3), np.full((1, 1), 2.0))
    for seed in range(10):
        d = plan(np.zeros(2), m, cfg, warm_start=ws, rng=np.random.default_rng(seed))
        assert -(d.mu[0, 0] - 0.3) ** 2 >= 0.0 - 1e-12


def test_all_nonfinite_scores_raise():
    class NaNModel(ConstantModel):
        def predict_reward(self, z, a):
            return np.full(np.broadcast_shapes(np.shape(z)[:-1], np.shape(a)[:-1]), np.nan)

    with pytest.raises(PlanningError, match="EnsembleMean"):
        plan(np.zeros(3), NaNModel(), quad_config(horizon=2, num_samples=16, num_elites=4),
             rng=np.random.default_rng(0))


def test_plan_deterministic_given_seed():
    m = QuadraticModel(0.3)
    cfg = quad_config(num_samples=64, num_elites=8, horizon=3, num_policy_trajectories=4)
    a = plan(np.zeros(2), m, cfg, rng=np.random.default_rng(7))
    b = plan(np.zeros(2), m, cfg, rng=np.random.default_rng(7))
    assert np.array_equal(a.mu, b.mu) and np.array_equal(a.sigma, b.sigma)
