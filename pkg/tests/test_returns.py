from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from etdmpc.returns import (
    AggregateHorizon,
    EnsembleMean,
    Pessimistic,
    ReturnTable,
    SingleHead,
    aggregate_horizon,
    ensemble_mean,
    evaluate,
    pessimistic_objective,
    required_depths,
    rollout_returns,
    score,
    value_target,
    variance_of_mean,
)
from stubs import ConstantModel


def table_from(entries, depths=(1,), gamma=0.99):
    return ReturnTable(np.asarray(entries, dtype=np.float64), gamma, tuple(depths))


def test_rollout_identity_stub_h2():
    m = ConstantModel(reward=1.0, value=10.0)
    z = np.zeros(3)
    t = rollout_returns(z, np.zeros((2, 1)), m, 0.9)
    assert np.allclose(t.at(2), 1 + 0.9 + 0.81 * 10)
    assert np.allclose(t.at(1), 1 + 0.9 * 10)
    assert t.q.shape == (2, 2, 2)


def test_zero_discount_keeps_only_first_reward():
    m = ConstantModel(reward=0.7, value=123.0)
    t = rollout_returns(np.zeros(3), np.zeros((4, 1)), m, 0.0)
    assert np.all(t.q == 0.7)


def test_rollout_batched_shapes_and_depth_subset():
    m = ConstantModel(reward=1.0, value=0.0, num_dynamics=3, num_values=2)
    t = rollout_returns(np.zeros((5, 3)), np.zeros((5, 4, 1)), m, 1.0, depths=(2, 4))
    assert t.q.shape == (5, 3, 2, 2)
    assert np.all(t.at(2) == 2.0) and np.all(t.at(4) == 4.0)
    with pytest.raises(ValueError):
        t.at(3)


def test_ensemble_mean_example():
    # N_f = 2, N_v = 2 with entries 1..4
    assert ensemble_mean(table_from([[[1.0], [2.0]], [[3.0], [4.0]]]), 1) == pytest.approx(2.5)


def test_ensemble_mean_degenerate():
    assert ensemble_mean(table_from([[[4.2]]]), 1) == 4.2
    assert ensemble_mean(table_from(np.full((3, 2, 1), 1.25)), 1) == 1.25


def test_variance_of_mean_example():
    assert variance_of_mean(table_from([[[0.0]], [[2.0]]]), 1) == pytest.approx(1.0)
    assert variance_of_mean(table_from(np.full((3, 2, 1), 5.0)), 1) == 0.0
    assert variance_of_mean(table_from([[[7.0]]]), 1) == 0.0


def test_aggregate_example():
    m = ConstantModel(reward=1.0, value=0.0)
    t = rollout_returns(np.zeros(3), np.zeros((3, 1)), m, 1.0)
    assert [float(ensemble_mean(t, h)) for h in (1, 2, 3)] == [1.0, 2.0, 3.0]
    assert aggregate_horizon(t) == pytest.approx(2.0)


def test_aggregate_needs_all_depths():
    t = table_from(np.zeros((1, 1, 2)), depths=(1, 3))
    with pytest.raises(ValueError):
        aggregate_horizon(t)


def test_pessimistic_example():
    # mean 5 and sigma-hat 0.5: entries 4.5, 5.5 give variance of the mean 0.25
    t = table_from([[[4.5]], [[5.5]]])
    assert float(np.sqrt(variance_of_mean(t, 1))) == pytest.approx(0.5)
    assert pessimistic_objective(t, 10.0, 1) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        pessimistic_objective(t, -1.0)
    with pytest.raises(ValueError):
        Pessimistic(-0.1)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 3), st.integers(1, 4)),
              elements=st.floats(-50, 50)))
def test_reduction_invariants(q):
    t = ReturnTable(q, 0.9, tuple(range(1, q.shape[-1] + 1)))
    H = t.horizon
    assert pessimistic_objective(t, 0.0, H) == ensemble_mean(t, H)
    assert variance_of_mean(t, H) >= 0
    m = ensemble_mean(t, H)
    assert q[..., -1].min() - 1e-9 <= m <= q[..., -1].max() + 1e-9
    if H == 1:
        assert aggregate_horizon(t) == ensemble_mean(t, 1)
    # pessimism never raises the score
    assert pessimistic_objective(t, 3.0, H) <= m + 1e-12


def test_score_dispatch_and_required_depths():
    q = np.arange(2 * 2 * 3, dtype=np.float64).reshape(2, 2, 3)
    t = ReturnTable(q, 0.9, (1, 2, 3))
    assert score(t, SingleHead(1, 0)) == q[1, 0, 2]
    assert score(t, SingleHead(1, 0, depth=1)) == q[1, 0, 0]
    assert score(t, EnsembleMean(2)) == ensemble_mean(t, 2)
    assert score(t, AggregateHorizon()) == aggregate_horizon(t)
    assert required_depths(AggregateHorizon(), 4) == (1, 2, 3, 4)
    assert required_depths(Pessimistic(1.0), 4) == (4,)
    with pytest.raises(IndexError):
        score(t, SingleHead(2, 0))


def test_evaluate_matches_table_score():
    m = ConstantModel(reward=0.5, value=2.0, num_dynamics=3)
    z = np.zeros((4, 3))
    acts = np.zeros((4, 3, 1))
    full = rollout_returns(z, acts, m, 0.9)
    for mode in (AggregateHorizon(), EnsembleMean(), Pessimistic(2.0), SingleHead(2, 1)):
        assert np.array_equal(evaluate(z, acts, m, 0.9, mode), score(full, mode))


def test_table_json_roundtrip():
    t = ReturnTable(np.random.default_rng(0).normal(size=(2, 3, 2, 4)), 0.97, (1, 2, 3, 4))
    back = ReturnTable.from_json(t.to_json())
    assert np.array_equal(back.q, t.q) and back.gamma == t.gamma and back.depths == t.depths


def test_value_target_examples():
    rng = np.random.default_rng(0)
    assert value_target(np.zeros(3), ConstantModel(0.0, 0.0), 0.9, rng) == 0.0
    y = value_target(np.zeros((5, 3)), ConstantModel(1.0, 10.0), 0.9, rng)
    assert np.allclose(y, 10.0)
    y1 = value_target(np.zeros((5, 3)), ConstantModel(1.0, 10.0), 0.9, rng, heads="first")
    assert np.allclose(y1, 10.0)
    with pytest.raises(ValueError):
        value_target(np.zeros(3), ConstantModel(), 0.9, rng, heads="some")


def test_nonfinite_rollout_names_head():
    from etdmpc.worldmodel import NonFiniteError

    class Bad(ConstantModel):
        def dynamics_step(self, z, a, head):
            out = super().dynamics_step(z, a, head)
            if head == 1:
                out[...] = np.nan
            return out

    with pytest.raises(NonFiniteError, match="head 1"):
        rollout_returns(np.zeros(3), np.zeros((2, 1)), Bad(), 0.9)
