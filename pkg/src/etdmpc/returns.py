"""Return estimates over dynamics/value head combinations and the planner objectives built on them.

A :class:`ReturnTable` holds ``q[..., i, j, k]``: the ``depths[k]``-step rollout
of dynamics head ``i`` bootstrapped with value head ``j``.  Every objective is
a reduction of that table.  Reductions run in a fixed summation order so that
results do not depend on numpy's pairwise-summation blocking.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from etdmpc.worldmodel import LatentModel, NonFiniteError


@dataclass
class ReturnTable:
    q: np.ndarray  # (..., N_f, N_v, len(depths))
    gamma: float
    depths: tuple[int, ...]

    @property
    def num_dynamics(self) -> int:
        return self.q.shape[-3]

    @property
    def num_values(self) -> int:
        return self.q.shape[-2]

    @property
    def horizon(self) -> int:
        return max(self.depths)

    def at(self, h: int) -> np.ndarray:
        """Slice ``(..., N_f, N_v)`` at rollout depth ``h`` (1-based)."""
        try:
            k = self.depths.index(h)
        except ValueError:
            raise ValueError(f"depth {h} not in table depths {self.depths}") from None
        return self.q[..., k]

    def to_json(self) -> str:
        return json.dumps({"gamma": self.gamma, "depths": list(self.depths), "q": self.q.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "ReturnTable":
        doc = json.loads(text)
        return cls(np.asarray(doc["q"], dtype=np.float64), float(doc["gamma"]), tuple(doc["depths"]))


def rollout_returns(z, actions, model: LatentModel, gamma: float,
                    depths: Sequence[int] | None = None, check_finite: bool = True) -> ReturnTable:
    """Roll every dynamics head along ``actions`` and bootstrap with every value head.

    ``z`` has shape ``(..., D)`` and ``actions`` ``(..., H, A)`` with matching
    leading dimensions.  Rewards along each head's trajectory are evaluated
    once and shared by all value heads and depths.
    """
    actions = np.asarray(actions, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    H = actions.shape[-2]
    if H < 1:
        raise ValueError("horizon must be >= 1")
    depths = tuple(range(1, H + 1)) if depths is None else tuple(sorted(set(int(h) for h in depths)))
    if depths[0] < 1 or depths[-1] > H:
        raise ValueError(f"depths {depths} outside 1..{H}")
    batch = np.broadcast_shapes(z.shape[:-1], actions.shape[:-2])
    Nf, Nv = model.num_dynamics, model.num_values
    z = np.broadcast_to(z, batch + z.shape[-1:])

    q = np.empty(batch + (Nf, Nv, len(depths)))
    cum = np.zeros((Nf,) + batch)
    zs = np.broadcast_to(z, (Nf,) + z.shape)
    for u in range(H):
        if u >= depths[-1]:
            break
        a = np.broadcast_to(actions[..., u, :], batch + actions.shape[-1:])
        if u == 0:
            # every head starts from the same latent
            r = np.broadcast_to(model.predict_reward(z, a), (Nf,) + batch)
        else:
            r = model.predict_reward(zs, a)
        cum = cum + gamma ** u * r
        zs = model.step_all(zs, a)
        h = u + 1
        if check_finite and not (np.all(np.isfinite(r)) and np.all(np.isfinite(zs))):
            bad = int(np.argmax(~np.all(np.isfinite(zs.reshape(Nf, -1)), axis=1) | ~np.isfinite(r.reshape(Nf, -1)).all(axis=1)))
            raise NonFiniteError(f"non-finite rollout for dynamics head {bad} at depth {h}")
        if h in depths:
            v = model.values_all(zs)  # (Nv, Nf, *batch)
            est = cum[None] + gamma ** h * v
            if check_finite and not np.all(np.isfinite(est)):
                raise NonFiniteError(f"non-finite return estimate at depth {h}")
            q[..., depths.index(h)] = np.moveaxis(est, (0, 1), (-1, -2))
    return ReturnTable(q, float(gamma), depths)


def ensemble_mean(table: ReturnTable, h: int) -> np.ndarray:
    """Average of the N_f * N_v estimates at depth ``h``."""
    q = table.at(h)
    Nf, Nv = q.shape[-2:]
    total = np.zeros(q.shape[:-2])
    for i in range(Nf):
        for j in range(Nv):
            total = total + q[..., i, j]
    return total / (Nf * Nv)


def variance_of_mean(table: ReturnTable, h: int) -> np.ndarray:
    """Sample variance of the mean across the N_f * N_v estimates; 0 for a single estimate."""
    q = table.at(h)
    Nf, Nv = q.shape[-2:]
    n = Nf * Nv
    if n == 1:
        return np.zeros(q.shape[:-2])
    mean = ensemble_mean(table, h)
    ss = np.zeros(q.shape[:-2])
    for i in range(Nf):
        for j in range(Nv):
            d = q[..., i, j] - mean
            ss = ss + d * d
    return ss / (n * (n - 1))


def aggregate_horizon(table: ReturnTable) -> np.ndarray:
    """Uniform average of the ensemble means over depths 1..H."""
    H = table.horizon
    if table.depths != tuple(range(1, H + 1)):
        raise ValueError("aggregate objective needs every depth 1..H in the table")
    total = np.zeros(table.q.shape[:-3])
    for h in range(1, H + 1):
        total = total + ensemble_mean(table, h)
    return total / H


def pessimistic_objective(table: ReturnTable, beta: float, h: int | None = None) -> np.ndarray:
    if beta < 0:
        raise ValueError(f"pessimism coefficient must be >= 0, got {beta}")
    h = table.horizon if h is None else h
    mean = ensemble_mean(table, h)
    if beta == 0:
        return mean
    return mean - beta * np.sqrt(variance_of_mean(table, h))


# ---------------------------------------------------------------------------
# Objective modes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SingleHead:
    dynamics: int = 0
    value: int = 0
    depth: int | None = None

    def __str__(self):
        return f"SingleHead({self.dynamics},{self.value})"


@dataclass(frozen=True)
class EnsembleMean:
    depth: int | None = None

    def __str__(self):
        return "EnsembleMean"


@dataclass(frozen=True)
class AggregateHorizon:
    def __str__(self):
        return "AggregateHorizon"


@dataclass(frozen=True)
class Pessimistic:
    beta: float = 0.0
    depth: int | None = None

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"pessimism coefficient must be >= 0, got {self.beta}")

    def __str__(self):
        return f"Pessimistic({self.beta:g})"


ObjectiveMode = Union[SingleHead, EnsembleMean, AggregateHorizon, Pessimistic]


def required_depths(mode: ObjectiveMode, horizon: int) -> tuple[int, ...]:
    if isinstance(mode, AggregateHorizon):
        return tuple(range(1, horizon + 1))
    depth = mode.depth or horizon
    return (depth,)


def score(table: ReturnTable, mode: ObjectiveMode) -> np.ndarray:
    if isinstance(mode, AggregateHorizon):
        return aggregate_horizon(table)
    h = mode.depth or table.horizon
    if isinstance(mode, SingleHead):
        if not (0 <= mode.dynamics < table.num_dynamics and 0 <= mode.value < table.num_values):
            raise IndexError(f"{mode} out of range for a {table.num_dynamics}x{table.num_values} table")
        return table.at(h)[..., mode.dynamics, mode.value]
    if isinstance(mode, EnsembleMean):
        return ensemble_mean(table, h)
    if isinstance(mode, Pessimistic):
        return pessimistic_objective(table, mode.beta, h)
    raise TypeError(f"unknown objective mode {mode!r}")


def evaluate(z, actions, model: LatentModel, gamma: float, mode: ObjectiveMode,
             check_finite: bool = True) -> np.ndarray:
    """Score action sequences under ``mode``, computing only the depths it needs."""
    H = np.shape(actions)[-2]
    table = rollout_returns(z, actions, model, gamma, required_depths(mode, H), check_finite)
    return score(table, mode)


def value_target(z, model: LatentModel, gamma: float, rng: np.random.Generator,
                 heads: str = "all", action=None) -> np.ndarray:
    """One-step imagined target: mean over heads of ``R(z, a) + gamma * V_target_j(f_i(z, a))``.

    ``a`` is drawn from the policy prior unless ``action`` is given.  ``heads``
    selects all dynamics heads or only the first.
    """
    z = np.asarray(z, dtype=np.float64)
    if action is None:
        action = model.policy_prior(z).sample(rng)
    n_dyn = model.num_dynamics if heads == "all" else 1
    if heads not in ("all", "first"):
        raise ValueError(f"heads must be 'all' or 'first', got {heads!r}")
    r = model.predict_reward(z, action)
    if n_dyn == model.num_dynamics:
        nxt = model.step_all(np.broadcast_to(z, (n_dyn,) + z.shape), action)
    else:
        nxt = model.dynamics_step(z, action, 0)[None]
    v = model.values_all(nxt, use_target=True)  # (Nv, n_dyn, ...)
    total = np.zeros(z.shape[:-1])
    for i in range(n_dyn):
        for j in range(model.num_values):
            total = total + v[j, i]
    return r + gamma * total / (n_dyn * model.num_values)
