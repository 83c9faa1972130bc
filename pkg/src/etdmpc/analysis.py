"""Learning-curve statistics (seed mean, standard error, normalisation, task aggregation, AUC)
and the planner cross-scoring study that measures how much planners exploit model error.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from etdmpc import planner as planner_mod
from etdmpc import returns
from etdmpc._io import atomic_write_csv
from etdmpc.envs import EnvSpec, oracle_return
from etdmpc.planner import PlannerConfig
from etdmpc.returns import AggregateHorizon, EnsembleMean, ObjectiveMode, Pessimistic, SingleHead
from etdmpc.worldmodel import LatentModel

CI_Z = 1.96
OBJECTIVE_TYPES = (SingleHead, EnsembleMean, AggregateHorizon, Pessimistic)


# ---------------------------------------------------------------------------
# Curves
# ---------------------------------------------------------------------------


def interpolate(steps, values, grid) -> np.ndarray:
    """Piecewise-linear resampling; the grid must lie inside ``[steps[0], steps[-1]]``."""
    steps, values, grid = (np.asarray(x, dtype=np.float64) for x in (steps, values, grid))
    if grid.size and (grid[0] < steps[0] - 1e-9 or grid[-1] > steps[-1] + 1e-9):
        raise ValueError(f"grid [{grid[0]}, {grid[-1]}] leaves the curve's range [{steps[0]}, {steps[-1]}]")
    return np.interp(grid, steps, values)


@dataclass
class TaskCurve:
    task_id: str
    series: list[tuple[np.ndarray, np.ndarray]]  # per seed: (env_steps, returns)

    def __post_init__(self):
        if not self.series:
            raise ValueError("a task curve needs at least one seed")

    @property
    def num_seeds(self) -> int:
        return len(self.series)

    def shared_grid(self) -> np.ndarray:
        """Grid points of the first seed that every seed covers."""
        lo = max(s[0][0] for s in self.series)
        hi = min(s[0][-1] for s in self.series)
        if lo > hi:
            raise ValueError(f"seeds of task {self.task_id} do not overlap")
        g = np.asarray(self.series[0][0], dtype=np.float64)
        return g[(g >= lo) & (g <= hi)]

    def on_grid(self, grid=None) -> tuple[np.ndarray, np.ndarray]:
        grid = self.shared_grid() if grid is None else np.asarray(grid, dtype=np.float64)
        return grid, np.stack([interpolate(s, r, grid) for s, r in self.series])


@dataclass
class CurveStats:
    steps: np.ndarray
    mean: np.ndarray
    se: np.ndarray  # NaN where unavailable (single seed)
    n: int = 1

    def band(self, z: float = CI_Z) -> tuple[np.ndarray, np.ndarray]:
        return self.mean - z * self.se, self.mean + z * self.se


def task_mean_and_se(curve: TaskCurve, grid=None) -> CurveStats:
    steps, R = curve.on_grid(grid)
    n = R.shape[0]
    mean = R.mean(axis=0)
    if n < 2:
        se = np.full_like(mean, np.nan)
    else:
        sd = np.sqrt(((R - mean) ** 2).sum(axis=0) / (n - 1))
        se = sd / np.sqrt(n)
    return CurveStats(steps, mean, se, n)


def confidence_interval(mean, se, z: float = CI_Z) -> tuple[float, float]:
    return mean - z * se, mean + z * se


def normalize_curve(stats: CurveStats, c: float) -> CurveStats:
    if not c > 0:
        raise ValueError(f"normalisation constant must be positive, got {c}")
    return CurveStats(stats.steps, stats.mean / c, stats.se / c, stats.n)


def aggregate_curves(per_task: Sequence[CurveStats]) -> CurveStats:
    """Mean over tasks; standard error ``sqrt(sum se_i^2) / T`` (independent task estimates)."""
    if not per_task:
        raise ValueError("no task curves to aggregate")
    lo = max(s.steps[0] for s in per_task)
    hi = min(s.steps[-1] for s in per_task)
    if lo > hi:
        raise ValueError("task curves have non-overlapping step ranges")
    grid = per_task[0].steps[(per_task[0].steps >= lo) & (per_task[0].steps <= hi)]
    T = len(per_task)
    means = np.stack([interpolate(s.steps, s.mean, grid) for s in per_task])
    ses = np.stack([interpolate(s.steps, s.se, grid) for s in per_task])
    return CurveStats(grid, means.sum(axis=0) / T, np.sqrt((ses ** 2).sum(axis=0)) / T, T)


def auc(steps, values) -> float:
    steps = np.asarray(steps, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if steps.size < 2:
        raise ValueError("AUC needs at least two grid points")
    return float(np.trapezoid(values, steps))


def aggregate_auc(benchmark_aucs: Sequence[float], reference: float | None = None) -> float:
    """Average of benchmark-level AUCs, optionally divided by a reference method's value."""
    avg = float(np.mean(benchmark_aucs))
    return avg if reference is None else avg / reference


def read_metrics_csv(path: str | Path, column: str = "eval_return_mean") -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path} has no rows")
    steps = np.array([float(r["env_step"]) for r in rows])
    vals = np.array([float(r[column]) for r in rows])
    return steps, vals


def write_stats_csv(path: str | Path, stats: Mapping[str, CurveStats]) -> None:
    rows = []
    for name, s in stats.items():
        lo, hi = s.band()
        for k in range(len(s.steps)):
            rows.append([name, float(s.steps[k]), float(s.mean[k]), float(s.se[k]), float(lo[k]), float(hi[k]), s.n])
    atomic_write_csv(path, ["condition", "env_step", "mean", "se", "ci_low", "ci_high", "n"], rows)


# ---------------------------------------------------------------------------
# Cross-scoring
# ---------------------------------------------------------------------------


def delta_r(planner_score, policy_score, episode_length: int, horizon: int):
    """Extrapolate an ``horizon``-step return advantage linearly to a full episode."""
    return (np.asarray(planner_score) - np.asarray(policy_score)) * (episode_length / horizon)


@dataclass
class CrossScoreRecord:
    state_id: int
    planner: str
    scores: dict[str, float]         # estimator -> score of the planned sequence
    policy_scores: dict[str, float]  # estimator -> score of the policy-mean sequence
    delta_r: dict[str, float] = field(default_factory=dict)


def study_planner_config(**overrides) -> PlannerConfig:
    base = dict(horizon=3, iterations=6, num_samples=64, num_elites=8, num_policy_trajectories=3,
                temperature=0.5, objective=EnsembleMean())
    base.update(overrides)
    return PlannerConfig(**base)


def policy_mean_sequence(z, model: LatentModel, horizon: int, head: int = 0) -> np.ndarray:
    """Policy-mean actions rolled through one dynamics head; ``z`` is ``(B, D)``."""
    acts = np.empty(z.shape[:-1] + (horizon, model.action_dim))
    for u in range(horizon):
        acts[..., u, :] = model.policy_prior(z).mean_action
        if u < horizon - 1:
            z = model.dynamics_step(z, acts[..., u, :], head)
    return acts


def cross_score_study(model: LatentModel, spec: EnvSpec, states, value_fn: Callable[[np.ndarray], np.ndarray],
                      gamma: float, rng: np.random.Generator, num_states: int = 512,
                      planner_cfg: PlannerConfig | None = None,
                      planners: Mapping[str, ObjectiveMode | Callable] | None = None,
                      encode_state: Callable[[np.ndarray], np.ndarray] | None = None,
                      single: SingleHead = SingleHead(0, 0)):
    """Plan from replay states under several objectives and score every plan three ways.

    ``states`` are exact simulator states (rows containing NaN are skipped).
    ``planners`` maps a name to an objective or to a callable
    ``(z, policy_sequence) -> action sequences``.  Returns
    ``(records, summary, skipped)`` where ``summary[(planner, estimator)]`` is
    ``(mean_delta_r, standard_error)`` over states.
    """
    cfg = planner_cfg or study_planner_config()
    H, L = cfg.horizon, spec.episode_length
    states = np.asarray(states, dtype=np.float64)
    valid = np.flatnonzero(~np.isnan(states).any(axis=1))
    skipped = len(states) - len(valid)
    if len(valid) == 0:
        raise ValueError("no replay entries carry a simulator state")
    pick = valid[rng.choice(len(valid), size=min(num_states, len(valid)), replace=False)]
    S = states[pick]
    encode_state = encode_state or (lambda s: model.encode(spec.observe(s)))
    z = encode_state(S)
    planners = planners or {"single": single, "ensemble": EnsembleMean()}

    pol_seq = policy_mean_sequence(z, model, H)

    def estimates(seq):
        table = returns.rollout_returns(z, seq, model, gamma, depths=(H,))
        return {
            "single": table.at(H)[..., single.dynamics, single.value],
            "ensemble": returns.ensemble_mean(table, H),
            "oracle": oracle_return(spec, S, seq, value_fn, gamma),
        }

    pol_scores = estimates(pol_seq)
    records: list[CrossScoreRecord] = []
    summary: dict[tuple[str, str], tuple[float, float]] = {}
    for name, how in planners.items():
        if isinstance(how, OBJECTIVE_TYPES):
            seq = planner_mod.plan_batch(z, model, replace(cfg, objective=how, gamma=gamma), rng).plan.mu
        else:
            seq = how(z, pol_seq)
        sc = estimates(seq)
        dr = {k: delta_r(sc[k], pol_scores[k], L, H) for k in sc}
        for b in range(len(pick)):
            records.append(CrossScoreRecord(int(pick[b]), name, {k: float(v[b]) for k, v in sc.items()},
                                            {k: float(v[b]) for k, v in pol_scores.items()},
                                            {k: float(v[b]) for k, v in dr.items()}))
        for k, v in dr.items():
            n = len(v)
            summary[(name, k)] = (float(v.mean()), float(v.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan"))
    return records, summary, skipped


def write_cross_score_csv(path: str | Path, records: Sequence[CrossScoreRecord]) -> None:
    est = ("single", "ensemble", "oracle")
    header = ["state_id", "planner"] + [f"score_{e}" for e in est] + [f"policy_{e}" for e in est] + [f"delta_r_{e}" for e in est]
    rows = ([r.state_id, r.planner] + [r.scores[e] for e in est] + [r.policy_scores[e] for e in est]
            + [r.delta_r[e] for e in est] for r in records)
    atomic_write_csv(path, header, rows)


def write_summary_csv(path: str | Path, summary: Mapping[tuple[str, str], tuple[float, float]]) -> None:
    atomic_write_csv(path, ["planner", "estimator", "mean_delta_r", "se"],
                     ([p, e, m, s] for (p, e), (m, s) in summary.items()))


# ---------------------------------------------------------------------------
# Plots
# ---------------------------------------------------------------------------


def plot_curves_svg(path: str | Path, stats: Mapping[str, CurveStats], ylabel: str = "normalized return") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, s in stats.items():
        ax.plot(s.steps, s.mean, label=name)
        if np.all(np.isfinite(s.se)):
            lo, hi = s.band()
            ax.fill_between(s.steps, lo, hi, alpha=0.25)
    ax.set_xlabel("env steps")
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def plot_delta_r_svg(path: str | Path, summary: Mapping[tuple[str, str], tuple[float, float]]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    planners = sorted({p for p, _ in summary})
    estimators = ("single", "ensemble", "oracle")
    fig, ax = plt.subplots(figsize=(5, 3.5))
    width = 0.8 / len(estimators)
    for k, e in enumerate(estimators):
        xs = np.arange(len(planners)) + k * width
        ax.bar(xs, [summary[(p, e)][0] for p in planners], width, yerr=[summary[(p, e)][1] for p in planners], label=e)
    ax.set_xticks(np.arange(len(planners)) + width)
    ax.set_xticklabels(planners)
    ax.set_ylabel("ΔR")
    ax.legend(title="scored by")
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def _save_svg(fig, path):
    import io

    from etdmpc._io import atomic_write_text

    buf = io.StringIO()
    fig.savefig(buf, format="svg")
    atomic_write_text(path, buf.getvalue())
