"""Command line entry point: ``etdmpc {train,evaluate,ablate,crossscore,aggregate}``.

Every command resolves its configuration first, refuses to start when an input
is missing, and writes outputs atomically.  ``ETDMPC_THREADS`` caps how many
seeds/variants run in parallel worker processes (default 1).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from etdmpc import analysis, trainer
from etdmpc._io import atomic_write_csv, atomic_write_text
from etdmpc.config import (
    BIG_REANALYZE,
    PRESETS,
    SMALL_REANALYZE,
    ConfigError,
    RunConfig,
    desk_scale,
    discount_for_episode_length,
    dump_run_config,
    load_run_config,
    preset,
)
from etdmpc.envs import make_spec, pendulum_value, zero_value
from etdmpc.replay import ReplayBuffer
from etdmpc.returns import AggregateHorizon, EnsembleMean, Pessimistic
from etdmpc.worldmodel import WorldModel

log = logging.getLogger("etdmpc")

AXES = ("ensemble", "buffer_mode", "aggregation", "pessimism", "reanalyze_budget", "pessimism_scope", "utd")
PESSIMISM_SWEEP = (0.0, 1.0, 3.0, 10.0, 30.0)
# beta used by the pessimism-scope axis when the config's own beta is zero
SCOPE_FALLBACK_BETA = 3.0


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------


def resolve_config(args) -> RunConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        base = preset(args.preset, args.env or "pendulum") if args.preset else None
        rc = load_run_config(path, base)
    elif getattr(args, "preset", None):
        rc = preset(args.preset, args.env or "pendulum")
    else:
        rc = RunConfig(env=args.env or "pendulum")
    if getattr(args, "env", None):
        rc = replace(rc, env=args.env)
    if getattr(args, "desk", False):
        rc = desk_scale(rc)
    if getattr(args, "steps", None) is not None:
        rc = replace(rc, train=replace(rc.train, total_steps=args.steps))
    if getattr(args, "seed", None):
        rc = replace(rc, seeds=list(args.seed))
    if getattr(args, "out", None):
        rc = replace(rc, out=args.out)
    make_spec(rc.env, rc.episode_length)  # validates the env name
    return rc


def num_workers() -> int:
    raw = os.environ.get("ETDMPC_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"ETDMPC_THREADS must be an integer, got {raw!r}") from None
    return max(n, 1)


def _run_jobs(fn, jobs: list[tuple]) -> list:
    workers = min(num_workers(), len(jobs))
    if workers <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _train_one(rc: RunConfig, seed: int, out_dir: str) -> list[dict]:
    out = Path(out_dir)
    rows, state = trainer.run(rc, seed, out / "metrics.csv", timing_path=out / "timing.csv")
    state.model.save(out / "checkpoint.json")
    state.buffer.save_snapshot(out / "replay.jsonl", rc.env, checkpoint="checkpoint.json")
    return rows


def cmd_train(args) -> int:
    rc = resolve_config(args)
    out = Path(rc.out)
    atomic_write_text(out / "resolved_config.json", dump_run_config(rc) + "\n")
    _run_jobs(_train_one, [(rc, s, str(out / f"seed_{s}")) for s in rc.seeds])
    print(f"wrote {len(rc.seeds)} run(s) under {out}")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    rc = resolve_config(args)
    model = WorldModel.load(ckpt)
    spec = make_spec(rc.env, rc.episode_length)
    gamma = discount_for_episode_length(spec.episode_length, rc.train.gamma_min, rc.train.gamma_max)
    acting, _ = trainer.resolved_planners(rc, gamma)
    rows = []
    for s in rc.seeds:
        for e, ret in enumerate(trainer.evaluate_policy(spec, model, acting, args.episodes, s)):
            rows.append([s, e, ret])
    out = Path(rc.out)
    atomic_write_csv(out / "eval.csv", ["seed", "episode", "return"], rows)
    rets = [r[2] for r in rows]
    print(f"mean return {np.mean(rets):.2f} over {len(rets)} episodes")
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


def ablation_variants(rc: RunConfig, axis: str) -> dict[str, RunConfig]:
    """Expand ``rc`` into the named variants of one ablation axis."""
    t, H = rc.train, rc.acting.horizon
    if axis == "ensemble":
        return {f"nf{n}": replace(rc, model={**rc.model, "num_dynamics": n}) for n in (1, 2, 4)}
    if axis == "buffer_mode":
        return {m: replace(rc, train=replace(t, buffer_mode=m)) for m in ("per_step", "per_episode")}
    if axis == "aggregation":
        return {"aggregate": replace(rc, acting=replace(rc.acting, objective=AggregateHorizon())),
                "final": replace(rc, acting=replace(rc.acting, objective=EnsembleMean(H)))}
    if axis == "pessimism":
        return {f"beta{b:g}": replace(rc, train=replace(t, beta=b)) for b in PESSIMISM_SWEEP}
    if axis == "reanalyze_budget":
        return {"512-64-24": replace(rc, reanalyze=replace(rc.reanalyze, **BIG_REANALYZE)),
                "64-8-3": replace(rc, reanalyze=replace(rc.reanalyze, **SMALL_REANALYZE))}
    if axis == "pessimism_scope":
        beta = t.beta if t.beta > 0 else SCOPE_FALLBACK_BETA
        pt = replace(t, beta=beta)
        return {"reanalyze": replace(rc, train=pt),
                "acting_and_reanalyze": replace(rc, train=pt, acting=replace(rc.acting, objective=Pessimistic(beta, H)))}
    if axis == "utd":
        interval = {1: 10, 2: 5, 4: 2}
        return {f"utd{u}": replace(rc, train=replace(t, utd=u, reanalyze_interval=interval[u])) for u in (1, 2, 4)}
    raise UsageError(f"unknown ablation axis {axis!r}; choose from {', '.join(AXES)}")


def cmd_ablate(args) -> int:
    if args.axis not in AXES:
        raise UsageError(f"unknown ablation axis {args.axis!r}; choose from {', '.join(AXES)}")
    rc = resolve_config(args)
    out = Path(rc.out)
    variants = ablation_variants(rc, args.axis)
    jobs = []
    for name, v in variants.items():
        vdir = out / name
        atomic_write_text(vdir / "resolved_config.json", dump_run_config(replace(v, out=str(vdir))) + "\n")
        jobs += [(v, s, str(vdir / f"seed_{s}")) for s in v.seeds]
    results = _run_jobs(_train_one, jobs)
    header = ["variant", "seed"] + list(trainer.METRIC_COLUMNS)
    rows = []
    for (v, s, d), res in zip(jobs, results):
        name = Path(d).parent.name
        rows += [[name, s] + [r[c] for c in trainer.METRIC_COLUMNS] for r in res]
    atomic_write_text(out / "resolved_config.json", dump_run_config(rc) + "\n")
    atomic_write_csv(out / f"ablation_{args.axis}.csv", header, rows)
    print(f"wrote {len(variants)} variant(s) x {len(rc.seeds)} seed(s) under {out}")
    return 0


# ---------------------------------------------------------------------------
# crossscore
# ---------------------------------------------------------------------------


def cmd_crossscore(args) -> int:
    ckpt, snap = Path(args.checkpoint), Path(args.snapshot)
    for p in (ckpt, snap):
        if not p.is_file():
            raise UsageError(f"input not found: {p}")
    rc = resolve_config(args)
    model = WorldModel.load(ckpt)
    buf, header = ReplayBuffer.load_snapshot(snap)
    env = header.get("env", rc.env)
    spec = make_spec(env, rc.episode_length)
    gamma = discount_for_episode_length(spec.episode_length, rc.train.gamma_min, rc.train.gamma_max)
    states = np.array([t.sim_state if t.sim_state is not None else np.full(spec.state_dim, np.nan)
                       for t in buf.transitions()])
    value_fn = pendulum_value(gamma) if env == "pendulum" else zero_value
    rng = np.random.default_rng(rc.seeds[0])
    records, summary, skipped = analysis.cross_score_study(model, spec, states, value_fn, gamma, rng,
                                                           num_states=args.num_states)
    out = Path(rc.out)
    analysis.write_cross_score_csv(out / "cross_score.csv", records)
    analysis.write_summary_csv(out / "cross_score_summary.csv", summary)
    if args.plot:
        analysis.plot_delta_r_svg(out / "delta_r.svg", summary)
    if skipped:
        log.warning("skipped %d replay entries without a simulator state", skipped)
    print(f"scored {len(records)} plans; summary in {out / 'cross_score_summary.csv'}")
    return 0


# ---------------------------------------------------------------------------
# aggregate
# ---------------------------------------------------------------------------


def _parse_pairs(items, what: str) -> list[tuple[str, str]]:
    pairs = []
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"{what} must look like TASK=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs.append((k, v))
    return pairs


def cmd_aggregate(args) -> int:
    inputs = _parse_pairs(args.input, "--input")
    if not inputs:
        raise UsageError("aggregate needs at least one --input TASK=metrics.csv")
    missing = [p for _, p in inputs if not Path(p).is_file()]
    if missing:
        raise UsageError(f"input file(s) not found: {', '.join(missing)}")
    norms = {k: float(v) for k, v in _parse_pairs(args.norm, "--norm")}
    series: dict[str, list] = {}
    for task, path in inputs:
        series.setdefault(task, []).append(analysis.read_metrics_csv(path, args.column))
    unknown = set(norms) - set(series)
    if unknown:
        raise UsageError(f"--norm given for unknown task(s): {sorted(unknown)}")
    per_task = {}
    for task, s in series.items():
        stats = analysis.task_mean_and_se(analysis.TaskCurve(task, s))
        per_task[task] = analysis.normalize_curve(stats, norms[task]) if task in norms else stats
    agg = analysis.aggregate_curves(list(per_task.values()))
    out = Path(args.out or "aggregate")
    analysis.write_stats_csv(out / "per_task.csv", per_task)
    analysis.write_stats_csv(out / "aggregate.csv", {"aggregate": agg})
    auc_rows = [[t, analysis.auc(s.steps, s.mean)] for t, s in per_task.items()]
    auc_rows.append(["aggregate", analysis.auc(agg.steps, agg.mean)] if len(agg.steps) > 1 else ["aggregate", float("nan")])
    atomic_write_csv(out / "auc.csv", ["task", "auc"], auc_rows)
    if args.plot:
        analysis.plot_curves_svg(out / "aggregate.svg", {**per_task, "aggregate": agg})
    print(f"final aggregate value {agg.mean[-1]:.6g} (se {agg.se[-1]:.3g}); outputs in {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config JSON (unknown keys are rejected)")
    p.add_argument("--preset", choices=PRESETS, help="named preset; a --config is applied on top of it")
    p.add_argument("--env", choices=("pendulum", "pointmass"))
    p.add_argument("--seed", type=int, action="append", help="seed to run (repeatable)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--steps", type=int, help="override train.total_steps")
    p.add_argument("--desk", action="store_true", help="shrink nets and acting budget for CPU-sized runs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="etdmpc", description="Planning, training and analysis commands for the latent-model MPPI agent.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one agent per seed")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint with the acting planner")
    _add_run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=5)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run every variant of one ablation axis")
    _add_run_flags(p)
    p.add_argument("--axis", required=True, help=f"one of: {', '.join(AXES)}")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("crossscore", help="score planned action sequences under model and simulator")
    _add_run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--snapshot", required=True, help="replay snapshot (JSONL)")
    p.add_argument("--num-states", type=int, default=512)
    p.add_argument("--plot", action="store_true", help="also write an SVG bar chart")
    p.set_defaults(func=cmd_crossscore)

    p = sub.add_parser("aggregate", help="seed/task statistics, normalisation and AUC of learning curves")
    p.add_argument("--input", action="append", metavar="TASK=CSV", help="metrics CSV for a task (repeat per seed)")
    p.add_argument("--norm", action="append", metavar="TASK=C", help="normalisation constant for a task")
    p.add_argument("--column", default="eval_return_mean")
    p.add_argument("--out")
    p.add_argument("--plot", action="store_true", help="also write an SVG plot")
    p.set_defaults(func=cmd_aggregate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"etdmpc {args.command}: error: {e}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as e:
        print(f"etdmpc {args.command}: error: malformed JSON: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
