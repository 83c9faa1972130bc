"""End-to-end training runs for the acceptance suite, cached on disk.

A run is keyed by its resolved config, seed and stopping target.  Each
cache entry stores the source hash of the package that produced it; the
acceptance lines report when that differs from the current source.  Delete
``tests/e2e_cache`` (or set ``ETDMPC_E2E_REFRESH=1``) to recompute.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

import etdmpc
from etdmpc import trainer
from etdmpc._io import atomic_write_text
from etdmpc.config import RunConfig, desk_scale, discount_for_episode_length, dump_run_config, preset
from etdmpc.envs import make_perturbed_ensemble, make_spec, pendulum_value
from etdmpc.planner import PlannerConfig
from etdmpc.returns import AggregateHorizon

CACHE = Path(__file__).parent / "e2e_cache"
EVAL_EPISODES = 3


def source_hash() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(etdmpc.__file__).parent.glob("*.py")):
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


def _load_or_compute(key_doc: dict, compute) -> dict:
    key = hashlib.sha256(json.dumps(key_doc, sort_keys=True).encode()).hexdigest()[:16]
    path = CACHE / f"{key}.json"
    if path.is_file() and os.environ.get("ETDMPC_E2E_REFRESH") != "1":
        return json.loads(path.read_text())
    t0 = time.perf_counter()
    result = compute()
    result.update(key=key_doc, wall_s=time.perf_counter() - t0, source=source_hash())
    atomic_write_text(path, json.dumps(result, indent=1))
    return result


def pendulum_config(name: str = "efficienttdmpc-utd2", total_steps: int = 30_000, eval_interval: int = 1_000,
                    **train) -> RunConfig:
    rc = desk_scale(preset(name, "pendulum"))
    return replace(rc, train=replace(rc.train, total_steps=total_steps, eval_interval=eval_interval,
                                     eval_episodes=EVAL_EPISODES, **train))


def run(rc: RunConfig, seed: int, target: float | None = None) -> dict:
    """Train one seed (stopping early once ``target`` is reached) and return its curve and timings."""
    def compute():
        stop = None if target is None else (lambda row: row["eval_return_mean"] >= target)
        rows, state = trainer.run(rc, seed, stop_when=stop)
        return {"steps": [r["env_step"] for r in rows], "returns": [r["eval_return_mean"] for r in rows],
                "reanalyze_ms": state.reanalyze_ms, "reanalyze_passes": state.reanalyze_passes,
                "updates": state.updates}
    return _load_or_compute({"config": json.loads(dump_run_config(rc)), "seed": seed, "target": target}, compute)


REFERENCE_PLANNERS = {
    "h6-aggregate-256": dict(horizon=6, num_samples=256, num_elites=32),
    "h15-aggregate-256": dict(horizon=15, num_samples=256, num_elites=32),
    "h6-aggregate-512": dict(horizon=6, num_samples=512, num_elites=64),
}


def reference_return(seed: int, episode_length: int = 500) -> dict:
    """Best mean return of exact-simulator planners on the eval resets used for ``seed``.

    The simulator supplies dynamics and reward; states are bootstrapped with
    the discounted-uprightness heuristic.
    """
    def compute():
        spec = make_spec("pendulum", episode_length)
        g = discount_for_episode_length(episode_length)
        model = make_perturbed_ensemble(spec, 0.0, num_heads=1, value_fns=(pendulum_value(g),))
        out = {}
        for name, kw in REFERENCE_PLANNERS.items():
            cfg = PlannerConfig(gamma=g, objective=AggregateHorizon(), num_policy_trajectories=0, **kw)
            out[name] = float(np.mean(trainer.evaluate_policy(spec, model, cfg, EVAL_EPISODES, seed)))
        return {"per_planner": out, "best": max(out.values())}
    return _load_or_compute({"reference": sorted(REFERENCE_PLANNERS), "seed": seed, "episodes": EVAL_EPISODES,
                             "episode_length": episode_length}, compute)
