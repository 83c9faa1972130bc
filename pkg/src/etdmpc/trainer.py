"""Acting/learning loop: plan, act, insert, update ``utd`` times per step, reanalyze every ``K`` steps."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from etdmpc import planner as planner_mod
from etdmpc import returns
from etdmpc._io import atomic_write_csv
from etdmpc.config import RunConfig, TrainConfig, discount_for_episode_length
from etdmpc.envs import Env, EnvSpec, make_spec
from etdmpc.losses import LossBatch, model_loss
from etdmpc.planner import PlanDistribution, PlannerConfig
from etdmpc.replay import InsufficientData, ReplayBuffer, Transition
from etdmpc.returns import Pessimistic
from etdmpc.worldmodel import ModelConfig, NonFiniteError, Params, WorldModel, ema_update, is_target_key

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# deterministic given (config, seed); wall-clock columns live in a separate timing file
METRIC_COLUMNS = ("env_step", "eval_return_mean", "eval_return_std", "consistency_loss", "reward_loss",
                  "value_loss", "policy_kl", "policy_entropy", "grad_norm", "updates", "reanalyze_passes")
TIMING_COLUMNS = ("env_step", "reanalyze_ms", "wall_ms")


@dataclass
class LossReport:
    consistency_loss: float
    reward_loss: float
    value_loss: float
    policy_kl: float
    policy_entropy: float
    total_loss: float
    grad_norm: float
    grad_norm_unclipped: float
    update: int


@dataclass
class OptState:
    m: Params
    v: Params
    t: int = 0

    @classmethod
    def zeros(cls, params: Params) -> "OptState":
        keys = [k for k in params if not is_target_key(k)]
        return cls({k: np.zeros_like(params[k]) for k in keys}, {k: np.zeros_like(params[k]) for k in keys})


def adam_step(params: Params, grads: Params, opt: OptState, lr: float, encoder_lr_scale: float) -> tuple[Params, OptState]:
    b1, b2 = ADAM_BETAS
    t = opt.t + 1
    new, m_new, v_new = dict(params), {}, {}
    for k, g in grads.items():
        m = b1 * opt.m[k] + (1 - b1) * g
        v = b2 * opt.v[k] + (1 - b2) * g * g
        step = lr * (encoder_lr_scale if k.startswith("enc.") else 1.0)
        new[k] = params[k] - step * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + ADAM_EPS)
        m_new[k], v_new[k] = m, v
    return new, OptState(m_new, v_new, t)


def clip_by_global_norm(grads: Params, max_norm: float) -> tuple[Params, float, float]:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = {k: g * scale for k, g in grads.items()}
        return grads, norm, norm * scale
    return grads, norm, norm


def make_loss_batch(seg, model: WorldModel, cfg: TrainConfig, gamma: float, rng: np.random.Generator) -> LossBatch:
    T = seg.span - 1
    B = seg.obs.shape[1]
    z = model.encode(seg.obs[:T])
    y = returns.value_target(z, model, gamma, rng, heads=cfg.value_target_heads)
    head_weights = None
    if cfg.bootstrap_ensemble:
        head_weights = rng.multinomial(B, np.full(B, 1.0 / B), size=model.num_dynamics).astype(np.float64)
    return LossBatch(seg.obs, seg.action[:T], seg.reward[:T], y, seg.target_mean[:T], seg.target_std[:T], head_weights)


def astuple_shallow(obj) -> tuple:
    return tuple(getattr(obj, f.name) for f in fields(obj))


def update_step(buffer: ReplayBuffer, model: WorldModel, opt: OptState, cfg: TrainConfig, gamma: float,
                rng: np.random.Generator) -> tuple[WorldModel, OptState, LossReport]:
    """One gradient step on a freshly sampled batch; returns the new model snapshot."""
    seg = buffer.sample_sequences(cfg.batch_size, cfg.train_horizon + 1, rng)
    batch = make_loss_batch(seg, model, cfg, gamma, rng)
    dt = np.dtype(cfg.compute_dtype)
    if dt != np.float64:
        batch = LossBatch(*(None if x is None else np.asarray(x, dtype=dt) for x in astuple_shallow(batch)))
        params = {k: v.astype(dt) for k, v in model.params.items() if not is_target_key(k)}
    else:
        params = model.params
    total, grads, terms = model_loss(params, batch, model.config, cfg.rho, cfg.entropy_coeff, cfg.loss_coefs)
    grads = {k: g.astype(np.float64) for k, g in grads.items()}
    total = float(total)
    terms = {k: float(v) for k, v in terms.items()}
    if not np.isfinite(total):
        bad = [k for k, v in terms.items() if not np.isfinite(v)]
        raise NonFiniteError(f"non-finite loss terms: {bad}")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k}")
    grads, raw_norm, norm = clip_by_global_norm(grads, cfg.grad_clip_norm)
    params, opt = adam_step(model.params, grads, opt, cfg.learning_rate, cfg.encoder_lr_scale)
    params = ema_update(params, cfg.tau_ema)
    report = LossReport(terms["consistency"], terms["reward"], terms["value"], terms["policy_kl"],
                        terms["policy_entropy"], float(total), norm, raw_norm, opt.t)
    return model.with_params(params), opt, report


def act_step(env: Env, model: WorldModel, cfg: PlannerConfig, warm_start: PlanDistribution | None,
             rng: np.random.Generator, obs: np.ndarray, episode_id: int,
             buffer: ReplayBuffer | None = None, deterministic: bool = False):
    """Plan from ``obs``, execute one action, build (and optionally insert) the transition.

    Returns ``(transition, next_obs, next_warm_start)``; the warm start is
    cleared when the episode ends.
    """
    step_index = env.t
    z = model.encode(obs)
    ws = planner_mod.shift_warm_start(warm_start, cfg.sigma_max) if (warm_start is not None and cfg.warm_start) else None
    dist = planner_mod.plan(z, model, cfg, ws, rng)
    expert = planner_mod.expert_policy(dist)
    action = np.clip(expert.mean, -1, 1) if deterministic else expert.sample(rng)
    state = env.state.copy()
    next_obs, reward, done, _ = env.step(action)
    t = Transition(np.asarray(obs, dtype=np.float64).copy(), action, reward, done, expert.mean, expert.std,
                   episode_id, step_index, 0, state)
    if buffer is not None:
        buffer.insert(t)
    return t, next_obs, (None if done else dist)


def evaluate_policy(spec: EnvSpec, model: WorldModel, cfg: PlannerConfig, episodes: int, seed: int) -> list[float]:
    """Deterministic-mean planner episodes from seeded resets."""
    out = []
    for e in range(episodes):
        env = Env(spec, seed=10_000 + 97 * seed + e)
        obs = env.reset()
        rng = np.random.default_rng(seed * 1000 + e)
        warm, ret, done = None, 0.0, False
        while not done:
            t, obs, warm = act_step(env, model, cfg, warm, rng, obs, -1, None, deterministic=True)
            ret += t.reward
            done = t.done
        out.append(ret)
    return out


@dataclass
class TrainState:
    model: WorldModel
    opt: OptState
    buffer: ReplayBuffer
    env_step: int = 0
    updates: int = 0
    episode_id: int = 0
    reanalyze_ms: float = 0.0
    reanalyze_passes: int = 0
    history: list[LossReport] = field(default_factory=list)


def build_model(rc: RunConfig, spec: EnvSpec, seed: int) -> WorldModel:
    mcfg = ModelConfig(obs_dim=spec.obs_dim, action_dim=spec.action_dim, seed=seed, **rc.model)
    return WorldModel(mcfg)


def resolved_planners(rc: RunConfig, gamma: float) -> tuple[PlannerConfig, PlannerConfig]:
    acting = replace(rc.acting, gamma=gamma)
    rean = replace(rc.reanalyze, gamma=gamma)
    if isinstance(rean.objective, Pessimistic):
        rean = replace(rean, objective=Pessimistic(rc.train.beta, rean.objective.depth))
    return acting, rean


def run(rc: RunConfig, seed: int, metrics_path: str | Path | None = None,
        stop_when: Callable[[dict], bool] | None = None, state: TrainState | None = None,
        timing_path: str | Path | None = None):
    """Train one seed; returns ``(metrics_rows, final_state)``.

    ``stop_when`` is called with each evaluation row and ends training early
    when it returns True.
    """
    cfg = rc.train
    spec = make_spec(rc.env, rc.episode_length)
    gamma = discount_for_episode_length(spec.episode_length, cfg.gamma_min, cfg.gamma_max)
    acting, rean = resolved_planners(rc, gamma)
    rng = np.random.default_rng(seed)
    act_rng, upd_rng, rea_rng = (np.random.default_rng(s) for s in rng.integers(2**63, size=3))
    env = Env(spec, seed=seed)
    if state is None:
        model = build_model(rc, spec, seed)
        state = TrainState(model, OptState.zeros(model.params),
                           ReplayBuffer(cfg.buffer_capacity, spec.obs_dim, spec.action_dim, cfg.buffer_mode, spec.state_dim))
    obs = env.reset()
    warm = None
    rows: list[dict] = []
    recent: list[LossReport] = []
    t0 = time.perf_counter()

    def evaluate_now():
        rets = evaluate_policy(spec, state.model, acting, cfg.eval_episodes, seed) if cfg.eval_episodes else [np.nan]
        n = max(len(recent), 1)
        avg = lambda k: sum(getattr(r, k) for r in recent) / n if recent else np.nan  # noqa: E731
        row = {"env_step": state.env_step, "eval_return_mean": float(np.mean(rets)),
               "eval_return_std": float(np.std(rets)), "consistency_loss": avg("consistency_loss"),
               "reward_loss": avg("reward_loss"), "value_loss": avg("value_loss"), "policy_kl": avg("policy_kl"),
               "policy_entropy": avg("policy_entropy"), "grad_norm": avg("grad_norm"),
               "updates": state.updates, "reanalyze_passes": state.reanalyze_passes,
               "reanalyze_ms": state.reanalyze_ms, "wall_ms": (time.perf_counter() - t0) * 1e3}
        rows.append(row)
        recent.clear()
        log.info("seed %d step %d eval %.1f", seed, state.env_step, row["eval_return_mean"])
        return row

    for _ in range(cfg.total_steps):
        if state.env_step < cfg.seed_steps:
            action = act_rng.uniform(-1, 1, size=spec.action_dim)
            s = env.state.copy()
            step_index = env.t
            next_obs, r, done, _ = env.step(action)
            tr = Transition(obs.copy(), action, r, done, np.zeros(spec.action_dim),
                            np.full(spec.action_dim, acting.sigma_max), state.episode_id, step_index, 0, s)
            state.buffer.insert(tr)
            obs, warm = next_obs, None
        else:
            tr, obs, warm = act_step(env, state.model, acting, warm, act_rng, obs, state.episode_id, state.buffer)
        state.env_step += 1
        if tr.done:
            obs, warm = env.reset(), None
            state.episode_id += 1

        if state.env_step >= cfg.seed_steps:
            for _ in range(cfg.utd):
                try:
                    state.model, state.opt, rep = update_step(state.buffer, state.model, state.opt, cfg, gamma, upd_rng)
                except InsufficientData:
                    break
                state.updates += 1
                recent.append(rep)
            if (cfg.reanalyze and cfg.utd > 0 and len(state.buffer) >= cfg.reanalyze_start
                    and state.env_step % cfg.reanalyze_interval == 0):
                t1 = time.perf_counter()
                state.buffer.reanalyze_pass(state.model, rean, cfg.reanalyze_batch, rea_rng)
                state.reanalyze_ms += (time.perf_counter() - t1) * 1e3
                state.reanalyze_passes += 1

        if cfg.eval_interval and state.env_step % cfg.eval_interval == 0:
            row = evaluate_now()
            if stop_when is not None and stop_when(row):
                break
    if not rows or rows[-1]["env_step"] != state.env_step:
        evaluate_now()
    if metrics_path is not None:
        write_metrics(metrics_path, rows)
    if timing_path is not None:
        write_metrics(timing_path, rows, TIMING_COLUMNS)
    return rows, state


def write_metrics(path: str | Path, rows: list[dict], columns=METRIC_COLUMNS) -> None:
    atomic_write_csv(path, columns, ([r[c] for c in columns] for r in rows))
