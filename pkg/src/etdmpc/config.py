"""Training/run configuration, named presets, and JSON (de)serialisation.

JSON documents use the dataclass field names below; unknown keys are errors.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from etdmpc.planner import PlannerConfig, reanalyze_config
from etdmpc.returns import AggregateHorizon, EnsembleMean, ObjectiveMode, Pessimistic, SingleHead


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    utd: int = 4
    reanalyze_interval: int = 2
    batch_size: int = 64
    learning_rate: float = 3e-4
    encoder_lr_scale: float = 0.3
    grad_clip_norm: float = 20.0
    tau_ema: float = 0.01
    rho: float = 0.5
    entropy_coeff: float = 1e-4
    gamma_min: float = 0.95
    gamma_max: float = 0.995
    beta: float = 0.0
    seed: int = 0
    train_horizon: int = 3
    total_steps: int = 30_000
    seed_steps: int = 1_000
    buffer_capacity: int = 100_000
    buffer_mode: str = "per_step"
    reanalyze: bool = True
    reanalyze_batch: int = 20
    reanalyze_start: int = 1_000
    eval_interval: int = 2_000
    eval_episodes: int = 5
    value_target_heads: str = "all"
    bootstrap_ensemble: bool = False
    consistency_coef: float = 20.0
    reward_coef: float = 0.1
    value_coef: float = 0.1
    policy_coef: float = 1.0
    # precision of the loss forward/backward; Adam state and master params stay float64
    compute_dtype: str = "float32"

    def __post_init__(self):
        if self.utd < 0:
            raise ConfigError("utd must be >= 0 (0 is a no-training debug mode)")
        if self.reanalyze_interval < 1:
            raise ConfigError("reanalyze_interval must be >= 1")
        if not 0 < self.rho <= 1:
            raise ConfigError("rho must lie in (0, 1]")
        if not 0 < self.gamma_min <= self.gamma_max < 1:
            raise ConfigError("need 0 < gamma_min <= gamma_max < 1")
        if self.buffer_mode not in ("per_step", "per_episode"):
            raise ConfigError(f"unknown buffer_mode {self.buffer_mode!r}")
        if self.value_target_heads not in ("all", "first"):
            raise ConfigError("value_target_heads must be 'all' or 'first'")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.compute_dtype not in ("float32", "float64"):
            raise ConfigError("compute_dtype must be 'float32' or 'float64'")

    @property
    def loss_coefs(self) -> dict:
        return {"consistency": self.consistency_coef, "reward": self.reward_coef,
                "value": self.value_coef, "policy": self.policy_coef}


MODEL_KEYS = ("latent_dim", "hidden_dim", "enc_dim", "mlp_layers", "simnorm_dim", "num_dynamics",
              "num_values", "num_bins", "v_min", "v_max", "log_std_min", "log_std_max", "symlog",
              "inference_dtype")


@dataclass
class RunConfig:
    env: str = "pendulum"
    episode_length: int = 500
    model: dict = field(default_factory=lambda: {"num_dynamics": 4, "num_values": 2})
    train: TrainConfig = field(default_factory=TrainConfig)
    acting: PlannerConfig = field(default_factory=PlannerConfig)
    reanalyze: PlannerConfig = field(default_factory=lambda: reanalyze_config(beta=0.0))
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "runs"

    def __post_init__(self):
        unknown = set(self.model) - set(MODEL_KEYS)
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")


def discount_for_episode_length(length: int, gamma_min: float = 0.95, gamma_max: float = 0.995) -> float:
    if length < 1:
        raise ValueError("episode length must be >= 1")
    return float(min(max(1.0 - 5.0 / length, gamma_min), gamma_max))


# ---------------------------------------------------------------------------
# Objective (de)serialisation
# ---------------------------------------------------------------------------


def objective_to_dict(mode: ObjectiveMode) -> dict:
    if isinstance(mode, AggregateHorizon):
        return {"mode": "aggregate"}
    if isinstance(mode, EnsembleMean):
        return {"mode": "ensemble_mean", "depth": mode.depth}
    if isinstance(mode, Pessimistic):
        return {"mode": "pessimistic", "beta": mode.beta, "depth": mode.depth}
    if isinstance(mode, SingleHead):
        return {"mode": "single_head", "dynamics": mode.dynamics, "value": mode.value, "depth": mode.depth}
    raise ConfigError(f"cannot serialise objective {mode!r}")


def objective_from_dict(d: dict) -> ObjectiveMode:
    d = dict(d)
    kind = d.pop("mode", None)
    table = {"aggregate": AggregateHorizon, "ensemble_mean": EnsembleMean,
             "pessimistic": Pessimistic, "single_head": SingleHead}
    if kind not in table:
        raise ConfigError(f"unknown objective mode {kind!r}")
    try:
        return table[kind](**d)
    except TypeError as e:
        raise ConfigError(f"bad objective fields for {kind}: {e}") from None


def _planner_to_dict(p: PlannerConfig) -> dict:
    d = asdict(p)
    d["objective"] = objective_to_dict(p.objective)
    return d


def _strict(cls, data: dict, section: str):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")
    return data


def _planner_from_dict(d: dict, base: PlannerConfig, section: str) -> PlannerConfig:
    d = dict(_strict(PlannerConfig, d, section))
    if "objective" in d:
        d["objective"] = objective_from_dict(d["objective"])
    return replace(base, **d)


def run_config_to_dict(rc: RunConfig) -> dict:
    return {"env": rc.env, "episode_length": rc.episode_length, "model": dict(rc.model),
            "train": asdict(rc.train), "acting": _planner_to_dict(rc.acting),
            "reanalyze": _planner_to_dict(rc.reanalyze), "seeds": list(rc.seeds), "out": rc.out}


def run_config_from_dict(d: dict, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    _strict(RunConfig, d, "run config")
    try:
        train = replace(base.train, **_strict(TrainConfig, d.get("train", {}), "train"))
        acting = _planner_from_dict(d.get("acting", {}), base.acting, "acting")
        rean = _planner_from_dict(d.get("reanalyze", {}), base.reanalyze, "reanalyze")
        model = {**base.model, **d.get("model", {})}
        return RunConfig(env=d.get("env", base.env), episode_length=d.get("episode_length", base.episode_length),
                         model=model, train=train, acting=acting, reanalyze=rean,
                         seeds=list(d.get("seeds", base.seeds)), out=d.get("out", base.out))
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def load_run_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    return run_config_from_dict(json.loads(Path(path).read_text()), base)


def dump_run_config(rc: RunConfig) -> str:
    return json.dumps(run_config_to_dict(rc), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

# pessimism used on each toy task; both are dense-reward DMC-style tasks
ENV_BETA = {"pendulum": 0.0, "pointmass": 0.0}

BIG_REANALYZE = dict(num_samples=512, num_elites=64, num_policy_trajectories=24)
SMALL_REANALYZE = dict(num_samples=64, num_elites=8, num_policy_trajectories=3)


def preset(name: str, env: str = "pendulum") -> RunConfig:
    beta = ENV_BETA.get(env, 0.0)
    if name in ("efficienttdmpc-utd4", "efficienttdmpc-utd2", "efficienttdmpc-utd1"):
        utd = int(name[-1])
        interval = {4: 2, 2: 5, 1: 10}[utd]
        return RunConfig(env=env, model={"num_dynamics": 4, "num_values": 2},
                         train=TrainConfig(utd=utd, reanalyze_interval=interval, beta=beta, buffer_mode="per_step"),
                         acting=PlannerConfig(horizon=6, objective=AggregateHorizon()),
                         reanalyze=reanalyze_config(beta=beta, **SMALL_REANALYZE))
    if name == "bmpc-like":
        return RunConfig(env=env, model={"num_dynamics": 1, "num_values": 2},
                         train=TrainConfig(utd=1, reanalyze_interval=10, beta=0.0, buffer_mode="per_episode"),
                         acting=PlannerConfig(horizon=3, objective=EnsembleMean()),
                         reanalyze=reanalyze_config(beta=0.0, **BIG_REANALYZE))
    raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")


PRESETS = ("efficienttdmpc-utd4", "efficienttdmpc-utd2", "efficienttdmpc-utd1", "bmpc-like")


# Smaller nets and acting budget that keep the end-to-end runs inside a desk
# CPU time budget.  Horizon, objective, ensemble sizes and reanalyze budget are
# left as configured.
DESK_MODEL = {"latent_dim": 32, "hidden_dim": 64, "enc_dim": 64}
DESK_ACTING = dict(num_samples=64, num_elites=8, num_policy_trajectories=8, iterations=4)


def desk_scale(rc: RunConfig) -> RunConfig:
    return replace(rc, model={**rc.model, **DESK_MODEL}, acting=replace(rc.acting, **DESK_ACTING))
