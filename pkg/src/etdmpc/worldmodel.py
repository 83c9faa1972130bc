"""Latent world model: encoder, dynamics ensemble, reward head, value ensemble, policy prior.

All networks are small numpy MLPs with hand-written backward passes.  Hidden
layers are ``Linear -> LayerNorm (no affine) -> SiLU``; everything is smooth so
finite-difference gradient checks stay tight in float64.

Array conventions: latents ``z`` have shape ``(..., latent_dim)`` and actions
``(..., action_dim)``.  Ensemble networks store weights as ``(E, in, out)`` and
consume inputs shaped ``(E, N, in)``.  Head indices are 0-based.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "etdmpc-checkpoint/1"
LN_EPS = 1e-5

Params = dict[str, np.ndarray]


class NonFiniteError(FloatingPointError):
    """A loss, gradient or intermediate quantity is NaN/inf."""


# ---------------------------------------------------------------------------
# SimNorm and scalar transforms
# ---------------------------------------------------------------------------


def simnorm(x: np.ndarray, group: int = 8) -> np.ndarray:
    """Softmax inside each contiguous group of ``group`` entries of the last axis."""
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    if x.shape[-1] % group:
        raise ValueError(f"last dimension {x.shape[-1]} is not divisible by simnorm group {group}")
    shape = x.shape
    g = x.reshape(*shape[:-1], shape[-1] // group, group)
    g = np.exp(g - g.max(axis=-1, keepdims=True))
    g /= g.sum(axis=-1, keepdims=True)
    return g.reshape(shape)


def simnorm_backward(out: np.ndarray, dout: np.ndarray, group: int = 8) -> np.ndarray:
    shape = out.shape
    s = out.reshape(*shape[:-1], shape[-1] // group, group)
    d = dout.reshape(s.shape)
    dx = s * (d - (s * d).sum(axis=-1, keepdims=True))
    return dx.reshape(shape)


def symlog(x):
    return np.sign(x) * np.log1p(np.abs(x))


def symexp(x):
    return np.sign(x) * np.expm1(np.abs(x))


def softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# Two-hot codec
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TwoHotCodec:
    """Scalars <-> probability vectors on a uniform bin grid.

    Encoding spreads mass linearly over the two neighbouring bins, so decoding
    (the expectation under the bin grid) inverts it exactly inside the range.
    """

    num_bins: int = 101
    v_min: float = -10.0
    v_max: float = 10.0

    def __post_init__(self):
        if self.num_bins < 2 or not self.v_max > self.v_min:
            raise ValueError("two-hot codec needs num_bins >= 2 and v_max > v_min")

    @property
    def bins(self) -> np.ndarray:
        return np.linspace(self.v_min, self.v_max, self.num_bins)

    @property
    def bin_width(self) -> float:
        return (self.v_max - self.v_min) / (self.num_bins - 1)

    def encode(self, v) -> np.ndarray:
        v = np.clip(np.asarray(v, dtype=np.float64), self.v_min, self.v_max)
        pos = (v - self.v_min) * ((self.num_bins - 1) / (self.v_max - self.v_min))
        lo = np.clip(np.floor(pos).astype(np.int64), 0, self.num_bins - 2)
        frac = pos - lo
        out = np.zeros(v.shape + (self.num_bins,))
        np.put_along_axis(out, lo[..., None], (1.0 - frac)[..., None], axis=-1)
        np.put_along_axis(out, lo[..., None] + 1, frac[..., None], axis=-1)
        return out

    def decode(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        if p.shape[-1] != self.num_bins:
            raise ValueError(f"expected {self.num_bins} bins, got {p.shape[-1]}")
        total = p.sum(axis=-1, keepdims=True)
        if log.isEnabledFor(logging.DEBUG) and not np.allclose(total, 1.0):
            log.debug("two-hot decode renormalised a vector summing to %s", total.ravel()[:4])
        return (p / total) @ self.bins

    def decode_logits(self, logits) -> np.ndarray:
        return softmax(np.asarray(logits, dtype=np.float64)) @ self.bins


# ---------------------------------------------------------------------------
# MLP forward / backward
# ---------------------------------------------------------------------------


def init_mlp(rng: np.random.Generator, sizes: list[int], ensemble: int | None = None) -> Params:
    """Uniform fan-in init, zero biases.  Keys are ``w0, b0, w1, b1, ...``."""
    p: Params = {}
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(n_in)
        if ensemble is None:
            p[f"w{k}"] = rng.uniform(-bound, bound, size=(n_in, n_out))
            p[f"b{k}"] = np.zeros(n_out)
        else:
            p[f"w{k}"] = rng.uniform(-bound, bound, size=(ensemble, n_in, n_out))
            p[f"b{k}"] = np.zeros((ensemble, 1, n_out))
    return p


def _n_layers(p: Mapping[str, np.ndarray]) -> int:
    return sum(1 for k in p if k.startswith("w"))


def _affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if w.ndim == 2:
        lead = x.shape[:-1]
        return (x.reshape(-1, x.shape[-1]) @ w + b).reshape(*lead, w.shape[1])
    if x.ndim == 2:
        # one input shared by every ensemble member: a single wide matmul
        E, n_in, n_out = w.shape
        y = x @ w.transpose(1, 0, 2).reshape(n_in, E * n_out)
        return np.ascontiguousarray(y.reshape(x.shape[0], E, n_out).transpose(1, 0, 2)) + b
    return np.matmul(np.ascontiguousarray(x), w) + b


def mlp_forward(p: Mapping[str, np.ndarray], x: np.ndarray, keep: bool = False):
    """Returns ``out`` or ``(out, cache)`` when ``keep``.

    Ensemble weights ``(E, in, out)`` accept ``(E, N, in)`` inputs or a shared
    ``(N, in)`` input.
    """
    n = _n_layers(p)
    if not keep:
        for k in range(n - 1):
            h = _affine(x, p[f"w{k}"], p[f"b{k}"])
            width = h.shape[-1]
            h -= h.sum(axis=-1, keepdims=True) * (1.0 / width)
            var = np.einsum("...i,...i->...", h, h)[..., None] * (1.0 / width)
            h *= 1.0 / np.sqrt(var + LN_EPS)
            sig = np.negative(h)
            np.exp(sig, out=sig)
            sig += 1.0
            h /= sig
            x = h
        return _affine(x, p[f"w{n - 1}"], p[f"b{n - 1}"])
    cache = []
    for k in range(n - 1):
        pre = _affine(x, p[f"w{k}"], p[f"b{k}"])
        c = pre - pre.mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt((c * c).mean(axis=-1, keepdims=True) + LN_EPS)
        y = c * inv
        sig = 1.0 / (1.0 + np.exp(-y))
        cache.append((x, y, inv, sig))
        x = y * sig
    out = _affine(x, p[f"w{n - 1}"], p[f"b{n - 1}"])
    cache.append(x)
    return out, cache


def _linear_backward(x: np.ndarray, dout: np.ndarray, w: np.ndarray, need_dx: bool = True):
    """Gradients of ``x @ w + b``; handles the same input layouts as :func:`_affine`."""
    dx = None
    if w.ndim == 2:
        x2 = x.reshape(-1, x.shape[-1])
        d2 = dout.reshape(-1, dout.shape[-1])
        dw, db = x2.T @ d2, d2.sum(axis=0)
        if need_dx:
            dx = (d2 @ w.T).reshape(x.shape)
        return dx, dw, db
    db = dout.sum(axis=-2, keepdims=True)
    if x.ndim == 2:
        E, n_in, n_out = w.shape
        dcat = dout.transpose(1, 0, 2).reshape(x.shape[0], E * n_out)
        dw = (x.T @ dcat).reshape(n_in, E, n_out).transpose(1, 0, 2)
        if need_dx:
            dx = dcat @ w.transpose(0, 2, 1).reshape(E * n_out, n_in)
        return dx, dw, db
    dw = np.matmul(np.swapaxes(x, -1, -2), dout)
    if need_dx:
        dx = np.matmul(dout, np.swapaxes(w, -1, -2))
    return dx, dw, db


def mlp_backward(p: Mapping[str, np.ndarray], cache, dout: np.ndarray, need_dx: bool = True):
    """Backpropagate ``dout`` through a cached forward pass.  Returns ``(dx, grads)``."""
    n = _n_layers(p)
    grads: Params = {}
    dx, grads[f"w{n - 1}"], grads[f"b{n - 1}"] = _linear_backward(cache[-1], dout, p[f"w{n - 1}"])
    for k in range(n - 2, -1, -1):
        x, y, inv, sig = cache[k]
        dy = dx * (sig * (1.0 + y * (1.0 - sig)))
        dpre = inv * (dy - dy.mean(axis=-1, keepdims=True) - y * (dy * y).mean(axis=-1, keepdims=True))
        dx, grads[f"w{k}"], grads[f"b{k}"] = _linear_backward(x, dpre, p[f"w{k}"], need_dx=k > 0 or need_dx)
    return dx, grads


def sub_params(params: Mapping[str, np.ndarray], prefix: str) -> Params:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def add_prefix(grads: Mapping[str, np.ndarray], prefix: str) -> Params:
    return {f"{prefix}.{k}": v for k, v in grads.items()}


# ---------------------------------------------------------------------------
# Policy distribution
# ---------------------------------------------------------------------------


@dataclass
class PolicyDistribution:
    """Diagonal Gaussian in pre-squash space; samples are squashed by tanh."""

    mean: np.ndarray
    log_std: np.ndarray

    @classmethod
    def from_raw(cls, mean, raw_log_std, log_std_min: float = -3.0, log_std_max: float = 1.0):
        return cls(np.asarray(mean, dtype=np.float64),
                   np.clip(np.asarray(raw_log_std, dtype=np.float64), log_std_min, log_std_max))

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    @property
    def mean_action(self) -> np.ndarray:
        return np.tanh(self.mean)

    def rsample(self, eps: np.ndarray) -> np.ndarray:
        return np.tanh(self.mean + self.std * eps)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.rsample(rng.standard_normal(self.mean.shape))

    def log_prob(self, action) -> np.ndarray:
        a = np.clip(np.asarray(action, dtype=np.float64), -1 + 1e-6, 1 - 1e-6)
        u = np.arctanh(a)
        z = (u - self.mean) / self.std
        logp = -0.5 * z * z - self.log_std - 0.5 * np.log(2 * np.pi) - np.log1p(-a * a)
        return logp.sum(axis=-1)

    def entropy(self) -> np.ndarray:
        """Entropy of the pre-squash Gaussian."""
        return (self.log_std + 0.5 * np.log(2 * np.pi * np.e)).sum(axis=-1)


# ---------------------------------------------------------------------------
# Model protocol and the learned model
# ---------------------------------------------------------------------------


class LatentModel:
    """Interface consumed by return estimation and planning.

    Subclasses provide the single-head primitives; the batched helpers have
    generic fallbacks that loop over heads.
    """

    num_dynamics: int = 1
    num_values: int = 1
    action_dim: int = 1

    def encode(self, obs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def dynamics_step(self, z: np.ndarray, a: np.ndarray, head: int) -> np.ndarray:
        raise NotImplementedError

    def predict_reward(self, z: np.ndarray, a: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def predict_value(self, z: np.ndarray, head: int, use_target: bool = False) -> np.ndarray:
        raise NotImplementedError

    def policy_prior(self, z: np.ndarray) -> PolicyDistribution:
        raise NotImplementedError

    def step_all(self, zs: np.ndarray, a: np.ndarray) -> np.ndarray:
        """``zs`` has a leading head axis of size ``num_dynamics``."""
        return np.stack([self.dynamics_step(zs[i], a, i) for i in range(self.num_dynamics)])

    def values_all(self, z: np.ndarray, use_target: bool = False) -> np.ndarray:
        """Value of every head; output gains a leading axis of size ``num_values``."""
        return np.stack([self.predict_value(z, j, use_target) for j in range(self.num_values)])

    def _check_dynamics_head(self, head: int):
        if not 0 <= head < self.num_dynamics:
            raise IndexError(f"dynamics head {head} out of range [0, {self.num_dynamics})")

    def _check_value_head(self, head: int):
        if not 0 <= head < self.num_values:
            raise IndexError(f"value head {head} out of range [0, {self.num_values})")


@dataclass
class ModelConfig:
    obs_dim: int
    action_dim: int
    latent_dim: int = 64
    hidden_dim: int = 128
    enc_dim: int = 128
    mlp_layers: int = 2
    simnorm_dim: int = 8
    num_dynamics: int = 4
    num_values: int = 2
    num_bins: int = 101
    v_min: float = -10.0
    v_max: float = 10.0
    log_std_min: float = -3.0
    log_std_max: float = 1.0
    # precision of no-grad forward passes (planning, acting, targets); see TrainConfig.compute_dtype for training
    inference_dtype: str = "float32"
    # reward/value heads regress symlog(target) on the two-hot grid
    symlog: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.num_dynamics < 1 or self.num_values < 1:
            raise ValueError("need at least one dynamics head and one value head")
        if self.latent_dim % self.simnorm_dim:
            raise ValueError("latent_dim must be a multiple of simnorm_dim")

    @property
    def codec(self) -> TwoHotCodec:
        return TwoHotCodec(self.num_bins, self.v_min, self.v_max)


def init_params(cfg: ModelConfig, seed: int | None = None) -> Params:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    D, A, Hd = cfg.latent_dim, cfg.action_dim, cfg.hidden_dim
    hidden = [Hd] * cfg.mlp_layers
    nets = {
        "enc": init_mlp(rng, [cfg.obs_dim, cfg.enc_dim, D]),
        "dyn": init_mlp(rng, [D + A, *hidden, D], ensemble=cfg.num_dynamics),
        "rew": init_mlp(rng, [D + A, *hidden, cfg.num_bins]),
        "val": init_mlp(rng, [D, *hidden, cfg.num_bins], ensemble=cfg.num_values),
        "pi": init_mlp(rng, [D, *hidden, 2 * A]),
    }
    params: Params = {}
    for name, p in nets.items():
        params.update(add_prefix(p, name))
    params.update({k.replace("val.", "val_tgt.", 1): v.copy() for k, v in params.items() if k.startswith("val.")})
    return params


def is_target_key(key: str) -> bool:
    return key.startswith("val_tgt.")


class WorldModel(LatentModel):
    """Learned latent model.  Parameters are treated as an immutable snapshot."""

    def __init__(self, config: ModelConfig, params: Params | None = None):
        self.config = config
        self.params = init_params(config) if params is None else params
        self.codec = config.codec
        self.num_dynamics = config.num_dynamics
        self.num_values = config.num_values
        self.action_dim = config.action_dim
        self.dtype = np.dtype(config.inference_dtype)
        self._nets = {name: {k: v.astype(self.dtype) for k, v in sub_params(self.params, name).items()}
                      for name in ("enc", "dyn", "rew", "val", "val_tgt", "pi")}
        self._bins = self.codec.bins.astype(self.dtype)

    def with_params(self, params: Params) -> "WorldModel":
        return WorldModel(self.config, params)

    def copy(self) -> "WorldModel":
        return self.with_params({k: v.copy() for k, v in self.params.items()})

    # scalar heads --------------------------------------------------------
    def _decode(self, logits: np.ndarray) -> np.ndarray:
        e = logits - logits.max(axis=-1, keepdims=True)
        np.exp(e, out=e)
        v = (e @ self._bins) / e.sum(axis=-1)
        return symexp(v) if self.config.symlog else v

    def scalar_to_probs(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        return self.codec.encode(symlog(v) if self.config.symlog else v)

    # primitives ----------------------------------------------------------
    def encode(self, obs):
        obs = np.asarray(obs, dtype=self.dtype)
        if obs.shape[-1] != self.config.obs_dim:
            raise ValueError(f"observation dim {obs.shape[-1]} != encoder input {self.config.obs_dim}")
        return simnorm(mlp_forward(self._nets["enc"], obs), self.config.simnorm_dim)

    def _za(self, z, a):
        z = np.asarray(z, dtype=self.dtype)
        a = np.asarray(a, dtype=self.dtype)
        if z.shape[-1] != self.config.latent_dim or a.shape[-1] != self.action_dim:
            raise ValueError("latent/action dimension mismatch")
        shape = np.broadcast_shapes(z.shape[:-1], a.shape[:-1])
        return np.concatenate([np.broadcast_to(z, shape + z.shape[-1:]),
                               np.broadcast_to(a, shape + a.shape[-1:])], axis=-1)

    def _ensemble_head(self, net: str, head: int) -> Params:
        return {k: v[head] for k, v in self._nets[net].items()}

    def dynamics_step(self, z, a, head):
        self._check_dynamics_head(head)
        za = self._za(z, a)
        out = mlp_forward(self._ensemble_head("dyn", head), za)
        return simnorm(out, self.config.simnorm_dim)

    def step_all(self, zs, a):
        E = self.num_dynamics
        zs = np.asarray(zs)
        if zs.ndim < 2 or zs.shape[0] != E:
            raise ValueError("step_all expects a leading head axis")
        if zs.strides[0] == 0 and np.ndim(a) < zs.ndim:
            # all heads start from the same latent: feed one shared input
            za = self._za(zs[0], a)
            batch = za.shape[:-1]
            out = mlp_forward(self._nets["dyn"], za.reshape(-1, za.shape[-1]))
            return simnorm(out, self.config.simnorm_dim).reshape(E, *batch, -1)
        za = self._za(zs, a)
        batch = za.shape[1:-1]
        out = mlp_forward(self._nets["dyn"], za.reshape(E, -1, za.shape[-1]))
        return simnorm(out, self.config.simnorm_dim).reshape(E, *batch, -1)

    def predict_reward(self, z, a):
        return self._decode(mlp_forward(self._nets["rew"], self._za(z, a)))

    def predict_value(self, z, head, use_target=False):
        self._check_value_head(head)
        net = "val_tgt" if use_target else "val"
        p = {k: v[head] for k, v in self._nets[net].items()}
        return self._decode(mlp_forward(p, np.asarray(z, dtype=self.dtype)))

    def values_all(self, z, use_target=False):
        z = np.asarray(z, dtype=self.dtype)
        E = self.num_values
        out = mlp_forward(self._nets["val_tgt" if use_target else "val"], z.reshape(-1, z.shape[-1]))
        return self._decode(out).reshape(E, *z.shape[:-1])

    def policy_prior(self, z):
        out = mlp_forward(self._nets["pi"], np.asarray(z, dtype=self.dtype))
        A = self.action_dim
        return PolicyDistribution.from_raw(out[..., :A], out[..., A:],
                                           self.config.log_std_min, self.config.log_std_max)

    # checkpoints ---------------------------------------------------------
    def save(self, path: str | Path) -> None:
        from etdmpc._io import atomic_write_text

        doc = {
            "format": CHECKPOINT_FORMAT,
            "config": asdict(self.config),
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params.items()},
        }
        atomic_write_text(path, json.dumps(doc))

    @classmethod
    def load(cls, path: str | Path) -> "WorldModel":
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
        cfg = ModelConfig(**doc["config"])
        params = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["params"].items()}
        return cls(cfg, params)


def ema_update(params: Params, tau: float) -> Params:
    """New snapshot with ``val_tgt <- (1 - tau) * val_tgt + tau * val``."""
    out = dict(params)
    for k, v in params.items():
        if is_target_key(k):
            online = params["val." + k[len("val_tgt."):]]
            out[k] = (1.0 - tau) * v + tau * online
    return out


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

LossFn = Callable[[Params], "tuple[float, Params]"]


def gradient(params: Params, loss_fn: LossFn) -> Params:
    """Evaluate an analytic ``loss_fn(params) -> (loss, grads)`` and validate it.

    Missing keys in the returned gradient are treated as zero.
    """
    loss, grads = loss_fn(params)
    if not np.isfinite(loss):
        raise NonFiniteError(f"loss is not finite: {loss}")
    full: Params = {}
    for k, v in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(v)
        elif g.shape != v.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {v.shape} for {k}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in {k}")
        full[k] = g
    return full


def check_gradient(params: Params, loss_fn: LossFn, num_coords: int = 64,
                   rng: np.random.Generator | None = None, eps: float = 1e-6,
                   keys: list[str] | None = None, floor: float = 1e-7):
    """Compare analytic gradients against central differences on random coordinates.

    Returns ``(max_relative_error, records)`` where each record is
    ``(key, flat_index, analytic, numeric)``.  The relative error uses
    ``max(|analytic|, |numeric|, floor)`` as denominator.
    """
    rng = rng or np.random.default_rng(0)
    grads = gradient(params, loss_fn)
    keys = [k for k in (keys or list(params)) if params[k].size]
    sizes = np.array([params[k].size for k in keys], dtype=float)
    records = []
    worst = 0.0
    for _ in range(num_coords):
        k = keys[rng.choice(len(keys), p=sizes / sizes.sum())]
        idx = int(rng.integers(params[k].size))
        base = params[k]
        vals = []
        for sign in (1.0, -1.0):
            bumped = base.copy()
            bumped.ravel()[idx] += sign * eps
            vals.append(loss_fn({**params, k: bumped})[0])
        numeric = (vals[0] - vals[1]) / (2 * eps)
        analytic = grads[k].ravel()[idx]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, rel)
        records.append((k, idx, analytic, numeric))
    return worst, records


@dataclass
class Action:
    """An action vector clamped componentwise to [-1, 1]."""

    values: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def __post_init__(self):
        self.values = np.clip(np.asarray(self.values, dtype=np.float64), -1.0, 1.0)
