"""Training losses for the world model with analytic gradients.

``model_loss`` runs one forward pass over a time-major batch and backpropagates
the weighted sum of the four terms:

* consistency: every dynamics head unrolled from the encoded first observation
  along the stored actions, squared error to the encoded next observations
  (the encoded targets carry no gradient);
* reward: two-hot cross-entropy of the reward head along each head's rollout;
* value: two-hot cross-entropy of every online value head on encoded latents
  against precomputed (gradient-free) targets;
* policy: KL(stored planner Gaussian || policy) in pre-squash space, minus an
  entropy bonus, on detached latents.

Depth ``u`` is weighted ``rho**u`` and every term is averaged over depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from etdmpc.worldmodel import (
    ModelConfig,
    Params,
    add_prefix,
    log_softmax,
    mlp_backward,
    mlp_forward,
    simnorm,
    simnorm_backward,
    softmax,
    sub_params,
    symlog,
)

TERMS = ("consistency", "reward", "value", "policy")


@dataclass
class LossBatch:
    """Time-major training batch; ``T`` is the unroll horizon."""

    obs: np.ndarray          # (T+1, B, obs_dim)
    action: np.ndarray       # (T, B, A)
    reward: np.ndarray       # (T, B)
    value_target: np.ndarray  # (T, B) scalar targets, no gradient
    target_mean: np.ndarray  # (T, B, A) stored planner mean, action space
    target_std: np.ndarray   # (T, B, A)
    head_weights: np.ndarray | None = None  # (N_f, B) bootstrap counts; None -> shared batch
    next_latent: np.ndarray | None = None   # (T, B, D) fixed consistency targets; None -> encode obs[1:]


DEFAULT_COEFS = {"consistency": 20.0, "reward": 0.1, "value": 0.1, "policy": 1.0}


def pre_squash_target(mean, std, log_std_min: float, log_std_max: float):
    """Map an action-space Gaussian to the policy's pre-tanh space (first-order)."""
    m = np.clip(mean, -0.999, 0.999)
    mu = np.arctanh(m)
    log_std = np.clip(np.log(std) - np.log1p(-m * m), log_std_min, log_std_max)
    return mu, log_std


def gaussian_kl(mu_t, log_std_t, mu, log_std):
    """KL(N(mu_t, e^{2 log_std_t}) || N(mu, e^{2 log_std})), summed over the last axis."""
    var_t = np.exp(2 * log_std_t)
    var = np.exp(2 * log_std)
    kl = log_std - log_std_t + (var_t + (mu_t - mu) ** 2) / (2 * var) - 0.5
    return kl.sum(axis=-1)


def _ce(logits, target_probs):
    """Per-row cross-entropy and its gradient w.r.t. logits (per unit weight)."""
    lsm = log_softmax(logits)
    return -(target_probs * lsm).sum(axis=-1), softmax(logits) - target_probs


def model_loss(params: Params, batch: LossBatch, cfg: ModelConfig, rho: float = 0.5,
               entropy_coeff: float = 1e-4, coefs: dict | None = None, need_grad: bool = True):
    """Returns ``(total, grads, terms)``; ``terms`` maps each loss name to its unweighted value."""
    coefs = {**DEFAULT_COEFS, **(coefs or {})}
    codec = cfg.codec
    to_bins = (lambda v: codec.encode(symlog(v))) if cfg.symlog else codec.encode
    G = cfg.simnorm_dim
    T, B = batch.action.shape[:2]
    Nf, Nv, D, A = cfg.num_dynamics, cfg.num_values, cfg.latent_dim, cfg.action_dim
    w_depth = rho ** np.arange(T) / T
    hw = np.ones((Nf, B)) if batch.head_weights is None else batch.head_weights

    enc, dyn, rew = sub_params(params, "enc"), sub_params(params, "dyn"), sub_params(params, "rew")
    val, pi = sub_params(params, "val"), sub_params(params, "pi")

    # encoder
    obs = batch.obs.reshape(-1, batch.obs.shape[-1])
    enc_out, enc_cache = mlp_forward(enc, obs, keep=True)
    Z = simnorm(enc_out, G).reshape(T + 1, B, D)

    # consistency targets are constants: letting gradient reach them lets the
    # encoder drop whatever the dynamics find hard to predict (e.g. the action effect)
    Z_next = Z[1:] if batch.next_latent is None else batch.next_latent

    # dynamics/reward unroll
    zh = np.broadcast_to(Z[0], (Nf, B, D))
    cons = rew_loss = 0.0
    steps = []
    for u in range(T):
        a = np.broadcast_to(batch.action[u], (Nf, B, A))
        za = np.concatenate([zh, a], axis=-1)
        r_logits, r_cache = mlp_forward(rew, za.reshape(Nf * B, D + A), keep=True)
        ce, dlogit = _ce(r_logits, to_bins(np.broadcast_to(batch.reward[u], (Nf, B)).reshape(-1)))
        wr = (hw / (Nf * B)).reshape(-1) * w_depth[u]
        rew_loss += (wr * ce).sum()
        pre, d_cache = mlp_forward(dyn, za, keep=True)
        nxt = simnorm(pre, G)
        diff = nxt - Z_next[u]
        wc = hw[:, :, None] * (w_depth[u] / (Nf * B * D))
        cons += (wc * diff * diff).sum()
        steps.append((r_cache, dlogit * wr[:, None], d_cache, nxt, 2 * wc * diff))
        zh = nxt

    # value heads on encoded latents
    v_logits, v_cache = mlp_forward(val, Z[:T].reshape(T * B, D), keep=True)
    ce_v, dv = _ce(v_logits, to_bins(batch.value_target.reshape(-1))[None])
    wv = np.repeat(w_depth, B) / (Nv * B)
    val_loss = (ce_v * wv).sum()

    # policy on detached latents
    p_out, p_cache = mlp_forward(pi, Z[:T], keep=True)
    mu, raw = p_out[..., :A], p_out[..., A:]
    log_std = np.clip(raw, cfg.log_std_min, cfg.log_std_max)
    mu_t, ls_t = pre_squash_target(batch.target_mean, batch.target_std, cfg.log_std_min, cfg.log_std_max)
    kl = gaussian_kl(mu_t, ls_t, mu, log_std)  # (T, B)
    ent = (log_std + 0.5 * np.log(2 * np.pi * np.e)).sum(axis=-1)
    wp = w_depth[:, None] / B
    kl_loss = (wp * kl).sum()
    ent_mean = (wp * ent).sum()
    pol_loss = kl_loss - entropy_coeff * ent_mean

    terms = {"consistency": cons, "reward": rew_loss, "value": val_loss, "policy": pol_loss,
             "policy_kl": kl_loss, "policy_entropy": ent_mean}
    total = sum(coefs[k] * terms[k] for k in TERMS)
    if not need_grad:
        return total, None, terms

    grads: Params = {}

    def acc(prefix, g):
        for k, v in g.items():
            key = f"{prefix}.{k}"
            grads[key] = grads[key] + v if key in grads else v

    dZ = np.zeros_like(Z)

    # policy
    c_p = coefs["policy"]
    var = np.exp(2 * log_std)
    var_t = np.exp(2 * ls_t)
    dmu = (mu - mu_t) / var
    dls = 1.0 - (var_t + (mu_t - mu) ** 2) / var - entropy_coeff
    inside = (raw > cfg.log_std_min) & (raw < cfg.log_std_max)
    dp_out = np.concatenate([dmu, dls * inside], axis=-1) * (c_p * wp[..., None])
    _, g = mlp_backward(pi, p_cache, dp_out, need_dx=False)
    acc("pi", g)

    # value
    dv_logits = dv * (coefs["value"] * wv)[None, :, None]
    dzv, g = mlp_backward(val, v_cache, dv_logits)
    acc("val", g)
    dZ[:T] += dzv.reshape(T, B, D)

    # unroll, back to front
    c_c, c_r = coefs["consistency"], coefs["reward"]
    dzh = np.zeros((Nf, B, D))
    for u in range(T - 1, -1, -1):
        r_cache, dlogit, d_cache, nxt, dcons = steps[u]
        dnxt = dzh + c_c * dcons
        dpre = simnorm_backward(nxt, dnxt, G)
        dza, g = mlp_backward(dyn, d_cache, dpre)
        acc("dyn", g)
        dza_r, g = mlp_backward(rew, r_cache, c_r * dlogit)
        acc("rew", g)
        dzh = dza[..., :D] + dza_r.reshape(Nf, B, D + A)[..., :D]
    dZ[0] += dzh.sum(axis=0)

    # encoder
    d_enc = simnorm_backward(Z.reshape(-1, D), dZ.reshape(-1, D), G)
    _, g = mlp_backward(enc, enc_cache, d_enc, need_dx=False)
    acc("enc", g)
    return total, grads, terms


def loss_closure(batch: LossBatch, cfg: ModelConfig, **kw):
    """Adapter for :func:`etdmpc.worldmodel.gradient` / ``check_gradient``."""
    def fn(params):
        total, grads, _ = model_loss(params, batch, cfg, **kw)
        return total, grads
    return fn


__all__ = ["LossBatch", "model_loss", "loss_closure", "gaussian_kl", "pre_squash_target", "TERMS",
           "DEFAULT_COEFS", "add_prefix"]
