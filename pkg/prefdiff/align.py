#!/usr/bin/env python3
# -*- coding: utf-8 -*-

""" Preference alignment of the planner

Direct preference optimization in noise-prediction form: for a pair (σ⁺, σ⁻) noised
with a shared step k and noise ε,

    δ(σ) = mse_θ(σ_k) - mse_ref(σ_k)
    logit = -T (δ(σ⁺) - δ(σ⁻)) + b
    L = -log sigmoid(logit) + μ (mse_θ(σ⁺) + mse_θ(σ⁻)) / 2

where mse is the masked noise-prediction error of the behavior-cloning loss. The
second term keeps the planner close to the offline data.

"""

__author__ = "prefdiff developers"
__date__ = "2024-10-06"


import logging
import types
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit
from tqdm.auto import tqdm

from .diffusion import batch_tensors, inpaint, make_loss_mask, masked_mse, predict_noise
from .diffusion import q_sample, schedule_for
from .errors import DivergenceError
from .gaitsim import STATE_DIM
from .ndcore import Adam, backward


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AlignConfig:
    """Alignment settings

    Attributes:
        temperature (float): T, scale of the error differences (> 0)
        bias (float): b, offset of the logit
        regularization (float): μ, weight of the behavior-cloning term (>= 0)
        learning_rate (float): Adam step size
        epochs (int): Passes over the pair set
        batch_size (int): Pairs per update
        logit_clamp (float): Logits are clamped to ± this value
        divergence_logit (float): Threshold of the mean absolute logit ...
        divergence_patience (int): ... exceeded for this many consecutive steps aborts
    """

    temperature: float = 500.0
    bias: float = 0.0
    regularization: float = 1.0
    learning_rate: float = 1e-4
    epochs: int = 20
    batch_size: int = 64
    logit_clamp: float = 30.0
    divergence_logit: float = 25.0
    divergence_patience: int = 100

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"Temperature must be positive, got {self.temperature}")
        if not self.regularization >= 0:
            raise ValueError(f"Regularization must be >= 0, got {self.regularization}")


@dataclass(frozen=True)
class ReferenceModel:
    """Read-only snapshot of the planner network taken before alignment"""

    net: object

    @classmethod
    def from_net(cls, net):
        net = net.copy()
        for p in net.parameters():
            p.setflags(write=False)
        return cls(net)


def _noised_pairs(schedule, pairs, stats, rng):
    """Winner and loser tensors noised with one shared (k, ε) per pair

    Returns:
        tuple: Stacked noisy tensors (2P, h+1, PLAN_DIM) with winners first, their
            conditions, steps and the shared noise
    """
    x_w = batch_tensors([p.winner for p in pairs], stats)
    x_l = batch_tensors([p.loser for p in pairs], stats)
    P = len(pairs)
    k = rng.integers(schedule.K, size=P)
    noise = rng.standard_normal(x_w.shape)

    x0 = np.concatenate([x_w, x_l])
    condition = x0[:, 0, :STATE_DIM]
    k2 = np.concatenate([k, k])
    noise2 = np.concatenate([noise, noise])
    x_k = inpaint(q_sample(schedule, x0, k2, noise2), condition)
    return x_k, condition, k2, noise2


def _errors(net, x_k, condition, k, noise, mask, embed_dim):
    flag = np.ones(len(x_k))
    inp, eps = predict_noise(net, x_k, condition, k, flag, embed_dim)
    err, d_err = masked_mse(noise, eps, mask)
    return inp, err, d_err


def _raw_logits(err, err_ref, cfg):
    P = len(err) // 2
    delta = err - err_ref
    return -cfg.temperature * (delta[:P] - delta[P:]) + cfg.bias


def dpo_loss(net, ref, schedule, pairs, stats, cfg, diffusion_cfg, rng, *, mask=None):
    """Preference loss with behavior-cloning regularization and its gradient

    Args:
        net (DenseNet): Planner network being aligned
        ref (ReferenceModel): Frozen reference network
        schedule (NoiseSchedule): Schedule
        pairs (PreferencePair | list[PreferencePair]): Labeled pairs
        stats (NormStats): Normalization statistics
        cfg (AlignConfig): Alignment settings
        diffusion_cfg (DiffusionConfig): Planner settings (horizon, embedding, action weight)
        rng (np.random.Generator): Draws k and ε per pair
        mask (np.ndarray | None): Loss weights, defaults to the planner's loss mask

    Returns:
        tuple[float, Gradients, dict]: Batch mean loss, gradients w.r.t. ``net`` and
            a dict with pref_loss, reg_loss, mean_logit, mean_abs_logit and clamped

    Raises:
        DivergenceError: on NaN logits or a non-finite loss
    """
    if not isinstance(pairs, (list, tuple)):
        pairs = [pairs]
    if mask is None:
        mask = make_loss_mask(diffusion_cfg.horizon, diffusion_cfg.action_loss_weight)
    P = len(pairs)
    x_k, condition, k, noise = _noised_pairs(schedule, pairs, stats, rng)
    embed = diffusion_cfg.embed_dim
    inp, err, d_err = _errors(net, x_k, condition, k, noise, mask, embed)
    _, err_ref, _ = _errors(ref.net, x_k, condition, k, noise, mask, embed)

    raw = _raw_logits(err, err_ref, cfg)
    if np.any(np.isnan(raw)):
        raise DivergenceError("NaN preference logit")
    c = cfg.logit_clamp
    active = np.abs(raw) <= c
    logit = np.clip(raw, -c, c)

    pref = -log_expit(logit)
    reg = (err[:P] + err[P:]) / 2
    mu = cfg.regularization
    loss = float(np.mean(pref + mu * reg))
    if not np.isfinite(loss):
        raise DivergenceError(f"Non-finite alignment loss {loss}")

    # d loss / d err per noised tensor, the reference branch is a constant
    d_logit = -expit(-logit) * active
    coef_w = (-cfg.temperature * d_logit + mu / 2) / P
    coef_l = (cfg.temperature * d_logit + mu / 2) / P
    coef = np.concatenate([coef_w, coef_l])
    grads = backward(net, inp, (coef[:, np.newaxis, np.newaxis] * d_err).reshape(2 * P, -1))

    info = dict(
        pref_loss=float(np.mean(pref)),
        reg_loss=float(np.mean(reg)),
        mean_logit=float(np.mean(logit)),
        mean_abs_logit=float(np.mean(np.abs(logit))),
        clamped=int(np.sum(~active)),
    )
    return loss, grads, info


def pair_logits(net, ref, schedule, pairs, stats, cfg, diffusion_cfg, rng):
    """Unclamped preference logits of pairs (no gradient)"""
    mask = make_loss_mask(diffusion_cfg.horizon, diffusion_cfg.action_loss_weight)
    x_k, condition, k, noise = _noised_pairs(schedule, pairs, stats, rng)
    embed = diffusion_cfg.embed_dim
    _, err, _ = _errors(net, x_k, condition, k, noise, mask, embed)
    _, err_ref, _ = _errors(ref.net, x_k, condition, k, noise, mask, embed)
    return _raw_logits(err, err_ref, cfg)


def mean_logit(net, ref, pairs, stats, cfg, diffusion_cfg, seed=0):
    """Mean logit over held-out pairs, evaluated with a fixed noise draw

    Positive values mean the network prefers the winners more than the reference does.
    """
    rng = np.random.default_rng(seed)
    schedule = schedule_for(diffusion_cfg)
    return float(np.mean(pair_logits(net, ref, schedule, pairs, stats, cfg, diffusion_cfg, rng)))


def align(net, pairs, cfg, rng, *, stats, diffusion_cfg, ref=None, progress=True):
    """Align a trained planner network on preference pairs

    The reference model is snapshotted before the first update. Every epoch visits the
    pairs in a fresh random order in batches of ``cfg.batch_size``.

    Args:
        net (DenseNet): Offline planner network (left unchanged)
        pairs (list[PreferencePair]): Labeled pairs
        cfg (AlignConfig): Alignment settings
        rng (np.random.Generator): Random generator (pair order, k and ε)
        stats (NormStats): Normalization statistics
        diffusion_cfg (DiffusionConfig): Planner settings
        ref (ReferenceModel | None): Frozen reference, defaults to a snapshot of ``net``
        progress (bool): Show a progress bar

    Returns:
        tuple[DenseNet, list[dict]]: Aligned network and log of
            (step, epoch, pref_loss, reg_loss, mean_logit, clamped)

    Raises:
        ValueError: if there are no pairs
        DivergenceError: if the mean absolute logit stays above ``cfg.divergence_logit``
            for ``cfg.divergence_patience`` consecutive steps
    """
    if not pairs:
        raise ValueError("Alignment needs at least one preference pair")
    if ref is None:
        ref = ReferenceModel.from_net(net)
    aligned = net.copy()
    schedule = schedule_for(diffusion_cfg)
    mask = make_loss_mask(diffusion_cfg.horizon, diffusion_cfg.action_loss_weight)
    optimizer = Adam(aligned, cfg.learning_rate)

    n_batches = -(-len(pairs) // cfg.batch_size)
    log, streak = [], 0
    bar = tqdm(
        total=cfg.epochs * n_batches,
        desc="preference alignment",
        disable=not progress or not logger.isEnabledFor(logging.INFO),
    )
    with bar:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(pairs))
            for b in range(n_batches):
                batch = [pairs[i] for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
                step = len(log)
                loss, grads, info = dpo_loss(
                    aligned, ref, schedule, batch, stats, cfg, diffusion_cfg, rng, mask=mask
                )
                if info["clamped"]:
                    logger.warning(
                        "Clamped %d of %d logits to ±%g at step %d",
                        info["clamped"],
                        len(batch),
                        cfg.logit_clamp,
                        step,
                    )
                streak = streak + 1 if info["mean_abs_logit"] > cfg.divergence_logit else 0
                if streak >= cfg.divergence_patience:
                    logger.error(
                        "Mean |logit| above %g for %d consecutive steps (last %.2f)",
                        cfg.divergence_logit,
                        streak,
                        info["mean_abs_logit"],
                    )
                    raise DivergenceError(
                        f"Alignment diverged at step {step}: mean |logit| exceeded "
                        f"{cfg.divergence_logit} for {streak} consecutive steps, "
                        f"lower the temperature or the learning rate"
                    )
                optimizer.step(grads)
                log.append(
                    dict(
                        step=step,
                        epoch=epoch,
                        pref_loss=info["pref_loss"],
                        reg_loss=info["reg_loss"],
                        mean_logit=info["mean_logit"],
                        clamped=info["clamped"],
                    )
                )
                bar.update()
                bar.set_postfix(logit=f"{info['mean_logit']:.3f}")
    if log:
        logger.info(
            "Alignment finished after %d steps, preference loss %.4f, mean logit %.3f",
            len(log),
            log[-1]["pref_loss"],
            log[-1]["mean_logit"],
        )
    return aligned, log


## Restrict star imports to local namespace
__all__ = [
    name
    for name, thing in globals().items()
    if not (name.startswith("_") or isinstance(thing, types.ModuleType))
]
