#!/usr/bin/env python3
# -*- coding: utf-8 -*-

""" Conditional DDPM trajectory planner

The planner models the joint normalized sequence of states and actions of ``h + 1``
steps as one tensor (the *plan tensor*). The state portion of row 0 is the condition
slot: it is inpainted with the current observation before every network evaluation and
after every denoising step, and masked out of the training loss.

The noise predictor sees ``[flatten(x_k), condition, embed(k), flag]`` where ``flag = 0``
and a zero condition form the null token used for classifier-free guidance.

"""

__author__ = "prefdiff developers"
__date__ = "2024-10-03"


import logging
import types
from dataclasses import dataclass, field

import numpy as np
from tqdm.auto import tqdm

from .datasets import denormalize, normalize, sample_segment, segment_slots
from .errors import DivergenceError
from .gaitsim import ACTION_DIM, STATE_DIM, EnvConstants
from .ndcore import Adam, backward, forward, init_net, timestep_embed


logger = logging.getLogger(__name__)

PLAN_DIM = STATE_DIM + ACTION_DIM


@dataclass(frozen=True)
class DiffusionConfig:
    """Planner architecture, training and inference settings"""

    horizon: int = 15
    diffusion_steps: int = 20
    beta_min: float = 1e-4
    beta_max: float = 0.2
    hidden: tuple = (256, 256, 256)
    embed_dim: int = 32
    action_loss_weight: float = 10.0
    p_drop: float = 0.1
    batch_size: int = 64
    learning_rate: float = 1e-3
    train_steps: int = 5000
    sampling_steps: int = 10
    w_cg: float = 1e-4


@dataclass
class NoiseSchedule:
    """Precomputed variance schedule

    Attributes:
        betas (np.ndarray): β_k for k = 0 .. K-1
        alphas (np.ndarray): α_k = 1 - β_k
        alpha_bars (np.ndarray): ᾱ_k = Π_{j<=k} α_j
    """

    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    @property
    def K(self):
        return len(self.betas)


def make_schedule(K, beta_min, beta_max):
    """Linear β schedule

    Args:
        K (int): Number of diffusion steps (>= 2)
        beta_min (float): First β
        beta_max (float): Last β

    Returns:
        NoiseSchedule: The schedule

    Raises:
        ValueError: if not 0 < beta_min <= beta_max < 1 or K < 2
    """
    if K < 2 or not 0 < beta_min <= beta_max < 1:
        raise ValueError(
            f"Need K >= 2 and 0 < beta_min <= beta_max < 1, "
            f"got K={K}, beta_min={beta_min}, beta_max={beta_max}"
        )
    betas = np.linspace(beta_min, beta_max, K)
    alphas = 1 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def schedule_for(cfg):
    """Schedule of a :class:`DiffusionConfig`"""
    return make_schedule(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max)


def q_sample(schedule, x0, k, noise):
    """Sample the forward process in closed form, x_k = √ᾱ_k x0 + √(1-ᾱ_k) ε

    Args:
        schedule (NoiseSchedule): Schedule
        x0 (np.ndarray): Clean tensor, optionally with a leading batch axis
        k (int | np.ndarray): Diffusion step, or one per batch element
        noise (np.ndarray): Standard normal noise of the shape of x0

    Returns:
        np.ndarray: Noisy tensor
    """
    x0, noise = np.asarray(x0, dtype=float), np.asarray(noise, dtype=float)
    if x0.shape != noise.shape:
        raise ValueError(f"Noise shape {noise.shape} does not match data shape {x0.shape}")
    ab = schedule.alpha_bars[np.asarray(k)]
    ab = np.reshape(ab, np.shape(ab) + (1,) * (x0.ndim - np.ndim(ab)))
    return np.sqrt(ab) * x0 + np.sqrt(1 - ab) * noise


def make_loss_mask(horizon, action_weight=10.0):
    """Loss weights of the plan tensor

    0 on the condition slot, ``action_weight`` on all actions, 1 on all other states.

    Returns:
        np.ndarray: Shape (horizon + 1, PLAN_DIM)
    """
    mask = np.ones((horizon + 1, PLAN_DIM))
    mask[:, STATE_DIM:] = action_weight
    mask[0, :STATE_DIM] = 0
    return mask


def plan_tensor(states, actions, stats):
    """Normalized joint (state, action) rows, shape (..., h + 1, PLAN_DIM)"""
    return normalize(np.concatenate([states, actions], axis=-1), stats)


def inpaint(x, condition):
    """Return a copy of the plan tensor with the condition slot set"""
    x = np.array(x, dtype=float)
    x[..., 0, :STATE_DIM] = condition
    return x


def denoiser_sizes(cfg):
    """Layer sizes of the noise predictor for a configuration"""
    n_plan = (cfg.horizon + 1) * PLAN_DIM
    return [n_plan + STATE_DIM + cfg.embed_dim + 1, *cfg.hidden, n_plan]


def init_denoiser(cfg, rng):
    """Fresh noise predictor for a configuration"""
    return init_net(denoiser_sizes(cfg), rng)


def denoiser_input(x_k, condition, k, flag, embed_dim):
    """Assemble the network input for a batch

    Args:
        x_k (np.ndarray): Noisy plan tensors (B, h+1, PLAN_DIM)
        condition (np.ndarray): Normalized observations (B, STATE_DIM)
        k (np.ndarray): Diffusion steps (B,)
        flag (np.ndarray): 1 for conditioned, 0 for the null token (B,)
        embed_dim (int): Width of the step embedding

    Returns:
        np.ndarray: Shape (B, n_in)
    """
    flag = np.asarray(flag, dtype=float)
    return np.concatenate(
        [
            x_k.reshape(len(x_k), -1),
            condition * flag[:, np.newaxis],
            timestep_embed(np.asarray(k), embed_dim),
            flag[:, np.newaxis],
        ],
        axis=1,
    )


def predict_noise(net, x_k, condition, k, flag, embed_dim):
    """Noise prediction for a batch of plan tensors, returns (input, ε̂)"""
    inp = denoiser_input(x_k, condition, k, flag, embed_dim)
    return inp, forward(net, inp).reshape(x_k.shape)


def masked_mse(noise, prediction, mask):
    """Per-sample weighted squared error Σ mask (ε - ε̂)² / Σ mask and its gradient

    Args:
        noise (np.ndarray): True noise (B, h+1, PLAN_DIM)
        prediction (np.ndarray): Predicted noise, same shape
        mask (np.ndarray): Weights (h+1, PLAN_DIM)

    Returns:
        tuple[np.ndarray, np.ndarray]: Errors (B,) and d(error_b)/d(prediction_b)
    """
    total = np.sum(mask)
    if total == 0:
        return np.zeros(len(noise)), np.zeros_like(prediction)
    diff = noise - prediction
    err = np.sum(mask * diff**2, axis=(1, 2)) / total
    return err, -2 * mask * diff / total


def batch_tensors(segments, stats):
    """Stack segments into normalized plan tensors (B, h+1, PLAN_DIM)"""
    states = np.stack([s.states for s in segments])
    actions = np.stack([s.actions for s in segments])
    return plan_tensor(states, actions, stats)


def bc_loss(net, schedule, segments, stats, rng, cfg, *, mask=None):
    """Masked behavior-cloning loss of the noise predictor

    Draws one diffusion step and one noise tensor per segment (in this order),
    then drops the condition with probability ``cfg.p_drop``.

    Args:
        net (DenseNet): Noise predictor
        schedule (NoiseSchedule): Schedule
        segments (Segment | list[Segment]): Training segments of h + 1 records
        stats (NormStats): Normalization statistics
        rng (np.random.Generator): Random generator
        cfg (DiffusionConfig): Settings (horizon, embedding, action weight, p_drop)
        mask (np.ndarray | None): Loss weights, defaults to :func:`make_loss_mask`

    Returns:
        tuple[float, Gradients]: Batch mean loss and its parameter gradients

    Raises:
        DivergenceError: if the loss is not finite
    """
    if not isinstance(segments, (list, tuple)):
        segments = [segments]
    if mask is None:
        mask = make_loss_mask(cfg.horizon, cfg.action_loss_weight)
    x0 = batch_tensors(segments, stats)
    B = len(x0)
    if x0.shape[1:] != mask.shape:
        raise ValueError(f"Segments of shape {x0.shape[1:]} do not match mask {mask.shape}")
    condition = x0[:, 0, :STATE_DIM]

    k = rng.integers(schedule.K, size=B)
    noise = rng.standard_normal(x0.shape)
    flag = (rng.random(B) >= cfg.p_drop).astype(float)

    x_k = inpaint(q_sample(schedule, x0, k, noise), condition)
    inp, eps_hat = predict_noise(net, x_k, condition, k, flag, cfg.embed_dim)
    err, d_err = masked_mse(noise, eps_hat, mask)
    loss = float(np.mean(err))
    if not np.isfinite(loss):
        raise DivergenceError(f"Non-finite behavior-cloning loss {loss}")
    grads = backward(net, inp, d_err.reshape(B, -1) / B)
    return loss, grads


def guided_noise(eps_cond, eps_uncond, w):
    """Classifier-free guidance blend (1 + w) ε_c - w ε_u

    Evaluated as ε_c + w (ε_c - ε_u), so that w = 0 and ε_c = ε_u return ε_c exactly.
    """
    return eps_cond + w * (eps_cond - eps_uncond)


def ddpm_denoise_step(net, schedule, x_k, k, condition, w_cg, rng, *, embed_dim, k_prev=None):
    """One ancestral sampling step from diffusion step k to k_prev

    Args:
        net (DenseNet): Noise predictor
        schedule (NoiseSchedule): Schedule
        x_k (np.ndarray): Plan tensor at step k (h+1, PLAN_DIM)
        k (int): Current diffusion step
        condition (np.ndarray): Normalized observation (STATE_DIM,)
        w_cg (float): Guidance weight
        rng (np.random.Generator): Random generator
        embed_dim (int): Width of the step embedding
        k_prev (int | None): Target step, defaults to k - 1. A negative value denotes the
            clean sample (ᾱ = 1), in which case no noise is added.

    Returns:
        np.ndarray: Plan tensor at step k_prev with the condition slot re-imposed

    Raises:
        DivergenceError: on non-finite values
    """
    if k_prev is None:
        k_prev = k - 1
    x_k = inpaint(x_k, condition)
    batch = np.stack([x_k, x_k])
    cond = np.stack([condition, np.zeros_like(condition)])
    _, eps = predict_noise(net, batch, cond, np.array([k, k]), np.array([1.0, 0.0]), embed_dim)
    eps_bar = guided_noise(eps[0], eps[1], w_cg)

    ab_cur = schedule.alpha_bars[k]
    ab_prev = schedule.alpha_bars[k_prev] if k_prev >= 0 else 1.0
    alpha = schedule.alphas[k] if k_prev == k - 1 else ab_cur / ab_prev
    beta = 1 - alpha
    x = (x_k - beta / np.sqrt(1 - ab_cur) * eps_bar) / np.sqrt(alpha)
    if k_prev >= 0:
        variance = (1 - ab_prev) / (1 - ab_cur) * beta
        x = x + np.sqrt(variance) * rng.standard_normal(x.shape)
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"Non-finite plan tensor at diffusion step {k}")
    return inpaint(x, condition)


def inference_steps(K, steps):
    """Evenly strided diffusion steps K-1, ..., 0 used at inference

    Args:
        K (int): Number of training diffusion steps
        steps (int): Number of sampling steps, 1 <= steps <= K. A single step jumps from K-1
            straight to the clean sample

    Returns:
        np.ndarray: Strictly decreasing step indices ending at 0
    """
    if not 1 <= steps <= K:
        raise ValueError(f"Need 1 <= sampling steps <= {K}, got {steps}")
    return np.round(np.linspace(K - 1, 0, steps)).astype(int)


def plan(net, schedule, condition, stats, cfg, rng, *, steps_infer=None, w_cg=None, a_max=None):
    """Generate a state and action plan conditioned on an observation

    Args:
        net (DenseNet): Noise predictor
        schedule (NoiseSchedule): Schedule
        condition (np.ndarray): Raw observation s_0 (STATE_DIM,)
        stats (NormStats): Normalization statistics
        cfg (DiffusionConfig): Settings
        rng (np.random.Generator): Random generator
        steps_infer (int | None): Sampling steps, defaults to ``cfg.sampling_steps``
        w_cg (float | None): Guidance weight, defaults to ``cfg.w_cg``
        a_max (float | None): Action clamp, defaults to the simulator's

    Returns:
        tuple[np.ndarray, np.ndarray]: States (h+1, STATE_DIM) starting with the condition,
            actions (h+1, ACTION_DIM) clamped to [0, a_max]
    """
    steps_infer = cfg.sampling_steps if steps_infer is None else steps_infer
    w_cg = cfg.w_cg if w_cg is None else w_cg
    a_max = EnvConstants().a_max if a_max is None else a_max
    condition = np.asarray(condition, dtype=float)
    cond_n = normalize(condition, stats)

    x = rng.standard_normal((cfg.horizon + 1, PLAN_DIM))
    ks = inference_steps(schedule.K, steps_infer)
    for i, k in enumerate(ks):
        k_prev = ks[i + 1] if i + 1 < len(ks) else -1
        x = ddpm_denoise_step(
            net, schedule, x, k, cond_n, w_cg, rng, embed_dim=cfg.embed_dim, k_prev=k_prev
        )
    out = denormalize(x, stats)
    states, actions = out[:, :STATE_DIM], np.clip(out[:, STATE_DIM:], 0, a_max)
    states[0] = condition
    return states, actions


def train_bc(trajs, stats, cfg, rng, *, net=None, progress=True):
    """Behavior cloning of the planner on trajectory data

    Args:
        trajs (list[Trajectory]): Training trajectories
        stats (NormStats): Normalization statistics
        cfg (DiffusionConfig): Settings
        rng (np.random.Generator): Random generator (initialization and batches)
        net (DenseNet | None): Network to continue training, a new one if None
        progress (bool): Show a progress bar

    Returns:
        tuple[DenseNet, list[dict]]: Trained network and log of (step, loss)
    """
    schedule = schedule_for(cfg)
    slots = segment_slots(trajs, cfg.horizon)
    if len(slots) == 0:
        raise ValueError(f"No trajectory provides a segment of {cfg.horizon + 1} records")
    if net is None:
        net = init_denoiser(cfg, rng)
    mask = make_loss_mask(cfg.horizon, cfg.action_loss_weight)
    optimizer = Adam(net, cfg.learning_rate)

    log = []
    bar = tqdm(
        range(cfg.train_steps),
        desc="behavior cloning",
        disable=not progress or not logger.isEnabledFor(logging.INFO),
    )
    for i in bar:
        batch = [sample_segment(trajs, cfg.horizon, rng, slots) for _ in range(cfg.batch_size)]
        loss, grads = bc_loss(net, schedule, batch, stats, rng, cfg, mask=mask)
        optimizer.step(grads)
        log.append(dict(step=i, loss=loss))
        if i % 100 == 0:
            bar.set_postfix(loss=f"{loss:.4f}")
    if log:
        logger.info(
            "Behavior cloning finished after %d steps, loss %.4f", len(log), log[-1]["loss"]
        )
    return net, log


class DiffusionPlanner:
    """Policy executing the first h actions of every generated plan

    Args:
        net (DenseNet): Noise predictor
        stats (NormStats): Normalization statistics
        cfg (DiffusionConfig): Settings
        env (EnvConstants | None): Simulator constants (action clamp)
        source (str): Tag recorded in rolled out trajectories
    """

    def __init__(self, net, stats, cfg, env=None, source="planner"):
        self.net = net
        self.stats = stats
        self.cfg = cfg
        self.env = env or EnvConstants()
        self.schedule = schedule_for(cfg)
        self.source = source

    def plan(self, state, rng):
        """Full plan (states, actions) for an :class:`~prefdiff.gaitsim.EnvState`"""
        return plan(
            self.net,
            self.schedule,
            state.to_vector(),
            self.stats,
            self.cfg,
            rng,
            a_max=self.env.a_max,
        )

    def __call__(self, state, rng):
        _, actions = self.plan(state, rng)
        return actions[: self.cfg.horizon]


## Restrict star imports to local namespace
__all__ = [
    name
    for name, thing in globals().items()
    if not (name.startswith("_") or isinstance(thing, types.ModuleType))
]
