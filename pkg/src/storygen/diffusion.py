"""Stage-agnostic diffusion machinery.

Variance-preserving forward process x_t = alpha_t * x0 + sigma_t * eps with
cosine or linear alpha tables, guidance-scale combination of conditional and
unconditional predictions, and a deterministic DDIM sampler that works in
both epsilon-prediction and x0-prediction modes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ConfigurationError, NumericalFailure, ValidationError

# Guard for divisions by alpha/sigma near the endpoints of the schedule.
ENDPOINT_GUARD = 1e-5

COSINE_OFFSET = 0.008
LINEAR_BETA_START = 1e-4
LINEAR_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    timesteps: int
    alpha: torch.Tensor  # [T + 1], alpha[0] = 1
    sigma: torch.Tensor  # [T + 1], sigma[0] = 0

    def alpha_at(self, t: torch.Tensor, ndim: int) -> torch.Tensor:
        return _expand(self.alpha[t], ndim)

    def sigma_at(self, t: torch.Tensor, ndim: int) -> torch.Tensor:
        return _expand(self.sigma[t], ndim)


def _expand(values: torch.Tensor, ndim: int) -> torch.Tensor:
    return values.reshape(values.shape + (1,) * (ndim - values.ndim))


def make_schedule(kind: str, timesteps: int) -> NoiseSchedule:
    """Tabulate alpha_t and sigma_t for t in 0..T inclusive."""
    if timesteps < 1:
        raise ConfigurationError(f"timesteps must be >= 1, got {timesteps}")
    t = torch.arange(timesteps + 1, dtype=torch.float64)
    if kind == "cosine":
        s = COSINE_OFFSET
        f = torch.cos((t / timesteps + s) / (1 + s) * math.pi / 2) ** 2
        alpha_sq = f / f[0]
    elif kind == "linear":
        betas = torch.linspace(LINEAR_BETA_START, LINEAR_BETA_END, timesteps, dtype=torch.float64)
        alpha_sq = torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(1 - betas, dim=0)])
    else:
        raise ConfigurationError(f"unknown schedule kind {kind!r} (expected 'cosine' or 'linear')")
    alpha = alpha_sq.clamp(min=0.0).sqrt()
    sigma = (1 - alpha**2).clamp(min=0.0).sqrt()
    return NoiseSchedule(kind=kind, timesteps=timesteps, alpha=alpha, sigma=sigma)


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 2.0  # w
    uncond_drop_prob: float = 0.10

    def validate(self) -> None:
        if self.scale < 0:
            raise ConfigurationError(f"guidance scale must be >= 0, got {self.scale}")
        if not 0.0 <= self.uncond_drop_prob <= 1.0:
            raise ConfigurationError("uncond_drop_prob must be in [0, 1]")


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 20
    eta: float = 0.0  # deterministic DDIM only
    prediction_mode: str = "epsilon"  # or "x0"

    def validate(self, timesteps: int) -> None:
        if not 1 <= self.steps <= timesteps:
            raise ConfigurationError(f"steps must be in [1, {timesteps}], got {self.steps}")
        if self.eta != 0.0:
            raise ConfigurationError("only the deterministic sampler (eta=0) is supported")
        if self.prediction_mode not in ("epsilon", "x0"):
            raise ConfigurationError(f"unknown prediction mode {self.prediction_mode!r}")


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Forward-noise x0 to timestep t: alpha_t * x0 + sigma_t * eps."""
    if x0.shape != eps.shape:
        raise ValidationError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    t = torch.as_tensor(t, dtype=torch.long)
    if t.min() < 0 or t.max() > schedule.timesteps:
        raise ValidationError(f"t out of range [0, {schedule.timesteps}]")
    a = schedule.alpha_at(t, x0.ndim).to(x0.dtype)
    s = schedule.sigma_at(t, x0.ndim).to(x0.dtype)
    return a * x0 + s * eps


def cfg_combine(pred_cond: torch.Tensor, pred_uncond: torch.Tensor, scale: float) -> torch.Tensor:
    """Guided prediction: w * cond + (1 - w) * uncond."""
    if pred_cond.shape != pred_uncond.shape:
        raise ValidationError("conditional/unconditional prediction shapes differ")
    return scale * pred_cond + (1.0 - scale) * pred_uncond


def mse_loss(target: torch.Tensor, prediction: torch.Tensor) -> torch.Tensor:
    if target.shape != prediction.shape:
        raise ValidationError(f"target shape {tuple(target.shape)} != prediction shape {tuple(prediction.shape)}")
    return (prediction - target).pow(2).mean()


def _guarded(schedule: NoiseSchedule, t: int) -> tuple[float, float]:
    # both conversions share the same clamped pair so x0 <-> eps is an exact
    # round trip at every t, including the schedule endpoints
    a = max(float(schedule.alpha[t]), ENDPOINT_GUARD)
    s = max(float(schedule.sigma[t]), ENDPOINT_GUARD)
    return a, s


def x0_from_eps(x_t: torch.Tensor, eps: torch.Tensor, t: int, schedule: NoiseSchedule) -> torch.Tensor:
    a, s = _guarded(schedule, t)
    return (x_t - s * eps) / a


def eps_from_x0(x_t: torch.Tensor, x0: torch.Tensor, t: int, schedule: NoiseSchedule) -> torch.Tensor:
    a, s = _guarded(schedule, t)
    return (x_t - a * x0) / s


def _split_prediction(
    x_t: torch.Tensor, pred: torch.Tensor, t: int, schedule: NoiseSchedule, mode: str
) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (x0_hat, eps_hat) regardless of the model's prediction mode."""
    if mode == "epsilon":
        return x0_from_eps(x_t, pred, t, schedule), pred
    return pred, eps_from_x0(x_t, pred, t, schedule)


def ddim_timesteps(timesteps: int, steps: int) -> list[int]:
    """Evenly strided descent T -> 0 with steps + 1 grid points."""
    grid = torch.linspace(timesteps, 0, steps + 1)
    return [int(round(float(v))) for v in grid]


def ddim_sample(
    denoiser,
    x_T: torch.Tensor | None,
    conditions,
    schedule: NoiseSchedule,
    sampler_cfg: SamplerConfig,
    guidance_cfg: GuidanceConfig,
    seed: int = 0,
    shape: tuple[int, ...] | None = None,
) -> torch.Tensor:
    """Deterministic DDIM trajectory from pure noise to an x0 estimate.

    `denoiser(x_t, conditions_or_None, t)` is called twice per step, once with
    the conditions and once with None (the null condition); the predictions
    are combined with the guidance scale before each jump. When x_T is None,
    the start noise is drawn from `seed`.
    """
    sampler_cfg.validate(schedule.timesteps)
    guidance_cfg.validate()
    if x_T is None:
        if shape is None:
            raise ValidationError("either x_T or shape must be given")
        gen = torch.Generator().manual_seed(seed)
        x_T = torch.randn(shape, generator=gen)
    x = x_T
    ts = ddim_timesteps(schedule.timesteps, sampler_cfg.steps)
    for i in range(sampler_cfg.steps):
        t_cur, t_next = ts[i], ts[i + 1]
        pred_cond = denoiser(x, conditions, t_cur)
        pred_uncond = denoiser(x, None, t_cur)
        pred = cfg_combine(pred_cond, pred_uncond, guidance_cfg.scale)
        x0_hat, eps_hat = _split_prediction(x, pred, t_cur, schedule, sampler_cfg.prediction_mode)
        x = float(schedule.alpha[t_next]) * x0_hat + float(schedule.sigma[t_next]) * eps_hat
        if not torch.isfinite(x).all():
            raise NumericalFailure(f"non-finite sample at step {i} (t={t_cur} -> {t_next})")
    return x
