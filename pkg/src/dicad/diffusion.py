"""Closed-form diffusion algebra: schedules, noising, denoising steps.

Everything here is pure numpy on arrays the caller owns. Networks never
appear at this level; the denoiser only contributes a predicted-noise
array that the caller passes in. All operations preserve the dtype of
their array inputs; per-step scalar coefficients are computed in float64
and applied as Python floats so float32 pipelines stay float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule for the forward noising process.

    Args:
        betas: per-step noise variances, shape (T,), float64.
        alphas: 1 - betas, same shape.
        alpha_bars: cumulative products of alphas, same shape.

    Timesteps are 1-based: step t maps to index t - 1. By convention
    ``alpha_bar(0) == 1.0`` so the terminal update of a sampling loop
    lands exactly on the clean signal.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def num_steps(self) -> int:
        return int(self.betas.shape[0])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.num_steps:
            raise ValueError(f"timestep {t} outside [1, {self.num_steps}]")

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal fraction at step t (t=0 returns 1.0)."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def signal_scale(self, t: int) -> float:
        """sqrt of the cumulative signal fraction at step t."""
        return math.sqrt(self.alpha_bar(t))

    def noise_scale(self, t: int) -> float:
        """sqrt of the cumulative noise fraction at step t."""
        return math.sqrt(1.0 - self.alpha_bar(t))


def make_linear_schedule(beta_start: float, beta_end: float, num_steps: int) -> NoiseSchedule:
    """Build a linearly spaced variance schedule.

    Args:
        beta_start: variance at step 1, in (0, 1).
        beta_end: variance at step T, >= beta_start and < 1.
        num_steps: total step count T >= 1.

    Returns:
        A validated NoiseSchedule with strictly decreasing alpha_bars.
    """
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    if not (0.0 < beta_start < 1.0) or not (0.0 < beta_end < 1.0):
        raise ValueError(f"beta endpoints must lie in (0, 1), got ({beta_start}, {beta_end})")
    if beta_end < beta_start:
        raise ValueError(f"beta_end {beta_end} below beta_start {beta_start}")
    betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    if not (alpha_bars > 0.0).all():
        raise ValueError("schedule underflows: alpha_bar reaches zero")
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


@dataclass(frozen=True)
class GuidanceConfig:
    """Sampling-time knobs for the reverse process.

    Args:
        eta: strength of the pull toward the conditioning target; 0 disables.
        sigma: stochasticity of the reverse update; 0 is deterministic.
    """

    eta: float = 0.0
    sigma: float = 0.0

    def __post_init__(self) -> None:
        if self.eta < 0.0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if self.sigma < 0.0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


def _check_same_shape(name_a: str, a: np.ndarray, name_b: str, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{name_a} shape {a.shape} does not match {name_b} shape {b.shape}")


def forward_sample(
    x0: np.ndarray,
    t: int,
    eps: np.ndarray,
    schedule: NoiseSchedule,
    omega: float = 1.0,
) -> np.ndarray:
    """Noise a clean signal to step t in one shot.

    ``omega`` scales only the noise term: 1 is the standard forward
    process, 0 keeps the signal attenuation but injects no noise at all
    (the output is then bit-independent of ``eps``).
    """
    schedule._check_t(t)
    if not 0.0 <= omega <= 1.0:
        raise ValueError(f"omega must lie in [0, 1], got {omega}")
    x0 = np.asarray(x0)
    signal = schedule.signal_scale(t)
    if omega == 0.0:
        return x0 * signal
    eps = np.asarray(eps)
    _check_same_shape("x0", x0, "eps", eps)
    return x0 * signal + eps * (omega * schedule.noise_scale(t))


def x0_estimate(
    xt: np.ndarray,
    eps_pred: np.ndarray,
    t: int,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Invert the forward step: recover the clean signal implied by a noise estimate."""
    schedule._check_t(t)
    xt = np.asarray(xt)
    eps_pred = np.asarray(eps_pred)
    _check_same_shape("xt", xt, "eps_pred", eps_pred)
    return (xt - eps_pred * schedule.noise_scale(t)) * (1.0 / schedule.signal_scale(t))


def guided_eps(
    eps_pred: np.ndarray,
    zt: np.ndarray,
    z0_target: np.ndarray,
    t: int,
    schedule: NoiseSchedule,
    config: GuidanceConfig,
) -> np.ndarray:
    """Correct a noise prediction toward a known clean target.

    Re-noises the target with the predicted noise, compares against the
    actual noisy state, and subtracts the scaled difference from the
    prediction. With ``eta == 0`` the prediction is returned unchanged.
    """
    schedule._check_t(t)
    eps_pred = np.asarray(eps_pred)
    if config.eta == 0.0:
        return eps_pred
    zt = np.asarray(zt)
    z0_target = np.asarray(z0_target)
    _check_same_shape("eps_pred", eps_pred, "zt", zt)
    _check_same_shape("zt", zt, "z0_target", z0_target)
    signal = schedule.signal_scale(t)
    noise = schedule.noise_scale(t)
    renoised = z0_target * signal + eps_pred * noise
    return eps_pred - (config.eta * noise) * (renoised - zt)


def ddim_step(
    x_cur: np.ndarray,
    eps_hat: np.ndarray,
    t_cur: int,
    t_prev: int,
    schedule: NoiseSchedule,
    config: GuidanceConfig,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """One reverse update from step t_cur down to t_prev.

    With ``config.sigma == 0`` the update is fully deterministic and
    ``noise`` must be omitted; otherwise ``noise`` supplies the fresh
    randomness. ``t_prev == 0`` lands on the clean signal estimate.
    """
    schedule._check_t(t_cur)
    if not 0 <= t_prev < t_cur:
        raise ValueError(f"timestep pair must decrease, got {t_cur} -> {t_prev}")
    x_cur = np.asarray(x_cur)
    eps_hat = np.asarray(eps_hat)
    _check_same_shape("x_cur", x_cur, "eps_hat", eps_hat)

    alpha_bar_prev = schedule.alpha_bar(t_prev)
    sigma2 = config.sigma * config.sigma
    if sigma2 > 1.0 - alpha_bar_prev:
        raise ValueError(
            f"sigma^2 {sigma2} exceeds available variance {1.0 - alpha_bar_prev} at step {t_prev}"
        )

    x0_hat = x0_estimate(x_cur, eps_hat, t_cur, schedule)
    out = x0_hat * math.sqrt(alpha_bar_prev) + eps_hat * math.sqrt(1.0 - alpha_bar_prev - sigma2)
    if config.sigma > 0.0:
        if noise is None:
            raise ValueError("sigma > 0 requires a noise array")
        noise = np.asarray(noise)
        _check_same_shape("x_cur", x_cur, "noise", noise)
        out = out + noise * config.sigma
    return out


def make_subsequence(t_final: int, num_steps: int) -> list[int]:
    """Evenly spaced sampling timesteps from ~t_final/num_steps up to t_final.

    Returns a strictly increasing list ending exactly at ``t_final``.
    When ``t_final < num_steps`` the rounded grid collapses onto fewer
    distinct values and the list is simply every step 1..t_final.
    """
    if t_final < 1:
        raise ValueError(f"t_final must be >= 1, got {t_final}")
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    seen: set[int] = set()
    steps: list[int] = []
    for i in range(1, num_steps + 1):
        # round-half-up keeps the grid platform-independent
        t = math.floor(i * t_final / num_steps + 0.5)
        t = max(t, 1)
        if t not in seen:
            seen.add(t)
            steps.append(t)
    return steps
