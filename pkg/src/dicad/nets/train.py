"""Denoiser training: noise-prediction regression over nominal latents."""

from __future__ import annotations

import logging

import numpy as np
import torch

from ..diffusion import NoiseSchedule
from .codec import LatentCodec
from .denoiser import Denoiser, TrainConfig, UNetDenoiser

logger = logging.getLogger(__name__)


def denoise_loss(
    module: torch.nn.Module,
    z0: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Mean squared error between predicted and injected noise.

    ``z0`` is a clean latent batch, ``t`` the per-sample timesteps, and
    ``eps`` the noise realization; the noised input is formed here so a
    single scalar is differentiable end to end for gradient checks.
    """
    t_idx = t.long() - 1
    sqrt_signal = torch.from_numpy(np.sqrt(schedule.alpha_bars)).to(z0.dtype)[t_idx]
    sqrt_noise = torch.from_numpy(np.sqrt(1.0 - schedule.alpha_bars)).to(z0.dtype)[t_idx]
    zt = z0 * sqrt_signal.view(-1, 1, 1, 1) + eps * sqrt_noise.view(-1, 1, 1, 1)
    pred = module(zt, t)
    return ((pred - eps) ** 2).mean()


def train_denoiser(
    train_images: list[np.ndarray],
    codec: LatentCodec,
    schedule: NoiseSchedule,
    config: TrainConfig,
    base_channels: int = 32,
    channel_mults: tuple[int, ...] = (1, 2),
    time_dim: int = 128,
) -> Denoiser:
    """Train a noise predictor on the latents of nominal images.

    The seed in ``config`` fixes initialization, shuffling, timestep
    draws, and noise draws, so equal inputs give identical loss curves.
    """
    if not train_images:
        raise ValueError("cannot train a denoiser on zero images")
    latents = np.stack([codec.encode(np.asarray(im, dtype=np.float32)) for im in train_images])
    levels = len(channel_mults)
    divisor = 2 ** (levels - 1)
    if latents.shape[2] % divisor or latents.shape[3] % divisor:
        raise ValueError(
            f"latent size {latents.shape[2:]} not divisible by {divisor} "
            f"(required by {levels} resolution levels)"
        )

    torch.manual_seed(config.seed)
    module = UNetDenoiser(
        in_channels=latents.shape[1],
        base_channels=base_channels,
        channel_mults=channel_mults,
        time_dim=time_dim,
    )
    optimizer = torch.optim.AdamW(
        module.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    sampler = torch.Generator().manual_seed(config.seed + 1)

    stack = torch.from_numpy(latents)
    n = stack.shape[0]
    num_steps = schedule.num_steps
    history: list[float] = []
    module.train()
    for epoch in range(config.epochs):
        order = torch.randperm(n, generator=sampler)
        losses = []
        for start in range(0, n, config.batch_size):
            z0 = stack[order[start : start + config.batch_size]]
            t = torch.randint(1, num_steps + 1, (z0.shape[0],), generator=sampler)
            eps = torch.randn(z0.shape, generator=sampler)
            loss = denoise_loss(module, z0, t, eps, schedule)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite denoiser loss {loss.item()} at epoch {epoch}, "
                    f"batch {start // config.batch_size}"
                )
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(module.parameters(), config.clip_norm)
            optimizer.step()
            losses.append(float(loss.detach()))
        history.append(float(np.mean(losses)))
        if config.epochs >= 10 and (epoch + 1) % max(config.epochs // 10, 1) == 0:
            logger.info("denoiser epoch %d/%d loss %.5f", epoch + 1, config.epochs, history[-1])
    module.eval()

    return Denoiser(
        module=module,
        train_config=config,
        schedule_spec={
            "beta_start": float(schedule.betas[0]),
            "beta_end": float(schedule.betas[-1]),
            "num_steps": num_steps,
        },
        loss_history=history,
        latent_stats={
            "mean": float(latents.mean()),
            "std": float(latents.std()),
            "channels": int(latents.shape[1]),
            "height": int(latents.shape[2]),
            "width": int(latents.shape[3]),
        },
    )
