"""Noise-prediction network: a small U-shaped conv net with timestep embedding."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..errors import CheckpointError
from .checkpoint import load_checkpoint, save_checkpoint


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Classic sin/cos position features over log-spaced frequencies."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1)
    ).to(t.device)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        groups = math.gcd(8, in_ch)
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        # The embedding conditions via per-channel scale and shift applied
        # after norm2; an additive bias before the norm would be cancelled
        # whenever a group holds a single channel.
        self.time_proj = nn.Linear(time_dim, 2 * out_ch)
        self.norm2 = nn.GroupNorm(math.gcd(8, out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.time_proj(temb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1.0 + scale) + shift
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class UNetDenoiser(nn.Module):
    """Predicts the noise component of a noised latent at a given timestep.

    Args:
        in_channels: latent channel count.
        base_channels: width at the top resolution.
        channel_mults: one entry per resolution level; between levels the
            spatial size halves, so the input must be divisible by
            2 ** (len(channel_mults) - 1).
        time_dim: timestep embedding width.
    """

    def __init__(
        self,
        in_channels: int,
        base_channels: int = 32,
        channel_mults: tuple[int, ...] = (1, 2),
        time_dim: int = 128,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.base_channels = base_channels
        self.channel_mults = tuple(channel_mults)
        self.time_dim = time_dim

        self.time_mlp = nn.Sequential(
            nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        widths = [base_channels * m for m in channel_mults]
        self.stem = nn.Conv2d(in_channels, widths[0], 3, padding=1)
        self.down_blocks = nn.ModuleList(
            ResidualBlock(widths[max(i - 1, 0)], widths[i], time_dim)
            for i in range(len(widths))
        )
        self.middle = ResidualBlock(widths[-1], widths[-1], time_dim)
        self.up_blocks = nn.ModuleList(
            ResidualBlock(widths[i] * 2, widths[max(i - 1, 0)], time_dim)
            for i in reversed(range(len(widths)))
        )
        self.out_norm = nn.GroupNorm(math.gcd(8, widths[0]), widths[0])
        self.out_conv = nn.Conv2d(widths[0], in_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        temb = self.time_mlp(sinusoidal_embedding(t, self.time_dim).to(x.dtype))
        h = self.stem(x)
        skips = []
        for i, block in enumerate(self.down_blocks):
            if i > 0:
                h = F.avg_pool2d(h, 2)
            h = block(h, temb)
            skips.append(h)
        h = self.middle(h, temb)
        for i, block in enumerate(self.up_blocks):
            if i > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skips[-1 - i]], dim=1), temb)
        return self.out_conv(F.silu(self.out_norm(h)))


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings shared by the network training loops."""

    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be > 0, got {self.clip_norm}")


@dataclass
class Denoiser:
    """Trained noise predictor with its provenance.

    ``predict`` is the only inference surface: numpy in, numpy out,
    evaluation mode, no gradients.
    """

    module: UNetDenoiser
    train_config: TrainConfig
    schedule_spec: dict
    loss_history: list[float] = field(default_factory=list)
    latent_stats: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.module.eval()

    def parameters(self) -> dict[str, np.ndarray]:
        """Named parameter arrays (copies)."""
        return {
            name: tensor.detach().cpu().numpy().copy()
            for name, tensor in self.module.state_dict().items()
        }

    def predict(self, z: np.ndarray, t) -> np.ndarray:
        """Noise estimate for a latent (C, H, W) or batch (B, C, H, W)."""
        z = np.asarray(z, dtype=np.float32)
        single = z.ndim == 3
        if single:
            z = z[None]
        if z.ndim != 4 or z.shape[1] != self.module.in_channels:
            raise ValueError(
                f"expected (batch, {self.module.in_channels}, h, w) latents, got {z.shape}"
            )
        t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
        if t_arr.size == 1:
            t_arr = np.full(z.shape[0], int(t_arr[0]), dtype=np.int64)
        if t_arr.shape[0] != z.shape[0]:
            raise ValueError(f"got {t_arr.shape[0]} timesteps for {z.shape[0]} latents")
        with torch.no_grad():
            out = self.module(torch.from_numpy(z), torch.from_numpy(t_arr))
        out_np = out.numpy()
        return out_np[0] if single else out_np

    def save(self, path: str | Path) -> None:
        meta = {
            "arch": {
                "in_channels": self.module.in_channels,
                "base_channels": self.module.base_channels,
                "channel_mults": list(self.module.channel_mults),
                "time_dim": self.module.time_dim,
            },
            "train_config": asdict(self.train_config),
            "schedule": self.schedule_spec,
            "loss_history": self.loss_history,
            "latent_stats": self.latent_stats,
        }
        save_checkpoint(path, "denoiser", self.parameters(), meta)

    @classmethod
    def load(cls, path: str | Path) -> "Denoiser":
        arrays, meta = load_checkpoint(path, expect_kind="denoiser")
        arch = meta["arch"]
        module = UNetDenoiser(
            in_channels=arch["in_channels"],
            base_channels=arch["base_channels"],
            channel_mults=tuple(arch["channel_mults"]),
            time_dim=arch["time_dim"],
        )
        _load_state(module, arrays, str(path))
        return cls(
            module=module,
            train_config=TrainConfig(**meta["train_config"]),
            schedule_spec=meta["schedule"],
            loss_history=list(meta.get("loss_history", [])),
            latent_stats=meta.get("latent_stats", {}),
        )


def _load_state(module: nn.Module, arrays: dict[str, np.ndarray], origin: str) -> None:
    """Copy named arrays into a module, reporting the first offending layer."""
    state = module.state_dict()
    for name, tensor in state.items():
        if name not in arrays:
            raise CheckpointError(f"{origin}: missing parameter array {name!r}")
        array = arrays[name]
        if tuple(array.shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"{origin}: parameter {name!r} has shape {tuple(array.shape)}, "
                f"expected {tuple(tensor.shape)}"
            )
    extras = set(arrays) - set(state)
    if extras:
        raise CheckpointError(f"{origin}: unexpected parameter array {sorted(extras)[0]!r}")
    module.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    module.eval()
