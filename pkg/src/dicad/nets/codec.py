"""Latent codecs: map images to the space the denoiser operates in.

Three interchangeable options with one contract: ``encode`` takes an
image (channels, H, W) to a latent (latent_channels, H/d, W/d) and
``decode`` maps back to image shape. ``d`` is ``downsample_factor``;
spatial sizes must divide by it exactly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..data import resize_image
from .checkpoint import load_checkpoint, save_checkpoint
from .denoiser import TrainConfig, _load_state


class LatentCodec:
    """Shape contract shared by every codec."""

    downsample_factor: int = 1
    latent_channels: int

    def encode(self, image: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def decode(self, latent: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _check_image(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float32)
        if image.ndim != 3:
            raise ValueError(f"expected (channels, height, width), got shape {image.shape}")
        d = self.downsample_factor
        if image.shape[1] % d or image.shape[2] % d:
            raise ValueError(f"image size {image.shape[1:]} not divisible by factor {d}")
        return image


class IdentityCodec(LatentCodec):
    """Latent space is the image itself."""

    def __init__(self, channels: int = 3):
        self.latent_channels = channels

    def encode(self, image: np.ndarray) -> np.ndarray:
        return self._check_image(image).copy()

    def decode(self, latent: np.ndarray) -> np.ndarray:
        return np.asarray(latent, dtype=np.float32).copy()


class PooledCodec(LatentCodec):
    """Fixed average-pool encoder with bilinear upsampling decoder."""

    def __init__(self, factor: int, channels: int = 3):
        if factor < 1:
            raise ValueError(f"factor must be >= 1, got {factor}")
        self.downsample_factor = factor
        self.latent_channels = channels

    def encode(self, image: np.ndarray) -> np.ndarray:
        image = self._check_image(image)
        c, h, w = image.shape
        d = self.downsample_factor
        pooled = image.reshape(c, h // d, d, w // d, d).mean(axis=(2, 4))
        return pooled.astype(np.float32)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        latent = np.asarray(latent, dtype=np.float32)
        d = self.downsample_factor
        target = (latent.shape[1] * d, latent.shape[2] * d)
        return resize_image(latent, target)


class ConvAutoencoder(nn.Module):
    """Small strided conv autoencoder for learned latents."""

    def __init__(self, in_channels: int, latent_channels: int, factor: int, hidden: int = 32):
        super().__init__()
        if factor < 2 or factor & (factor - 1):
            raise ValueError(f"factor must be a power of two >= 2, got {factor}")
        self.in_channels = in_channels
        self.latent_channels = latent_channels
        self.factor = factor
        self.hidden = hidden
        levels = factor.bit_length() - 1

        enc: list[nn.Module] = [nn.Conv2d(in_channels, hidden, 3, padding=1), nn.SiLU()]
        for _ in range(levels):
            enc += [nn.Conv2d(hidden, hidden, 3, stride=2, padding=1), nn.SiLU()]
        enc += [nn.Conv2d(hidden, latent_channels, 1)]
        self.encoder = nn.Sequential(*enc)

        dec: list[nn.Module] = [nn.Conv2d(latent_channels, hidden, 3, padding=1), nn.SiLU()]
        for _ in range(levels):
            dec += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(hidden, hidden, 3, padding=1),
                nn.SiLU(),
            ]
        dec += [nn.Conv2d(hidden, in_channels, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))


class LearnedCodec(LatentCodec):
    """Trained autoencoder codec wrapping a ConvAutoencoder."""

    def __init__(self, module: ConvAutoencoder, loss_history: list[float] | None = None):
        self.module = module.eval()
        self.downsample_factor = module.factor
        self.latent_channels = module.latent_channels
        self.loss_history = loss_history or []

    def encode(self, image: np.ndarray) -> np.ndarray:
        image = self._check_image(image)
        with torch.no_grad():
            z = self.module.encoder(torch.from_numpy(image)[None])
        return z[0].numpy()

    def decode(self, latent: np.ndarray) -> np.ndarray:
        latent = np.asarray(latent, dtype=np.float32)
        with torch.no_grad():
            x = self.module.decoder(torch.from_numpy(latent)[None])
        return x[0].numpy()

    def save(self, path: str | Path) -> None:
        arrays = {k: v.detach().cpu().numpy() for k, v in self.module.state_dict().items()}
        meta = {
            "arch": {
                "in_channels": self.module.in_channels,
                "latent_channels": self.module.latent_channels,
                "factor": self.module.factor,
                "hidden": self.module.hidden,
            },
            "loss_history": self.loss_history,
        }
        save_checkpoint(path, "codec", arrays, meta)

    @classmethod
    def load(cls, path: str | Path) -> "LearnedCodec":
        arrays, meta = load_checkpoint(path, expect_kind="codec")
        arch = meta["arch"]
        module = ConvAutoencoder(
            in_channels=arch["in_channels"],
            latent_channels=arch["latent_channels"],
            factor=arch["factor"],
            hidden=arch["hidden"],
        )
        _load_state(module, arrays, str(path))
        return cls(module, loss_history=list(meta.get("loss_history", [])))


def train_codec(
    images: list[np.ndarray],
    config: TrainConfig,
    factor: int = 4,
    latent_channels: int = 4,
    hidden: int = 32,
) -> LearnedCodec:
    """Fit the autoencoder codec on nominal images by mean squared error."""
    if not images:
        raise ValueError("cannot train a codec on zero images")
    torch.manual_seed(config.seed)
    stack = torch.from_numpy(np.stack([np.asarray(im, dtype=np.float32) for im in images]))
    module = ConvAutoencoder(stack.shape[1], latent_channels, factor, hidden)
    optimizer = torch.optim.AdamW(
        module.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    sampler = torch.Generator().manual_seed(config.seed + 1)

    module.train()
    history: list[float] = []
    n = stack.shape[0]
    for epoch in range(config.epochs):
        order = torch.randperm(n, generator=sampler)
        losses = []
        for start in range(0, n, config.batch_size):
            batch = stack[order[start : start + config.batch_size]]
            recon = module(batch)
            loss = F.mse_loss(recon, batch)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite codec loss {loss.item()} at epoch {epoch}, "
                    f"batch {start // config.batch_size}"
                )
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(module.parameters(), config.clip_norm)
            optimizer.step()
            losses.append(float(loss.detach()))
        history.append(float(np.mean(losses)))
    module.eval()
    return LearnedCodec(module, loss_history=history)


def make_codec(kind: str, factor: int = 4, channels: int = 3) -> LatentCodec:
    """Codec factory for the untrained kinds ("identity", "pooled")."""
    if kind == "identity":
        return IdentityCodec(channels=channels)
    if kind == "pooled":
        return PooledCodec(factor=factor, channels=channels)
    raise ValueError(f"unknown codec kind {kind!r} (learned codecs load from a checkpoint)")
