"""Multi-block convolutional feature extractor.

A stack of strided conv blocks whose outputs shrink spatially block by
block, mirroring the staged layout of standard classification
backbones at a size that trains on a CPU. Blocks are addressed with
1-based indices. The extractor is deterministic in evaluation mode;
fine-tuning happens through the torch module directly.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .denoiser import _load_state


class ConvBackbone(nn.Module):
    def __init__(self, in_channels: int = 3, widths: tuple[int, ...] = (16, 32, 64, 128)):
        super().__init__()
        self.in_channels = in_channels
        self.widths = tuple(widths)
        blocks = []
        prev = in_channels
        for width in widths:
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(prev, width, 3, stride=2, padding=1),
                    nn.GroupNorm(math.gcd(8, width), width),
                    nn.SiLU(),
                    nn.Conv2d(width, width, 3, padding=1),
                    nn.GroupNorm(math.gcd(8, width), width),
                    nn.SiLU(),
                )
            )
            prev = width
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        outputs = []
        h = x
        for block in self.blocks:
            h = block(h)
            outputs.append(h)
        return outputs


class FeatureExtractor:
    """Numpy-facing wrapper around a ConvBackbone.

    ``extract`` runs in evaluation mode without gradients; the wrapped
    ``module`` is exposed for fine-tuning loops that need autograd.
    """

    def __init__(self, module: ConvBackbone):
        self.module = module.eval()

    @property
    def num_blocks(self) -> int:
        return len(self.module.blocks)

    def _check_blocks(self, blocks) -> list[int]:
        blocks = [int(b) for b in blocks]
        if not blocks:
            raise ValueError("need at least one block index")
        for b in blocks:
            if not 1 <= b <= self.num_blocks:
                raise ValueError(f"block index {b} outside [1, {self.num_blocks}]")
        return blocks

    def extract(self, image: np.ndarray, blocks) -> list[np.ndarray]:
        """Feature maps (channels, h, w) for the requested 1-based blocks."""
        blocks = self._check_blocks(blocks)
        image = np.asarray(image, dtype=np.float32)
        if image.ndim != 3 or image.shape[0] != self.module.in_channels:
            raise ValueError(
                f"expected ({self.module.in_channels}, height, width) image, got {image.shape}"
            )
        with torch.no_grad():
            outputs = self.module(torch.from_numpy(image)[None])
        return [outputs[b - 1][0].numpy() for b in blocks]

    def features_torch(self, x: torch.Tensor) -> list[torch.Tensor]:
        """All block outputs with gradients, for fine-tuning."""
        return self.module(x)

    def save(self, path: str | Path) -> None:
        arrays = {k: v.detach().cpu().numpy() for k, v in self.module.state_dict().items()}
        meta = {
            "arch": {"in_channels": self.module.in_channels, "widths": list(self.module.widths)}
        }
        save_checkpoint(path, "backbone", arrays, meta)


def init_backbone(
    seed: int = 0,
    in_channels: int = 3,
    widths: tuple[int, ...] = (16, 32, 64, 128),
) -> FeatureExtractor:
    """Freshly initialized extractor; the seed fixes the weights exactly."""
    torch.manual_seed(seed)
    return FeatureExtractor(ConvBackbone(in_channels=in_channels, widths=widths))


def load_backbone(path: str | Path) -> FeatureExtractor:
    """Load extractor weights, validating shape and checksum per layer."""
    arrays, meta = load_checkpoint(path, expect_kind="backbone")
    arch = meta["arch"]
    module = ConvBackbone(in_channels=arch["in_channels"], widths=tuple(arch["widths"]))
    _load_state(module, arrays, str(path))
    return FeatureExtractor(module)
