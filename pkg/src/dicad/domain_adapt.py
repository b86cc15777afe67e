"""Adapting the feature extractor to the reconstruction distribution.

A frozen pipeline reconstructs nominal training images; the extractor is
then fine-tuned for a few epochs so the features of an input and of its
reconstruction agree. Downstream feature comparisons then respond to
genuine content changes rather than to reconstruction artifacts.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np
import torch

from .nets.features import FeatureExtractor

logger = logging.getLogger(__name__)

COSINE_EPS = 1e-8

MAX_ADAPT_EPOCHS = 3


@dataclass(frozen=True)
class DomainAdaptConfig:
    """Settings for extractor fine-tuning.

    ``epochs`` may be 0 (return an untouched copy) up to a small cap;
    adaptation is a light correction, not a retraining.
    """

    epochs: int = 1
    blocks: tuple[int, ...] = (1, 2, 3, 4)
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.epochs <= MAX_ADAPT_EPOCHS:
            raise ValueError(
                f"epochs must lie in [0, {MAX_ADAPT_EPOCHS}], got {self.epochs}"
            )
        if not self.blocks:
            raise ValueError("need at least one feature block")
        if any(b < 1 for b in self.blocks):
            raise ValueError(f"block indices are 1-based, got {self.blocks}")
        if len(set(self.blocks)) != len(self.blocks):
            raise ValueError(f"duplicate block indices in {self.blocks}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def block_misalignment(
    feats_a: torch.Tensor, feats_b: torch.Tensor, eps: float = COSINE_EPS
) -> torch.Tensor:
    """Mean cosine distance across locations of one feature-map pair.

    Accepts (batch, channels, h, w) tensors and returns one value per
    batch element in [0, 2]. Differentiable; the epsilon keeps zero-norm
    locations finite (they score distance 1, maximally uninformative).
    """
    if feats_a.shape != feats_b.shape:
        raise ValueError(
            f"feature shapes differ: {tuple(feats_a.shape)} vs {tuple(feats_b.shape)}"
        )
    num = (feats_a * feats_b).sum(dim=1)
    denom = torch.linalg.vector_norm(feats_a, dim=1) * torch.linalg.vector_norm(
        feats_b, dim=1
    )
    cos = num / (denom + eps)
    return (1.0 - cos).mean(dim=(-2, -1))


def feature_alignment_loss(
    image: np.ndarray,
    reconstruction: np.ndarray,
    extractor: FeatureExtractor,
    blocks,
) -> float:
    """Summed per-block cosine distance between two images' features.

    Range [0, 2 * len(blocks)]; 0 when the feature maps agree exactly.
    """
    blocks = extractor._check_blocks(blocks)
    image = np.asarray(image, dtype=np.float32)
    reconstruction = np.asarray(reconstruction, dtype=np.float32)
    if image.shape != reconstruction.shape:
        raise ValueError(
            f"image shape {image.shape} does not match reconstruction {reconstruction.shape}"
        )
    with torch.no_grad():
        feats_a = extractor.module(torch.from_numpy(image)[None])
        feats_b = extractor.module(torch.from_numpy(reconstruction)[None])
        total = sum(
            block_misalignment(feats_a[b - 1], feats_b[b - 1])[0] for b in blocks
        )
    return float(total)


def finetune_extractor(
    extractor: FeatureExtractor,
    images: list[np.ndarray],
    pipeline,
    config: DomainAdaptConfig,
    rng: np.random.Generator | None = None,
) -> FeatureExtractor:
    """Fine-tune a copy of the extractor on (input, reconstruction) pairs.

    The pipeline is used only to produce reconstruction targets, computed
    once up front and held constant; gradients flow solely into the
    returned extractor copy (``rng`` feeds a stochastic pipeline, if
    configured). ``config.epochs == 0`` skips training and returns a
    bit-identical copy.
    """
    if not images:
        raise ValueError("need at least one training image")
    adapted = FeatureExtractor(copy.deepcopy(extractor.module))
    blocks = adapted._check_blocks(config.blocks)
    if config.epochs == 0:
        return adapted

    logger.info("reconstructing %d adaptation targets", len(images))
    # adaptation images are index members, so query on the leave-one-out scale
    targets = [
        pipeline.reconstruct(img, rng=rng, exclude_self=True).image for img in images
    ]
    inputs_t = torch.from_numpy(np.stack(images).astype(np.float32))
    targets_t = torch.from_numpy(np.stack(targets).astype(np.float32))

    module = adapted.module.train()
    optimizer = torch.optim.AdamW(
        module.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    order_gen = torch.Generator().manual_seed(config.seed)
    for epoch in range(config.epochs):
        order = torch.randperm(len(images), generator=order_gen)
        epoch_losses = []
        for start in range(0, len(images), config.batch_size):
            idx = order[start : start + config.batch_size]
            feats_a = module(inputs_t[idx])
            feats_b = module(targets_t[idx])
            loss = torch.stack(
                [block_misalignment(feats_a[b - 1], feats_b[b - 1]).mean() for b in blocks]
            ).sum()
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
        logger.info(
            "adapt epoch %d/%d loss %.6f",
            epoch + 1, config.epochs, float(np.mean(epoch_losses)),
        )
    module.eval()
    return adapted
