"""Network components: denoiser, latent codecs, feature extractor."""

from .checkpoint import load_checkpoint, save_checkpoint
from .codec import (
    ConvAutoencoder,
    IdentityCodec,
    LatentCodec,
    LearnedCodec,
    PooledCodec,
    make_codec,
    train_codec,
)
from .denoiser import Denoiser, TrainConfig, UNetDenoiser, sinusoidal_embedding
from .features import ConvBackbone, FeatureExtractor, init_backbone, load_backbone
from .train import denoise_loss, train_denoiser

__all__ = [
    "ConvAutoencoder",
    "ConvBackbone",
    "Denoiser",
    "FeatureExtractor",
    "IdentityCodec",
    "LatentCodec",
    "LearnedCodec",
    "PooledCodec",
    "TrainConfig",
    "UNetDenoiser",
    "denoise_loss",
    "init_backbone",
    "load_backbone",
    "load_checkpoint",
    "make_codec",
    "save_checkpoint",
    "sinusoidal_embedding",
    "train_codec",
    "train_denoiser",
]
