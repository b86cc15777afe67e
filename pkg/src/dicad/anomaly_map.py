"""Per-pixel anomaly scoring from an image and its reconstruction.

Two complementary map families: a feature map (per-location cosine
distance between extractor features of input and reconstruction, summed
over blocks) and a latent map (per-location L1 difference of the
latents). Both are upsampled to image resolution, normalized, blended
with a fixed weight, and Gaussian-smoothed; the image-level score is the
maximum of the final map.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .data import resize_plane, save_image
from .errors import CheckpointError

COSINE_EPS = 1e-8

_RAW_MAGIC = b"AMAP0001"


@dataclass(frozen=True)
class AnomalyMapConfig:
    """How the two raw maps become one anomaly map.

    ``latent_weight`` blends the normalized latent map against the
    normalized feature map. ``normalization`` is per-image ``"minmax"``
    (visualization-friendly) or ``"calibration"`` (divide by a nominal
    calibration maximum, keeping scores comparable across images).
    ``smoothing_sigma = 0`` disables smoothing, which also makes the
    image score the raw fused maximum.
    """

    latent_weight: float = 0.85
    smoothing_sigma: float = 4.0
    blocks: tuple[int, ...] = (2, 3)
    normalization: str = "minmax"

    def __post_init__(self) -> None:
        if not 0.0 <= self.latent_weight <= 1.0:
            raise ValueError(f"latent_weight must lie in [0, 1], got {self.latent_weight}")
        if self.smoothing_sigma < 0:
            raise ValueError(f"smoothing_sigma must be >= 0, got {self.smoothing_sigma}")
        if not self.blocks:
            raise ValueError("need at least one feature block")
        if self.normalization not in ("minmax", "calibration"):
            raise ValueError(
                f"normalization must be 'minmax' or 'calibration', got {self.normalization!r}"
            )


@dataclass(frozen=True)
class MapCalibration:
    """Nominal-set maxima used by calibration normalization."""

    feature_max: float
    latent_max: float


@dataclass
class AnomalyResult:
    """Raw maps, the fused map, and the image-level score for one image."""

    feature_map: np.ndarray
    latent_map: np.ndarray
    fused_map: np.ndarray
    image_score: float
    depth: int | None = None


def feature_map(
    image: np.ndarray,
    reconstruction: np.ndarray,
    extractor,
    blocks,
) -> np.ndarray:
    """Cosine-distance plane between the two images' features.

    Each block contributes a per-location distance plane, bilinearly
    upsampled to image resolution; the planes are summed.
    """
    image = np.asarray(image, dtype=np.float32)
    reconstruction = np.asarray(reconstruction, dtype=np.float32)
    if image.shape != reconstruction.shape:
        raise ValueError(
            f"image shape {image.shape} does not match reconstruction {reconstruction.shape}"
        )
    blocks = list(blocks)
    if not blocks:
        raise ValueError("need at least one feature block")
    size = image.shape[-2:]
    feats_a = extractor.extract(image, blocks)
    feats_b = extractor.extract(reconstruction, blocks)
    total = np.zeros(size, dtype=np.float64)
    for fa, fb in zip(feats_a, feats_b):
        fa = fa.astype(np.float64)
        fb = fb.astype(np.float64)
        num = (fa * fb).sum(axis=0)
        denom = np.sqrt((fa * fa).sum(axis=0)) * np.sqrt((fb * fb).sum(axis=0))
        dist = 1.0 - num / (denom + COSINE_EPS)
        total += resize_plane(dist.astype(np.float32), size)
    return total.astype(np.float32)


def latent_map(
    z0: np.ndarray,
    z_hat: np.ndarray,
    image_size: tuple[int, int] | None = None,
) -> np.ndarray:
    """Per-location L1 difference of two latents, optionally upsampled."""
    z0 = np.asarray(z0, dtype=np.float32)
    z_hat = np.asarray(z_hat, dtype=np.float32)
    if z0.shape != z_hat.shape:
        raise ValueError(f"latent shape {z0.shape} does not match {z_hat.shape}")
    plane = np.abs(z0.astype(np.float64) - z_hat.astype(np.float64)).sum(axis=0)
    plane = plane.astype(np.float32)
    if image_size is not None and tuple(image_size) != plane.shape:
        plane = resize_plane(plane, tuple(image_size))
    return plane


def _normalize_minmax(plane: np.ndarray, label: str) -> np.ndarray:
    lo = float(plane.min())
    hi = float(plane.max())
    if hi <= lo:
        warnings.warn(
            f"{label} map is constant; normalizing to zeros", stacklevel=3
        )
        return np.zeros_like(plane, dtype=np.float32)
    return ((plane - lo) / (hi - lo)).astype(np.float32)


def _normalize_by_max(plane: np.ndarray, max_value: float, label: str) -> np.ndarray:
    if max_value <= 0.0:
        warnings.warn(
            f"{label} calibration maximum is not positive; normalizing to zeros",
            stacklevel=3,
        )
        return np.zeros_like(plane, dtype=np.float32)
    return (plane / max_value).astype(np.float32)


def calibrate_maps(
    feature_maps: list[np.ndarray], latent_maps: list[np.ndarray]
) -> MapCalibration:
    """Maxima over a nominal calibration set, for calibration normalization."""
    if not feature_maps or not latent_maps:
        raise ValueError("need at least one calibration map of each kind")
    return MapCalibration(
        feature_max=float(max(float(np.max(m)) for m in feature_maps)),
        latent_max=float(max(float(np.max(m)) for m in latent_maps)),
    )


def fuse(
    f_plane: np.ndarray,
    l_plane: np.ndarray,
    config: AnomalyMapConfig,
    calibration: MapCalibration | None = None,
    depth: int | None = None,
) -> AnomalyResult:
    """Blend normalized maps, smooth, and score.

    The fused map is latent_weight * norm(latent) + (1 - latent_weight)
    * norm(feature), smoothed with a reflect-padded Gaussian truncated
    at four sigmas. The image score is the smoothed map's maximum.
    """
    f_plane = np.asarray(f_plane, dtype=np.float32)
    l_plane = np.asarray(l_plane, dtype=np.float32)
    if f_plane.shape != l_plane.shape:
        raise ValueError(
            f"feature map shape {f_plane.shape} does not match latent map {l_plane.shape}"
        )
    if config.normalization == "calibration":
        if calibration is None:
            raise ValueError("calibration normalization requires a MapCalibration")
        f_norm = _normalize_by_max(f_plane, calibration.feature_max, "feature")
        l_norm = _normalize_by_max(l_plane, calibration.latent_max, "latent")
    else:
        f_norm = _normalize_minmax(f_plane, "feature")
        l_norm = _normalize_minmax(l_plane, "latent")

    w = config.latent_weight
    fused = (w * l_norm + (1.0 - w) * f_norm).astype(np.float32)
    if config.smoothing_sigma > 0:
        fused = gaussian_filter(
            fused, sigma=config.smoothing_sigma, mode="reflect", truncate=4.0
        ).astype(np.float32)
    return AnomalyResult(
        feature_map=f_plane,
        latent_map=l_plane,
        fused_map=fused,
        image_score=float(fused.max()),
        depth=depth,
    )


def score_image(
    image: np.ndarray,
    pipeline,
    config: AnomalyMapConfig,
    calibration: MapCalibration | None = None,
    rng: np.random.Generator | None = None,
) -> AnomalyResult:
    """Reconstruct one image and turn the differences into an anomaly map."""
    rec = pipeline.reconstruct(image, rng=rng)
    f_plane = feature_map(image, rec.image, pipeline.extractor, config.blocks)
    l_plane = latent_map(rec.input_latent, rec.latent, image_size=image.shape[-2:])
    return fuse(f_plane, l_plane, config, calibration=calibration, depth=rec.depth)


def score_image_static(
    image: np.ndarray,
    depth: int,
    pipeline,
    config: AnomalyMapConfig,
    calibration: MapCalibration | None = None,
    rng: np.random.Generator | None = None,
) -> AnomalyResult:
    """Like ``score_image`` but with a fixed noising depth."""
    rec = pipeline.reconstruct_static(image, depth, rng=rng)
    f_plane = feature_map(image, rec.image, pipeline.extractor, config.blocks)
    l_plane = latent_map(rec.input_latent, rec.latent, image_size=image.shape[-2:])
    return fuse(f_plane, l_plane, config, calibration=calibration, depth=rec.depth)


def score_threshold(values, target_fpr: float) -> float:
    """Score cutoff whose exceedance rate on the given nominal values
    stays at or below ``target_fpr``.

    Uses the upper-quantile convention: the threshold is the value at
    the ceil((1 - fpr) * n)-th order statistic.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("need at least one calibration score")
    if not 0.0 <= target_fpr < 1.0:
        raise ValueError(f"target_fpr must lie in [0, 1), got {target_fpr}")
    ordered = np.sort(values)
    k = max(1, int(np.ceil((1.0 - target_fpr) * values.size)))
    return float(ordered[k - 1])


# ---------------------------------------------------------------------------
# artifacts: grayscale heatmap, raw float plane, optional overlay


def save_heatmap(path: str | Path, plane: np.ndarray) -> None:
    """Write a map as an 8-bit grayscale image (per-image contrast)."""
    plane = np.asarray(plane, dtype=np.float32)
    lo, hi = float(plane.min()), float(plane.max())
    if hi > lo:
        plane = (plane - lo) / (hi - lo)
    else:
        plane = np.zeros_like(plane)
    arr = (plane * 255.0 + 0.5).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path)


def save_map_raw(path: str | Path, plane: np.ndarray) -> None:
    """Write a map as raw row-major little-endian float32 with a header."""
    plane = np.asarray(plane, dtype=np.float32)
    if plane.ndim != 2:
        raise ValueError(f"expected a 2-d map, got shape {plane.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_RAW_MAGIC)
        fh.write(struct.pack("<II", plane.shape[0], plane.shape[1]))
        fh.write(np.ascontiguousarray(plane, dtype="<f4").tobytes())
    tmp.replace(path)


def load_map_raw(path: str | Path) -> np.ndarray:
    """Read a raw map written by ``save_map_raw``."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"map file not found: {path}") from None
    if blob[: len(_RAW_MAGIC)] != _RAW_MAGIC:
        raise CheckpointError(f"{path} is not a raw map file")
    rows, cols = struct.unpack_from("<II", blob, len(_RAW_MAGIC))
    payload = blob[len(_RAW_MAGIC) + 8 :]
    expected = rows * cols * 4
    if len(payload) != expected:
        raise CheckpointError(
            f"{path} holds {len(payload)} payload bytes, expected {expected}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()


def save_overlay(
    path: str | Path, image: np.ndarray, plane: np.ndarray, alpha: float = 0.5
) -> None:
    """Write the input image with the map blended in as a red tint."""
    image = np.asarray(image, dtype=np.float32)
    plane = np.asarray(plane, dtype=np.float32)
    if image.shape[-2:] != plane.shape:
        raise ValueError(
            f"image size {image.shape[-2:]} does not match map {plane.shape}"
        )
    lo, hi = float(plane.min()), float(plane.max())
    heat = (plane - lo) / (hi - lo) if hi > lo else np.zeros_like(plane)
    blend = np.clip(alpha * heat, 0.0, 1.0)
    out = image * (1.0 - blend)
    out[0] = out[0] + blend
    save_image(path, np.clip(out, 0.0, 1.0))
