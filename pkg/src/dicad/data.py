"""Dataset ingestion, synthetic data generation, and image file IO.

Datasets follow the common industrial-inspection tree:

    <root>/<category>/train/good/*.png
    <root>/<category>/test/good/*.png
    <root>/<category>/test/<defect>/*.png
    <root>/<category>/ground_truth/<defect>/<stem>_mask.png

Images are float32 channel-first arrays in [0, 1]; masks are boolean
(height x width). Images resize bilinearly, masks by nearest neighbor,
and 8-bit mask files binarize at >127 so re-encoding never shifts a
label. File listings are sorted, so split ordering is deterministic.
"""

from __future__ import annotations

import csv
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

NOMINAL_DIR = "good"
MASK_SUFFIX = "_mask"

# ---------------------------------------------------------------------------
# image file IO and resizing


def load_image(path: str | Path) -> np.ndarray:
    """Read an 8-bit image file as float32 (channels, height, width) in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise DataError(f"image file not found: {path}") from None
    except Exception as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(path: str | Path, image: np.ndarray) -> None:
    """Write a float image in [0, 1] as an 8-bit file (format from extension)."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise DataError(f"expected (channels, height, width), got shape {image.shape}")
    arr = np.clip(image, 0.0, 1.0)
    arr = (arr * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def load_mask(path: str | Path) -> np.ndarray:
    """Read a mask file as boolean (height, width); values >127 are anomalous."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"))
    except FileNotFoundError:
        raise DataError(f"mask file not found: {path}") from None
    except Exception as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from None
    return arr > 127


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    mask = np.asarray(mask).astype(bool)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


def resize_plane(plane: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinearly resize one float32 plane to (height, width)."""
    h, w = size
    img = Image.fromarray(np.asarray(plane, dtype=np.float32), mode="F")
    return np.asarray(img.resize((w, h), Image.BILINEAR), dtype=np.float32)


def resize_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinearly resize a (channels, height, width) image."""
    image = np.asarray(image, dtype=np.float32)
    if image.shape[1:] == tuple(size):
        return image
    return np.stack([resize_plane(ch, size) for ch in image])


def resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize for boolean masks, no interpolation of labels."""
    mask = np.asarray(mask).astype(bool)
    if mask.shape == tuple(size):
        return mask
    h, w = size
    src_h, src_w = mask.shape
    rows = np.minimum((np.arange(h) + 0.5) * src_h / h, src_h - 1).astype(np.int64)
    cols = np.minimum((np.arange(w) + 0.5) * src_w / w, src_w - 1).astype(np.int64)
    return mask[rows][:, cols]


# ---------------------------------------------------------------------------
# dataset containers


@dataclass
class Sample:
    """One image with its label, mask, and provenance.

    Args:
        image: float32 (channels, height, width) in [0, 1].
        label: 0 nominal, 1 anomalous.
        mask: boolean (height, width); all-False for nominal samples.
        defect_type: defect folder name, "good" for nominal samples.
        name: stable identifier used for output file names.
        source: for synthetic anomalies, the unmodified image the defect
            was painted onto; None for real data.
    """

    image: np.ndarray
    label: int
    mask: np.ndarray
    defect_type: str
    name: str
    source: np.ndarray | None = None


@dataclass
class Dataset:
    category: str
    train: list[Sample] = field(default_factory=list)
    test: list[Sample] = field(default_factory=list)

    def test_labels(self) -> np.ndarray:
        return np.array([s.label for s in self.test], dtype=np.int64)

    def test_masks(self) -> list[np.ndarray]:
        return [s.mask for s in self.test]


def _list_images(directory: Path) -> list[Path]:
    exts = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in exts)


def load_dataset(
    root: str | Path,
    category: str,
    resolution: int | None = None,
) -> Dataset:
    """Load one category from an inspection-style tree.

    Every anomalous test image must have a mask file of matching size;
    violations are reported with the exact offending path. ``resolution``
    resizes images (bilinear) and masks (nearest) to a square size.
    """
    root = Path(root)
    cat_dir = root / category
    if not cat_dir.is_dir():
        raise DataError(f"category directory not found: {cat_dir}")
    train_dir = cat_dir / "train" / NOMINAL_DIR
    test_dir = cat_dir / "test"
    gt_dir = cat_dir / "ground_truth"
    if not train_dir.is_dir():
        raise DataError(f"missing train split: {train_dir}")
    if not test_dir.is_dir():
        raise DataError(f"missing test split: {test_dir}")

    size = (resolution, resolution) if resolution else None

    train: list[Sample] = []
    for path in _list_images(train_dir):
        img = load_image(path)
        if size:
            img = resize_image(img, size)
        mask = np.zeros(img.shape[1:], dtype=bool)
        train.append(Sample(img, 0, mask, NOMINAL_DIR, f"train_{path.stem}"))
    if not train:
        raise DataError(f"no training images under {train_dir}")

    test: list[Sample] = []
    for defect_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
        defect = defect_dir.name
        for path in _list_images(defect_dir):
            img = load_image(path)
            if defect == NOMINAL_DIR:
                if size:
                    img = resize_image(img, size)
                mask = np.zeros(img.shape[1:], dtype=bool)
                test.append(Sample(img, 0, mask, defect, f"{defect}_{path.stem}"))
                continue
            mask_path = gt_dir / defect / f"{path.stem}{MASK_SUFFIX}{path.suffix}"
            if not mask_path.is_file():
                raise DataError(f"anomalous image {path} has no mask at {mask_path}")
            mask = load_mask(mask_path)
            if mask.shape != img.shape[1:]:
                raise DataError(
                    f"mask {mask_path} shape {mask.shape} does not match image shape {img.shape[1:]}"
                )
            if size:
                img = resize_image(img, size)
                mask = resize_mask(mask, size)
            test.append(Sample(img, 1, mask, defect, f"{defect}_{path.stem}"))
    if not test:
        raise DataError(f"no test images under {test_dir}")

    return Dataset(category=category, train=train, test=test)


def write_dataset(dataset: Dataset, root: str | Path) -> Path:
    """Write a dataset to disk in the inspection tree layout."""
    root = Path(root)
    cat_dir = root / dataset.category
    for sample in dataset.train:
        save_image(cat_dir / "train" / NOMINAL_DIR / f"{sample.name}.png", sample.image)
    for sample in dataset.test:
        save_image(cat_dir / "test" / sample.defect_type / f"{sample.name}.png", sample.image)
        if sample.label:
            save_mask(
                cat_dir / "ground_truth" / sample.defect_type / f"{sample.name}{MASK_SUFFIX}.png",
                sample.mask,
            )
    return cat_dir


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a reproducible synthetic inspection category.

    Nominal images are a smooth two-tone weave with per-image phase,
    gain, and grain jitter. Anomalies are painted onto fresh nominal
    images; the stored mask is exactly the set of modified pixels.

    Args:
        image_size: square side in pixels.
        seed: generator seed; equal specs produce bit-identical datasets.
        num_train: nominal training images.
        num_test_nominal: defect-free test images.
        num_test_per_kind: test images per defect kind.
        kinds: defect kinds to generate, subset of KINDS.
        area_fractions: per-kind (low, high) mask area fraction bounds.
    """

    image_size: int = 64
    seed: int = 0
    num_train: int = 200
    num_test_nominal: int = 20
    num_test_per_kind: int = 10
    kinds: tuple[str, ...] = ("scratch", "blob", "missing")
    area_fractions: tuple[tuple[str, float, float], ...] = (
        ("scratch", 0.002, 0.012),
        ("blob", 0.02, 0.06),
        ("missing", 0.10, 0.25),
    )

    def area_range(self, kind: str) -> tuple[float, float]:
        for name, lo, hi in self.area_fractions:
            if name == kind:
                return lo, hi
        raise ValueError(f"no area range for defect kind {kind!r}")


KINDS = ("scratch", "blob", "missing")


def _nominal_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """One weave-textured nominal image, values kept inside [0.15, 0.95]."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    fx = 4.0 + rng.uniform(-0.3, 0.3)
    fy = 4.0 + rng.uniform(-0.3, 0.3)
    px = rng.uniform(0.0, size)
    py = rng.uniform(0.0, size)
    weave = np.sin(2.0 * np.pi * fx * (xx + px) / size) * np.sin(2.0 * np.pi * fy * (yy + py) / size)
    base = 0.55 + 0.18 * weave
    gains = 1.0 + rng.uniform(-0.06, 0.06, size=3)
    offsets = np.array([0.0, -0.04, -0.08]) + rng.uniform(-0.02, 0.02, size=3)
    img = base[None, :, :] * gains[:, None, None] + offsets[:, None, None]
    img = img + rng.normal(0.0, 0.015, size=img.shape)
    return np.clip(img, 0.15, 0.95).astype(np.float32)


def _scratch_mask(rng: np.random.Generator, size: int, lo: float, hi: float) -> np.ndarray:
    """Thin line segment, 2 px wide, trimmed to the target pixel budget."""
    target = rng.uniform(0.4 * lo + 0.6 * hi, hi) * size * size  # aim mid-to-high
    thickness = 2
    angle = rng.uniform(0.0, np.pi)
    cx = rng.uniform(size * 0.25, size * 0.75)
    cy = rng.uniform(size * 0.25, size * 0.75)
    dx, dy = np.cos(angle), np.sin(angle)

    def rasterize(length: float) -> np.ndarray:
        mask = np.zeros((size, size), dtype=bool)
        for step in np.linspace(-length / 2, length / 2, max(int(4 * length), 2)):
            xi = int(round(cx + dx * step))
            yi = int(round(cy + dy * step))
            for ox in range(thickness):
                for oy in range(thickness):
                    ux, uy = xi + ox, yi + oy
                    if 0 <= ux < size and 0 <= uy < size:
                        mask[uy, ux] = True
        return mask

    # stamped 2x2 blocks overlap along the line, so the painted area is not
    # simply length * thickness; rescale the length until inside the budget
    length = float(np.clip(target / thickness, 3, size * 0.9))
    mask = rasterize(length)
    for _ in range(6):
        area = mask.sum()
        if lo * size * size <= area <= hi * size * size:
            break
        length = float(np.clip(length * target / max(area, 1), 3, size * 0.9))
        mask = rasterize(length)
    return mask


def _blob_mask(rng: np.random.Generator, size: int, lo: float, hi: float) -> np.ndarray:
    """Filled ellipse sized to hit the target area fraction."""
    target = rng.uniform(lo, hi) * size * size
    aspect = rng.uniform(0.6, 1.6)
    r = math.sqrt(target / (np.pi * aspect))
    ra, rb = r * aspect, r
    cy = rng.uniform(ra + 1, size - ra - 1)
    cx = rng.uniform(rb + 1, size - rb - 1)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    return ((yy - cy) / ra) ** 2 + ((xx - cx) / rb) ** 2 <= 1.0


def _missing_mask(rng: np.random.Generator, size: int, lo: float, hi: float) -> np.ndarray:
    """Large axis-aligned rectangular cut-out."""
    target = rng.uniform(lo, hi) * size * size
    aspect = rng.uniform(0.6, 1.6)
    h = int(np.clip(round(math.sqrt(target * aspect)), 4, size - 2))
    w = int(np.clip(round(target / h), 4, size - 2))
    y0 = rng.integers(1, size - h)
    x0 = rng.integers(1, size - w)
    mask = np.zeros((size, size), dtype=bool)
    mask[y0 : y0 + h, x0 : x0 + w] = True
    return mask


def _paint_defect(
    rng: np.random.Generator, image: np.ndarray, mask: np.ndarray, kind: str
) -> np.ndarray:
    out = image.copy()
    if kind == "scratch":
        value = rng.uniform(0.01, 0.08)
        out[:, mask] = value
    elif kind == "blob":
        color = np.array([rng.uniform(0.80, 0.98), rng.uniform(0.0, 0.12), rng.uniform(0.0, 0.12)])
        out[:, mask] = color[:, None].astype(np.float32)
    elif kind == "missing":
        out[:, mask] = 0.05
    else:
        raise ValueError(f"unknown defect kind {kind!r}")
    # clipping or coincidence could leave a painted pixel unchanged; force a
    # visible delta so masks stay exactly the set of modified pixels
    unchanged = mask & (np.abs(out - image).sum(axis=0) == 0.0)
    if unchanged.any():
        out[0, unchanged] = np.where(image[0, unchanged] > 0.5, 0.0, 1.0)
    return out.astype(np.float32)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Generate a full synthetic category in memory, bit-reproducible by seed."""
    for kind in spec.kinds:
        if kind not in KINDS:
            raise ValueError(f"unknown defect kind {kind!r}, expected subset of {KINDS}")
        spec.area_range(kind)
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size

    train = []
    for i in range(spec.num_train):
        img = _nominal_image(rng, size)
        train.append(
            Sample(img, 0, np.zeros((size, size), dtype=bool), NOMINAL_DIR, f"train_{i:04d}")
        )

    test = []
    for i in range(spec.num_test_nominal):
        img = _nominal_image(rng, size)
        test.append(
            Sample(img, 0, np.zeros((size, size), dtype=bool), NOMINAL_DIR, f"good_{i:04d}")
        )

    mask_makers = {"scratch": _scratch_mask, "blob": _blob_mask, "missing": _missing_mask}
    for kind in spec.kinds:
        lo, hi = spec.area_range(kind)
        for i in range(spec.num_test_per_kind):
            source = _nominal_image(rng, size)
            mask = mask_makers[kind](rng, size, lo, hi)
            image = _paint_defect(rng, source, mask, kind)
            test.append(Sample(image, 1, mask, kind, f"{kind}_{i:04d}", source=source))

    return Dataset(category="synthetic", train=train, test=test)


# ---------------------------------------------------------------------------
# external dataset conversion


def convert_visa_csv(
    csv_path: str | Path,
    images_root: str | Path,
    out_root: str | Path,
    categories: list[str] | None = None,
) -> list[str]:
    """Convert a VisA-style split CSV into the inspection tree layout.

    Expects columns (object, split, label, image, mask) with paths
    relative to ``images_root``; label "normal" marks nominal images.
    Returns the categories written.
    """
    csv_path = Path(csv_path)
    images_root = Path(images_root)
    out_root = Path(out_root)
    if not csv_path.is_file():
        raise DataError(f"csv file not found: {csv_path}")

    written: set[str] = set()
    counters: dict[tuple[str, str, str], int] = {}
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"object", "split", "label", "image"}
        if reader.fieldnames is None or not required.issubset(set(reader.fieldnames)):
            raise DataError(
                f"csv {csv_path} must have columns {sorted(required)}, got {reader.fieldnames}"
            )
        for row in reader:
            category = row["object"].strip()
            if categories and category not in categories:
                continue
            split = row["split"].strip()
            nominal = row["label"].strip().lower() == "normal"
            src = images_root / row["image"].strip()
            if not src.is_file():
                raise DataError(f"image listed in csv not found: {src}")
            defect = NOMINAL_DIR if nominal else "defect"
            key = (category, split, defect)
            idx = counters.get(key, 0)
            counters[key] = idx + 1
            stem = f"{idx:04d}"
            if split == "train":
                dst = out_root / category / "train" / NOMINAL_DIR / f"{stem}.png"
            else:
                dst = out_root / category / "test" / defect / f"{stem}.png"
            dst.parent.mkdir(parents=True, exist_ok=True)
            _copy_as_png(src, dst)
            if split != "train" and not nominal:
                mask_rel = (row.get("mask") or "").strip()
                if not mask_rel:
                    raise DataError(f"anomalous row for {src} has no mask column value")
                mask_src = images_root / mask_rel
                if not mask_src.is_file():
                    raise DataError(f"mask listed in csv not found: {mask_src}")
                mask = load_mask(mask_src)
                save_mask(
                    out_root / category / "ground_truth" / defect / f"{stem}{MASK_SUFFIX}.png",
                    mask,
                )
            written.add(category)
    if not written:
        raise DataError(f"csv {csv_path} produced no images (category filter {categories})")
    return sorted(written)


def _copy_as_png(src: Path, dst: Path) -> None:
    if src.suffix.lower() == ".png":
        shutil.copyfile(src, dst)
    else:
        save_image(dst, load_image(src))
