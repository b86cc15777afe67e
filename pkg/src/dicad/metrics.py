"""Detection and localization metrics: AUROC, pixel AUROC, region overlap.

All three are threshold-free ranking metrics computed exactly: AUROC by
the rank-statistic identity (ties count half), the region-overlap score
by sweeping every distinct map value as a threshold and integrating
mean per-region true-positive rate over global false-positive rate up
to a limit, normalized so a perfect detector scores 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

# 8-connectivity: diagonal neighbors belong to the same region
_CONNECTIVITY = np.ones((3, 3), dtype=np.int64)


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve for binary labels; tied scores count 0.5.

    Equivalent to the probability that a random anomalous score exceeds
    a random nominal one.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores shape {scores.shape} != labels shape {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    num_pos = int(labels.sum())
    num_neg = labels.size - num_pos
    if num_pos == 0 or num_neg == 0:
        raise ValueError(f"need both classes, got {num_pos} positive / {num_neg} negative")
    ranks = rankdata(scores)  # average ranks, exact halves on ties
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - num_pos * (num_pos + 1) / 2.0) / (num_pos * num_neg)


def pixel_auroc(maps: list[np.ndarray], masks: list[np.ndarray]) -> float:
    """AUROC over all pixels of all maps pooled together."""
    if len(maps) != len(masks) or not maps:
        raise ValueError(f"need matching non-empty map/mask lists, got {len(maps)}/{len(masks)}")
    flat_scores = []
    flat_labels = []
    for i, (amap, mask) in enumerate(zip(maps, masks)):
        amap = np.asarray(amap, dtype=np.float64)
        mask = np.asarray(mask).astype(bool)
        if amap.shape != mask.shape:
            raise ValueError(f"map {i} shape {amap.shape} != mask shape {mask.shape}")
        flat_scores.append(amap.ravel())
        flat_labels.append(mask.ravel().astype(np.int64))
    return auroc(np.concatenate(flat_scores), np.concatenate(flat_labels))


def pro(maps: list[np.ndarray], masks: list[np.ndarray], fpr_limit: float = 0.3) -> float:
    """Mean per-region overlap integrated over false-positive rate.

    Every 8-connected component of every mask is one region. For each
    threshold (every distinct map value, descending) the curve point is
    (global FPR over all nominal pixels, mean per-region TPR). The curve
    is integrated by trapezoid up to ``fpr_limit`` (linear interpolation
    at the cut) and divided by the limit.
    """
    if len(maps) != len(masks) or not maps:
        raise ValueError(f"need matching non-empty map/mask lists, got {len(maps)}/{len(masks)}")
    if not 0.0 < fpr_limit <= 1.0:
        raise ValueError(f"fpr_limit must lie in (0, 1], got {fpr_limit}")

    region_scores: list[np.ndarray] = []
    nominal_scores: list[np.ndarray] = []
    for i, (amap, mask) in enumerate(zip(maps, masks)):
        amap = np.asarray(amap, dtype=np.float64)
        mask = np.asarray(mask).astype(bool)
        if amap.shape != mask.shape:
            raise ValueError(f"map {i} shape {amap.shape} != mask shape {mask.shape}")
        nominal_scores.append(amap[~mask])
        if mask.any():
            labeled, count = ndimage.label(mask, structure=_CONNECTIVITY)
            for region in range(1, count + 1):
                region_scores.append(np.sort(amap[labeled == region]))
    if not region_scores:
        raise ValueError("no anomalous regions in any mask")
    nominal = np.sort(np.concatenate(nominal_scores))
    if nominal.size == 0:
        raise ValueError("no nominal pixels available for the false-positive rate")

    all_values = [nominal]
    all_values.extend(region_scores)
    thresholds = np.unique(np.concatenate(all_values))[::-1]  # descending

    # counts of pixels >= threshold, per sorted score vector
    fprs = (nominal.size - np.searchsorted(nominal, thresholds, side="left")) / nominal.size
    tpr_sum = np.zeros_like(thresholds)
    for scores in region_scores:
        tpr_sum += (scores.size - np.searchsorted(scores, thresholds, side="left")) / scores.size
    pros = tpr_sum / len(region_scores)

    fprs = np.concatenate(([0.0], fprs))
    pros = np.concatenate(([0.0], pros))
    return _integrate_to_limit(fprs, pros, fpr_limit)


def _integrate_to_limit(fprs: np.ndarray, pros: np.ndarray, limit: float) -> float:
    """Trapezoid area under (fprs, pros) for fpr in [0, limit], over limit."""
    area = 0.0
    for i in range(1, fprs.size):
        f0, f1 = fprs[i - 1], fprs[i]
        p0, p1 = pros[i - 1], pros[i]
        if f1 <= f0:
            continue
        if f0 >= limit:
            break
        if f1 > limit:
            p1 = p0 + (p1 - p0) * (limit - f0) / (f1 - f0)
            f1 = limit
        area += 0.5 * (p0 + p1) * (f1 - f0)
        if f1 >= limit:
            break
    return area / limit


# ---------------------------------------------------------------------------
# category evaluation and reports


@dataclass(frozen=True)
class CategoryReport:
    """Metric triple for one category plus the counts behind it."""

    category: str
    image_auroc: float
    pixel_auroc: float
    pro_score: float
    num_images: int
    num_anomalous: int


@dataclass
class EvalReport:
    """Per-category metrics with unweighted means across categories."""

    categories: list[CategoryReport] = field(default_factory=list)

    def mean_image_auroc(self) -> float:
        return float(np.mean([c.image_auroc for c in self.categories]))

    def mean_pixel_auroc(self) -> float:
        return float(np.mean([c.pixel_auroc for c in self.categories]))

    def mean_pro(self) -> float:
        return float(np.mean([c.pro_score for c in self.categories]))

    def to_text(self) -> str:
        """Structured one-record-per-line form, exact float round-trip."""
        lines = []
        for c in self.categories:
            lines.append(
                f"category={c.category} image_auroc={c.image_auroc!r} "
                f"pixel_auroc={c.pixel_auroc!r} pro={c.pro_score!r} "
                f"images={c.num_images} anomalous={c.num_anomalous}"
            )
        lines.append(
            f"mean image_auroc={self.mean_image_auroc()!r} "
            f"pixel_auroc={self.mean_pixel_auroc()!r} pro={self.mean_pro()!r}"
        )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        report = cls()
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("mean "):
                continue
            fields = dict(part.split("=", 1) for part in line.split())
            report.categories.append(
                CategoryReport(
                    category=fields["category"],
                    image_auroc=float(fields["image_auroc"]),
                    pixel_auroc=float(fields["pixel_auroc"]),
                    pro_score=float(fields["pro"]),
                    num_images=int(fields["images"]),
                    num_anomalous=int(fields["anomalous"]),
                )
            )
        if not report.categories:
            raise ValueError("no category records found in report text")
        return report

    def to_table(self) -> str:
        """Human-readable table: one row per category, percent with one decimal."""
        width = max([len("category")] + [len(c.category) for c in self.categories])
        header = f"{'category':<{width}}  img-auroc/pro  pixel-auroc"
        rows = [header]
        for c in self.categories:
            rows.append(
                f"{c.category:<{width}}  "
                f"{100 * c.image_auroc:.1f}/{100 * c.pro_score:.1f}  "
                f"{100 * c.pixel_auroc:.1f}"
            )
        rows.append(
            f"{'mean':<{width}}  "
            f"{100 * self.mean_image_auroc():.1f}/{100 * self.mean_pro():.1f}  "
            f"{100 * self.mean_pixel_auroc():.1f}"
        )
        return "\n".join(rows) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(path).with_name(Path(path).name + ".tmp")
        tmp.write_text(self.to_text())
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls.from_text(Path(path).read_text())


def evaluate_category(
    category: str,
    image_scores: np.ndarray,
    labels: np.ndarray,
    maps: list[np.ndarray],
    masks: list[np.ndarray],
    fpr_limit: float = 0.3,
) -> CategoryReport:
    """All three metrics for one category's test set."""
    labels = np.asarray(labels).ravel()
    return CategoryReport(
        category=category,
        image_auroc=float(auroc(image_scores, labels)),
        pixel_auroc=float(pixel_auroc(maps, masks)),
        pro_score=float(pro(maps, masks, fpr_limit=fpr_limit)),
        num_images=int(labels.size),
        num_anomalous=int(labels.sum()),
    )
