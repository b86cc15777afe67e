"""Severity-adaptive choice of the noising depth for reconstruction.

A nominal-only feature index gives each incoming image a mean K-nearest
distance; equidistant bins over the training distances turn that
distance into a bin; the bin scales the maximum noising depth. Larger
deviations from the nominal set therefore get reconstructed from deeper
noise levels.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError

_INDEX_MAGIC = b"DICIDX01"


@dataclass(frozen=True)
class FeatureIndex:
    """Nominal feature vectors searched with mean K-nearest L1 distance.

    Args:
        vectors: (count, dim) float32 feature vectors.
        num_neighbors: K used for every query against this index.
    """

    vectors: np.ndarray
    num_neighbors: int

    def __post_init__(self) -> None:
        if self.vectors.ndim != 2:
            raise ValueError(f"vectors must be (count, dim), got shape {self.vectors.shape}")
        if self.num_neighbors < 1:
            raise ValueError(f"num_neighbors must be >= 1, got {self.num_neighbors}")
        if self.vectors.shape[0] < self.num_neighbors:
            raise ValueError(
                f"index holds {self.vectors.shape[0]} vectors, fewer than K={self.num_neighbors}"
            )


@dataclass(frozen=True)
class BinTable:
    """Equidistant severity bins over nominal mean-distance values.

    Args:
        edges: (num_bins + 1,) strictly increasing float64 bin edges.
        t_max: largest noising depth any bin can map to.
        min_bin: severity floor; assignments below it are raised to it.
    """

    edges: np.ndarray
    t_max: int
    min_bin: int

    @property
    def num_bins(self) -> int:
        return int(self.edges.shape[0]) - 1

    def __post_init__(self) -> None:
        edges = np.asarray(self.edges, dtype=np.float64)
        object.__setattr__(self, "edges", edges)
        if edges.ndim != 1 or edges.shape[0] < 2:
            raise ValueError(f"edges must be 1-d with at least 2 entries, got shape {edges.shape}")
        widths = np.diff(edges)
        if not (widths > 0.0).all():
            raise ValueError("bin edges must be strictly increasing")
        span = edges[-1] - edges[0]
        if np.abs(widths - widths[0]).max() > 1e-6 * span:
            raise ValueError("bin widths must be constant")
        if self.t_max < 1:
            raise ValueError(f"t_max must be >= 1, got {self.t_max}")
        if not 1 <= self.min_bin <= self.num_bins:
            raise ValueError(f"min_bin {self.min_bin} outside [1, {self.num_bins}]")


def gap_feature_vector(extractor, image: np.ndarray, block: int) -> np.ndarray:
    """Spatially averaged feature vector of one extractor block."""
    fmap = extractor.extract(image, [block])[0]
    return fmap.mean(axis=(1, 2)).astype(np.float32)


def build_feature_index(
    images: list[np.ndarray],
    extractor,
    block: int,
    num_neighbors: int,
) -> FeatureIndex:
    """Index the pooled block features of a nominal image collection."""
    if not images:
        raise ValueError("cannot build an index from zero images")
    vectors = np.stack([gap_feature_vector(extractor, img, block) for img in images])
    return FeatureIndex(vectors=vectors.astype(np.float32), num_neighbors=num_neighbors)


def mean_knn_distance(vector: np.ndarray, index: FeatureIndex, exclude_self: bool = False) -> float:
    """Mean L1 distance from ``vector`` to its K nearest index entries.

    With ``exclude_self`` one exact zero-distance entry is dropped first,
    so a query that is itself a member of the index is measured against
    its neighbors only.
    """
    vector = np.asarray(vector, dtype=np.float64).ravel()
    vectors = index.vectors.astype(np.float64)
    if vector.shape[0] != vectors.shape[1]:
        raise ValueError(
            f"query dim {vector.shape[0]} does not match index dim {vectors.shape[1]}"
        )
    dists = np.abs(vectors - vector).sum(axis=1)
    if exclude_self:
        zero = np.flatnonzero(dists == 0.0)
        if zero.size:
            dists = np.delete(dists, zero[0])
    k = index.num_neighbors
    if dists.shape[0] < k:
        raise ValueError(f"only {dists.shape[0]} candidates available for K={k}")
    nearest = np.partition(dists, k - 1)[:k]
    return float(nearest.mean())


def training_mean_distances(index: FeatureIndex) -> np.ndarray:
    """Mean K-nearest distance for every index entry against the rest."""
    return np.array(
        [mean_knn_distance(v, index, exclude_self=True) for v in index.vectors],
        dtype=np.float64,
    )


def build_bins(
    mean_distances: np.ndarray,
    num_bins: int,
    t_max: int,
    min_bin: int,
) -> BinTable:
    """Equidistant bins spanning the range of nominal mean distances."""
    mean_distances = np.asarray(mean_distances, dtype=np.float64)
    if num_bins < 1:
        raise ValueError(f"num_bins must be >= 1, got {num_bins}")
    if mean_distances.size < 2:
        raise ValueError("need at least two mean distances to span a bin range")
    lo = float(mean_distances.min())
    hi = float(mean_distances.max())
    if hi <= lo:
        raise ValueError(
            "degenerate distance range (all training mean distances equal); "
            "use a static noising depth instead of severity bins"
        )
    edges = np.linspace(lo, hi, num_bins + 1, dtype=np.float64)
    return BinTable(edges=edges, t_max=t_max, min_bin=min_bin)


def assign_bin(distance: float, table: BinTable) -> int:
    """Bin index in [1, num_bins] for a mean-distance value.

    Intervals are half-open with the last bin closed above; values
    outside the edge range clamp to the first or last bin; the result
    never falls below ``table.min_bin``.
    """
    if not math.isfinite(distance):
        raise ValueError(f"distance must be finite, got {distance}")
    raw = int(np.searchsorted(table.edges, distance, side="right"))
    bin_index = min(max(raw, 1), table.num_bins)
    return max(bin_index, table.min_bin)


def dynamic_step(bin_index: int, table: BinTable, round_multiple: int = 10) -> int:
    """Noising depth for a severity bin: the bin fraction of ``t_max``.

    The raw depth floor(bin / num_bins * t_max) is rounded to the
    nearest multiple of ``round_multiple`` and clamped to [1, t_max].
    """
    if not 1 <= bin_index <= table.num_bins:
        raise ValueError(f"bin_index {bin_index} outside [1, {table.num_bins}]")
    if round_multiple < 1:
        raise ValueError(f"round_multiple must be >= 1, got {round_multiple}")
    b = max(bin_index, table.min_bin)
    raw = math.floor(b * table.t_max / table.num_bins)
    t = round_multiple * math.floor(raw / round_multiple + 0.5)
    return min(max(t, 1), table.t_max)


def choose_step(
    image: np.ndarray,
    extractor,
    block: int,
    index: FeatureIndex,
    table: BinTable,
    round_multiple: int = 10,
    exclude_self: bool = False,
) -> tuple[int, float, int]:
    """Full severity decision for one image: (depth, mean distance, bin).

    Pass ``exclude_self`` when the image is a member of the indexed set,
    so its own zero distance does not drag the severity estimate down;
    that keeps member queries on the same leave-one-out scale the bin
    edges were built from.
    """
    vector = gap_feature_vector(extractor, image, block)
    distance = mean_knn_distance(vector, index, exclude_self=exclude_self)
    bin_index = assign_bin(distance, table)
    return dynamic_step(bin_index, table, round_multiple), distance, bin_index


# ---------------------------------------------------------------------------
# persistence: fixed binary header + little-endian float payloads

_HEADER = struct.Struct("<IIIIII")


def save_index(path: str | Path, index: FeatureIndex, table: BinTable) -> None:
    """Persist an index and its bin table as one self-describing file."""
    n, dim = index.vectors.shape
    payload = [
        _INDEX_MAGIC,
        _HEADER.pack(dim, n, index.num_neighbors, table.num_bins, table.t_max, table.min_bin),
        np.ascontiguousarray(table.edges, dtype="<f8").tobytes(),
        np.ascontiguousarray(index.vectors, dtype="<f4").tobytes(),
    ]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(path).with_name(Path(path).name + ".tmp")
    tmp.write_bytes(b"".join(payload))
    tmp.replace(path)


def load_index(path: str | Path) -> tuple[FeatureIndex, BinTable]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"index file not found: {path}") from None
    if blob[: len(_INDEX_MAGIC)] != _INDEX_MAGIC:
        raise CheckpointError(f"{path} is not a feature index file (bad magic)")
    offset = len(_INDEX_MAGIC)
    try:
        dim, n, k, num_bins, t_max, min_bin = _HEADER.unpack_from(blob, offset)
    except struct.error:
        raise CheckpointError(f"{path} is truncated inside the header") from None
    offset += _HEADER.size
    edges_bytes = (num_bins + 1) * 8
    vec_bytes = n * dim * 4
    if len(blob) < offset + edges_bytes + vec_bytes:
        raise CheckpointError(
            f"{path} is truncated: expected {offset + edges_bytes + vec_bytes} bytes, "
            f"got {len(blob)}"
        )
    edges = np.frombuffer(blob, dtype="<f8", count=num_bins + 1, offset=offset).copy()
    offset += edges_bytes
    vectors = (
        np.frombuffer(blob, dtype="<f4", count=n * dim, offset=offset).reshape(n, dim).copy()
    )
    return (
        FeatureIndex(vectors=vectors, num_neighbors=k),
        BinTable(edges=edges, t_max=t_max, min_bin=min_bin),
    )
