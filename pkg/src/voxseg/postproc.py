"""Segmentation cleanup and evaluation: thresholding, speckle removal,
connected-component labeling/selection, and overlap metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import textkv


class PostprocError(Exception):
    pass


def threshold(confidence: np.ndarray, t: int) -> np.ndarray:
    """Binary volume: voxel is foreground iff confidence >= t percent."""
    if not 0 <= t <= 100:
        raise PostprocError(f"threshold {t} outside [0, 100]")
    return np.asarray(confidence) >= t


def speckle_removal(binary: np.ndarray, neighborhood: int, min_neighbors: int) -> np.ndarray:
    """Drop foreground voxels with fewer than ``min_neighbors`` foreground
    neighbors in their neighborhood cube (center excluded).  One simultaneous
    pass on a snapshot; boundary voxels count only in-volume neighbors."""
    k, eta = int(neighborhood), int(min_neighbors)
    if k <= 0 or k % 2 == 0:
        raise PostprocError(f"neighborhood size must be odd and positive, got {k}")
    if not 0 <= eta < k ** 3:
        raise PostprocError(f"min_neighbors {eta} outside [0, {k ** 3})")
    mask = np.asarray(binary, dtype=bool)
    if eta == 0:
        return mask.copy()
    counts = ndimage.uniform_filter(
        mask.astype(np.float64), size=k, mode="constant", cval=0.0) * float(k ** 3)
    neighbors = np.rint(counts).astype(np.int64) - mask.astype(np.int64)
    return mask & (neighbors >= eta)


_STRUCTURES = {
    6: ndimage.generate_binary_structure(3, 1),
    26: np.ones((3, 3, 3), dtype=bool),
}


@dataclass
class LabelVolume:
    """Component labels 1..L ordered by decreasing size; 0 is background."""

    labels: np.ndarray
    sizes: np.ndarray  # sizes[i] = voxel count of component i + 1

    @property
    def count(self) -> int:
        return len(self.sizes)


def connected_components(binary: np.ndarray, connectivity: int = 26) -> LabelVolume:
    """Deterministic labeling: components sorted by size descending, ties by
    the smallest linear index of their first voxel."""
    if connectivity not in _STRUCTURES:
        raise PostprocError(f"connectivity must be 6 or 26, got {connectivity}")
    mask = np.asarray(binary, dtype=bool)
    raw, n = ndimage.label(mask, structure=_STRUCTURES[connectivity])
    if n == 0:
        return LabelVolume(raw.astype(np.int32), np.zeros(0, dtype=np.int64))
    sizes = np.bincount(raw.ravel(), minlength=n + 1)[1:]
    first = np.full(n + 1, np.iinfo(np.int64).max, dtype=np.int64)
    flat = raw.ravel()
    nz = np.nonzero(flat)[0]
    # scipy labels in raster order, so the first occurrence is minimal
    np.minimum.at(first, flat[nz], nz)
    order = sorted(range(1, n + 1), key=lambda l: (-sizes[l - 1], first[l]))
    remap = np.zeros(n + 1, dtype=np.int32)
    for new, old in enumerate(order, start=1):
        remap[old] = new
    return LabelVolume(remap[raw], sizes[np.asarray(order) - 1])


def select_components(labeled: LabelVolume, largest: int | None = None,
                      min_size: int | None = None,
                      containing=None) -> np.ndarray:
    """Union of components picked by one rule: ``largest`` k, ``min_size``
    threshold, or components containing any of the given positions."""
    rules = sum(v is not None for v in (largest, min_size, containing))
    if rules != 1:
        raise PostprocError("exactly one selection rule must be given")
    labels = labeled.labels
    if largest is not None:
        if largest < 0:
            raise PostprocError("largest must be >= 0")
        return (labels >= 1) & (labels <= largest)
    if min_size is not None:
        keep = np.nonzero(labeled.sizes >= min_size)[0] + 1
        return np.isin(labels, keep)
    picked = set()
    for pos in containing:
        p = tuple(int(c) for c in pos)
        if not all(0 <= c < d for c, d in zip(p, labels.shape)):
            raise PostprocError(f"position {p} outside volume")
        lab = int(labels[p])
        if lab > 0:
            picked.add(lab)
    if not picked:
        return np.zeros(labels.shape, dtype=bool)
    return np.isin(labels, sorted(picked))


@dataclass
class MetricsReport:
    true_positive: int
    false_positive: int
    false_negative: int
    true_negative: int
    iou: float
    precision: float
    recall: float
    f1: float

    def to_kv(self) -> dict[str, str]:
        return {
            "true_positive": str(self.true_positive),
            "false_positive": str(self.false_positive),
            "false_negative": str(self.false_negative),
            "true_negative": str(self.true_negative),
            "iou": repr(self.iou),
            "precision": repr(self.precision),
            "recall": repr(self.recall),
            "f1": repr(self.f1),
        }

    def serialize(self) -> str:
        return textkv.dumps(self.to_kv())

    def csv_row(self, name: str) -> str:
        return f"{name},{self.iou!r},{self.precision!r},{self.recall!r},{self.f1!r}"


def metrics(seg: np.ndarray, gt: np.ndarray) -> MetricsReport:
    """Voxelwise confusion counts and IoU / precision / recall / F1.

    Both-empty volumes count as perfect agreement (all metrics 1); a single
    empty side scores 0.
    """
    seg = np.asarray(seg, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if seg.shape != gt.shape:
        raise PostprocError(f"shape mismatch: {seg.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(seg & gt))
    fp = int(np.count_nonzero(seg & ~gt))
    fn = int(np.count_nonzero(~seg & gt))
    tn = seg.size - tp - fp - fn
    if tp + fp + fn == 0:
        iou = precision = recall = f1 = 1.0
    else:
        iou = tp / (tp + fp + fn)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
    return MetricsReport(tp, fp, fn, tn, iou, precision, recall, f1)


def metrics_from_kv(kv: dict[str, str]) -> MetricsReport:
    return MetricsReport(
        int(kv["true_positive"]), int(kv["false_positive"]),
        int(kv["false_negative"]), int(kv["true_negative"]),
        float(kv["iou"]), float(kv["precision"]),
        float(kv["recall"]), float(kv["f1"]))
