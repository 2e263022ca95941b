"""Grand-challenge segmentation quality metrics.

Volumetric overlap (Dice, VOE), signed relative volume difference (RVD) and
spacing-aware symmetric surface distances (ASD, MSD). Surfaces are
voxel-based: foreground voxels with at least one background 6-neighbour
(out-of-bounds counts as background); distances are measured centre-to-centre
in millimetres with an exact Euclidean distance transform, so a brute-force
O(S^2) computation reproduces them to rounding error.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import EmptyMaskError, ShapeMismatchError
from .volume import LabelVolume


@dataclass(frozen=True)
class MetricsReport:
    """One row of quality metrics for a (prediction, ground-truth) mask pair.

    ``rvd_pct`` is NaN when both masks are empty (undefined by convention).
    """

    voe_pct: float
    rvd_pct: float
    asd_mm: float
    msd_mm: float
    dice_pct: float


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice overlap in percent; two empty masks agree perfectly (100)."""
    pred, gt = _check_pair(pred, gt)
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 100.0
    return 100.0 * 2.0 * int((pred & gt).sum()) / denom


def voe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Volumetric overlap error in percent; two empty masks score 0."""
    pred, gt = _check_pair(pred, gt)
    union = int((pred | gt).sum())
    if union == 0:
        return 0.0
    return 100.0 * (1.0 - int((pred & gt).sum()) / union)


def rvd(pred: np.ndarray, gt: np.ndarray) -> float:
    """Signed relative volume difference in percent, (|pred| - |gt|) / |gt|."""
    pred, gt = _check_pair(pred, gt)
    n_gt = int(gt.sum())
    if n_gt == 0:
        raise EmptyMaskError("RVD is undefined for an empty ground-truth mask")
    return 100.0 * (int(pred.sum()) - n_gt) / n_gt


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Boolean map of foreground voxels with >= 1 background 6-neighbour."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, mode="constant", constant_values=False)
    interior = np.ones_like(mask)
    for axis in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        interior &= padded[tuple(lo)] & padded[tuple(hi)]
    return mask & ~interior


def _surface_distances(pred: np.ndarray, gt: np.ndarray, spacing) -> np.ndarray:
    """Pooled symmetric multiset of surface-to-surface distances in mm."""
    pred, gt = _check_pair(pred, gt)
    if not pred.any() or not gt.any():
        raise EmptyMaskError("surface distances need both masks nonempty")
    sampling = (spacing[2], spacing[1], spacing[0])  # arrays are (z, y, x)
    sp = surface_voxels(pred)
    sg = surface_voxels(gt)
    dist_to_gt = ndimage.distance_transform_edt(~sg, sampling=sampling)
    dist_to_pred = ndimage.distance_transform_edt(~sp, sampling=sampling)
    return np.concatenate([dist_to_gt[sp], dist_to_pred[sg]])


def asd(pred: np.ndarray, gt: np.ndarray, spacing) -> float:
    """Average symmetric surface distance in mm (mean of the pooled multiset)."""
    return float(np.mean(_surface_distances(pred, gt, spacing)))


def msd(pred: np.ndarray, gt: np.ndarray, spacing) -> float:
    """Maximum symmetric surface distance in mm (symmetric Hausdorff)."""
    return float(np.max(_surface_distances(pred, gt, spacing)))


def evaluate(pred: LabelVolume, gt: LabelVolume, cls: int) -> MetricsReport:
    """Binarize both volumes at ``cls`` and compute all five metrics.

    Both masks empty returns the empty-empty conventions (Dice 100, VOE 0,
    surface distances 0) with RVD flagged undefined (NaN); a single empty
    mask raises EmptyMaskError.
    """
    if pred.dims != gt.dims:
        raise ShapeMismatchError(f"dims mismatch: {pred.dims} vs {gt.dims}")
    if not np.allclose(pred.spacing, gt.spacing, rtol=1e-9, atol=0):
        raise ShapeMismatchError(f"spacing mismatch: {pred.spacing} vs {gt.spacing}")
    p = pred.labels == cls
    g = gt.labels == cls
    if not p.any() and not g.any():
        return MetricsReport(voe_pct=0.0, rvd_pct=math.nan, asd_mm=0.0, msd_mm=0.0, dice_pct=100.0)
    dists = _surface_distances(p, g, pred.spacing)
    return MetricsReport(
        voe_pct=voe(p, g),
        rvd_pct=rvd(p, g),
        asd_mm=float(np.mean(dists)),
        msd_mm=float(np.max(dists)),
        dice_pct=dice(p, g),
    )


CSV_HEADER = ["volume_id", "class", "voe_pct", "rvd_pct", "asd_mm", "msd_mm", "dice_pct"]


def write_report_csv(path: str | Path, rows: list[tuple[str, int, MetricsReport]]) -> None:
    """Write one CSV row per (volume, class) with a header line."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for volume_id, cls, rep in rows:
            writer.writerow(
                [volume_id, cls, f"{rep.voe_pct:.6g}", f"{rep.rvd_pct:.6g}",
                 f"{rep.asd_mm:.6g}", f"{rep.msd_mm:.6g}", f"{rep.dice_pct:.6g}"]
            )
