"""Two-stage cascade: liver segmentation defines an ROI, lesions are
segmented inside it, and the results fuse into one 3-label volume.

Stage 1 produces liver probabilities over the full volume; the thresholded
(optionally largest-component-filtered) mask yields a padded bounding box.
The CT inside that box is resampled in-plane to the stage-2 input size,
stage 2 produces lesion probabilities there, and the lesion mask is mapped
back into the full volume. Lesion labels can never escape the liver mask.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import crf as crf3d
from .errors import NoLiverFoundError, ShapeMismatchError
from .fcn import ToyNet, forward
from .volume import (
    BoundingBox,
    LabelVolume,
    ProbVolume,
    Volume3D,
    crop,
    expand_box,
    load_volume,
    resample,
)

LIVER_CLASS = 1
LESION_CLASS = 2


@dataclass(frozen=True)
class CascadeConfig:
    liver_threshold: float = 0.5
    roi_pad_mm: float = 10.0
    stage2_input_size: tuple[int, int] = (256, 256)
    largest_component_only: bool = True

    def __post_init__(self):
        if not 0.0 < self.liver_threshold < 1.0:
            raise ValueError("liver_threshold must lie strictly inside (0, 1)")
        if self.roi_pad_mm < 0:
            raise ValueError("roi_pad_mm must be nonnegative")
        if any(s <= 0 for s in self.stage2_input_size):
            raise ValueError("stage2_input_size must be positive")


@dataclass(frozen=True)
class RoiContext:
    """Placement of a stage-2 query grid inside the original volume."""

    bbox: BoundingBox
    full_dims: tuple[int, int, int]


class UnaryProvider:
    """Source of per-voxel class probabilities for one cascade stage."""

    def probs(self, vol: Volume3D, roi: RoiContext | None = None) -> ProbVolume:
        raise NotImplementedError


class StaticProbProvider(UnaryProvider):
    """Precomputed probability map, geometry-adapted to the query volume.

    Serves a query directly when dims match; a stage-2 ROI query against a
    full-volume map is answered by cropping to the ROI box and resampling.
    """

    def __init__(self, prob: ProbVolume):
        self.prob = prob

    def probs(self, vol: Volume3D, roi: RoiContext | None = None) -> ProbVolume:
        if self.prob.dims == vol.dims:
            return self.prob
        if roi is not None and self.prob.dims == roi.full_dims:
            cropped = crop(self.prob, roi.bbox, 0.0)
            return resample(cropped, vol.dims, mode="linear")
        raise ShapeMismatchError(
            f"stored probability map dims {self.prob.dims} match neither the "
            f"query {vol.dims} nor the source volume"
        )


class FileProbProvider(StaticProbProvider):
    def __init__(self, path: str | Path):
        prob = load_volume(path)
        if not isinstance(prob, ProbVolume):
            raise ShapeMismatchError(f"{path} does not hold a probability volume")
        super().__init__(prob)


class ToyNetProvider(UnaryProvider):
    """Slice-wise forward pass of a trained network over the query volume."""

    def __init__(self, net: ToyNet, window: tuple[float, float] = (-100.0, 400.0)):
        self.net = net
        self.window = window

    def slice_input(self, slice_hu: np.ndarray) -> np.ndarray:
        lo, hi = self.window
        return (np.clip(slice_hu, lo, hi) - lo) / (hi - lo)

    def probs(self, vol: Volume3D, roi: RoiContext | None = None) -> ProbVolume:
        planes = [forward(self.net, self.slice_input(s)) for s in vol.data]
        probs = np.stack(planes, axis=1)  # (classes, nz, ny, nx)
        return ProbVolume(probs.astype(np.float32), vol.spacing)


def liver_roi(liver_probs: ProbVolume, cfg: CascadeConfig) -> tuple[LabelVolume, BoundingBox]:
    """Threshold the liver probability map into a mask plus padded box.

    Keeps only the largest 6-connected component when configured; raises
    NoLiverFoundError if nothing survives the threshold.
    """
    if liver_probs.classes < 2:
        raise ValueError("liver probabilities need at least 2 classes")
    # foreground = everything that is not background, so a joint 3-class map
    # (background / liver / lesion) also yields the whole organ region
    fg = liver_probs.probs[1:].sum(axis=0)
    mask = fg >= cfg.liver_threshold
    if not mask.any():
        raise NoLiverFoundError(
            f"no liver found: no voxel reaches threshold {cfg.liver_threshold}"
        )
    if cfg.largest_component_only:
        structure = ndimage.generate_binary_structure(3, 1)  # 6-connectivity
        comp, n_comp = ndimage.label(mask, structure=structure)
        if n_comp > 1:
            sizes = np.bincount(comp.reshape(-1))
            sizes[0] = 0
            mask = comp == int(np.argmax(sizes))

    zs, ys, xs = np.nonzero(mask)
    tight = BoundingBox(
        (int(xs.min()), int(ys.min()), int(zs.min())),
        (int(xs.max()), int(ys.max()), int(zs.max())),
    )
    bbox = expand_box(tight, cfg.roi_pad_mm, liver_probs.dims, liver_probs.spacing)
    return LabelVolume(mask.astype(np.uint8), liver_probs.spacing), bbox


def fuse_labels(liver_mask: LabelVolume, lesion_mask: LabelVolume) -> LabelVolume:
    """Label 2 where lesion and liver overlap, 1 for the rest of the liver, 0 outside."""
    if liver_mask.dims != lesion_mask.dims:
        raise ShapeMismatchError(
            f"dims mismatch: {liver_mask.dims} vs {lesion_mask.dims}"
        )
    liver = liver_mask.labels > 0
    lesion = lesion_mask.labels > 0
    fused = np.zeros(liver.shape, dtype=np.uint8)
    fused[liver] = LIVER_CLASS
    fused[liver & lesion] = LESION_CLASS
    return LabelVolume(fused, liver_mask.spacing)


@dataclass
class CascadeIntermediates:
    liver_probs: ProbVolume
    liver_mask: LabelVolume
    roi_bbox: BoundingBox
    lesion_probs: ProbVolume          # on the resampled ROI grid
    lesion_mask_full: LabelVolume
    timings: dict[str, float] = field(default_factory=dict)


def run_cascade(
    ct: Volume3D,
    liver_model: UnaryProvider,
    lesion_model: UnaryProvider,
    cfg: CascadeConfig | None = None,
    crf_params: crf3d.CrfParams | None = None,
    crf_stages: tuple[str, ...] = ("liver", "lesion"),
) -> tuple[LabelVolume, CascadeIntermediates]:
    """Full two-stage segmentation of a preprocessed (windowed) CT volume.

    When ``crf_params`` is given, each selected stage's probability map is
    refined by mean-field inference before thresholding/argmax.
    """
    cfg = cfg or CascadeConfig()
    timings: dict[str, float] = {"stage1_s": 0.0, "stage2_s": 0.0, "crf_s": 0.0}

    t0 = time.perf_counter()
    liver_probs = liver_model.probs(ct)
    if liver_probs.dims != ct.dims:
        raise ShapeMismatchError(
            f"liver provider returned dims {liver_probs.dims} for query {ct.dims}"
        )
    timings["stage1_s"] += time.perf_counter() - t0

    if crf_params is not None and "liver" in crf_stages:
        t0 = time.perf_counter()
        liver_probs, _ = crf3d.infer(liver_probs, ct, crf_params)
        timings["crf_s"] += time.perf_counter() - t0

    liver_mask, bbox = liver_roi(liver_probs, cfg)
    roi = RoiContext(bbox=bbox, full_dims=ct.dims)

    t0 = time.perf_counter()
    roi_ct = crop(ct, bbox, 0.0)
    w, h = cfg.stage2_input_size
    nz_roi = roi_ct.dims[2]
    roi_ct_rs = resample(roi_ct, (w, h, nz_roi), mode="linear")
    lesion_probs = lesion_model.probs(roi_ct_rs, roi)
    if lesion_probs.dims != roi_ct_rs.dims:
        raise ShapeMismatchError(
            f"lesion provider returned dims {lesion_probs.dims} for query {roi_ct_rs.dims}"
        )
    timings["stage2_s"] += time.perf_counter() - t0

    if crf_params is not None and "lesion" in crf_stages:
        t0 = time.perf_counter()
        lesion_probs, _ = crf3d.infer(lesion_probs, roi_ct_rs, crf_params)
        timings["crf_s"] += time.perf_counter() - t0

    t0 = time.perf_counter()
    # the lesion stage's foreground is its last class (class 1 of a binary
    # background/lesion map, class 2 of a joint 3-label map)
    lesion_fg = lesion_probs.classes - 1
    lesion_arr = np.argmax(lesion_probs.probs, axis=0)
    lesion_roi_mask = LabelVolume((lesion_arr == lesion_fg).astype(np.uint8), lesion_probs.spacing)
    lesion_roi_native = resample(lesion_roi_mask, roi_ct.dims, mode="nearest")

    full = np.zeros(ct.data.shape, dtype=np.uint8)
    (x0, y0, z0), (x1, y1, z1) = bbox.lo, bbox.hi
    full[z0 : z1 + 1, y0 : y1 + 1, x0 : x1 + 1] = lesion_roi_native.labels
    lesion_mask_full = LabelVolume(full, ct.spacing)

    fused = fuse_labels(liver_mask, lesion_mask_full)
    timings["stage2_s"] += time.perf_counter() - t0

    inter = CascadeIntermediates(
        liver_probs=liver_probs,
        liver_mask=liver_mask,
        roi_bbox=bbox,
        lesion_probs=lesion_probs,
        lesion_mask_full=lesion_mask_full,
        timings=timings,
    )
    return fused, inter


# ---------------------------------------------------------------------------
# bbox text sidecar: two lines, "lo x y z" and "hi x y z"
# ---------------------------------------------------------------------------

def save_bbox(bbox: BoundingBox, path: str | Path) -> None:
    Path(path).write_text(
        f"lo {bbox.lo[0]} {bbox.lo[1]} {bbox.lo[2]}\n"
        f"hi {bbox.hi[0]} {bbox.hi[1]} {bbox.hi[2]}\n"
    )


def load_bbox(path: str | Path) -> BoundingBox:
    lines = [l.split() for l in Path(path).read_text().splitlines() if l.strip()]
    vals = {parts[0]: tuple(int(v) for v in parts[1:4]) for parts in lines}
    if "lo" not in vals or "hi" not in vals:
        raise ValueError(f"{path}: bbox sidecar needs 'lo x y z' and 'hi x y z' lines")
    return BoundingBox(vals["lo"], vals["hi"])
