"""Deterministic synthetic abdomen phantoms with exact ground truth.

A phantom is an ellipsoidal liver containing spherical lesions, rasterized
at voxel centres over a configurable grid with Gaussian intensity noise.
Intensity levels mimic venous-phase contrast: liver around 100 HU on a
~-80 HU background, lesions either hypo-intense (~40) or hyper-intense
(~160). An oracle unary generator turns the ground truth into corrupted
probability maps so the full pipeline can be exercised without real data.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError
from .volume import LabelVolume, ProbVolume, Volume3D


@dataclass(frozen=True)
class LesionSpec:
    center_mm: tuple[float, float, float]
    radius_mm: float
    hu: float = 40.0

    def __post_init__(self):
        if self.radius_mm <= 0:
            raise ValueError("lesion radius must be positive")


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 32)
    spacing: tuple[float, float, float] = (2.0, 2.0, 3.0)
    liver_center_mm: tuple[float, float, float] = (64.0, 64.0, 48.0)
    liver_axes_mm: tuple[float, float, float] = (44.0, 34.0, 30.0)
    liver_hu: float = 100.0
    background_hu: float = -80.0
    lesions: tuple[LesionSpec, ...] = ()
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if any(d <= 0 for d in self.dims):
            raise ValueError("dims must be positive")
        if any(a <= 0 for a in self.liver_axes_mm):
            raise ValueError("liver semi-axes must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        min_axis = min(self.liver_axes_mm)
        for les in self.lesions:
            rel = np.asarray(les.center_mm, dtype=float) - np.asarray(self.liver_center_mm)
            rel /= np.asarray(self.liver_axes_mm)
            # conservative containment: centre offset plus radius against the
            # smallest semi-axis must stay inside the unit ball
            if np.linalg.norm(rel) + les.radius_mm / min_axis > 1.0:
                raise DataError(
                    f"lesion at {les.center_mm} r={les.radius_mm} is not fully "
                    f"inside the liver ellipsoid"
                )


def _voxel_centers_mm(dims, spacing):
    nx, ny, nz = dims
    sx, sy, sz = spacing
    zz, yy, xx = np.meshgrid(
        np.arange(nz) * sz, np.arange(ny) * sy, np.arange(nx) * sx, indexing="ij"
    )
    return xx, yy, zz


def generate(spec: PhantomSpec) -> tuple[Volume3D, LabelVolume]:
    """Rasterize the phantom: noisy CT intensities plus noiseless labels."""
    xx, yy, zz = _voxel_centers_mm(spec.dims, spec.spacing)
    cx, cy, cz = spec.liver_center_mm
    ax, ay, az = spec.liver_axes_mm
    inside_liver = (
        ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 + ((zz - cz) / az) ** 2
    ) <= 1.0

    labels = np.zeros(inside_liver.shape, dtype=np.uint8)
    labels[inside_liver] = 1
    ct = np.full(inside_liver.shape, spec.background_hu, dtype=np.float32)
    ct[inside_liver] = spec.liver_hu
    for les in spec.lesions:
        lx, ly, lz = les.center_mm
        inside = (xx - lx) ** 2 + (yy - ly) ** 2 + (zz - lz) ** 2 <= les.radius_mm**2
        labels[inside] = 2
        ct[inside] = les.hu

    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        ct = ct + rng.normal(0.0, spec.noise_sigma, size=ct.shape).astype(np.float32)
    return Volume3D(ct, spec.spacing), LabelVolume(labels, spec.spacing)


def oracle_unary(gt: LabelVolume, blur_sigma_mm: float = 0.0, error_rate: float = 0.0,
                 seed: int = 0, classes: int | None = None) -> ProbVolume:
    """Synthetic classifier output from ground truth.

    One-hot labels are blurred spatially per class (sigma in mm), then a
    seeded fraction ``error_rate`` of voxels has its two most probable
    classes swapped; rows are renormalized.
    """
    if not 0.0 <= error_rate < 0.5:
        raise ValueError(f"error_rate must lie in [0, 0.5), got {error_rate}")
    if blur_sigma_mm < 0:
        raise ValueError("blur_sigma_mm must be nonnegative")
    n_classes = classes if classes is not None else int(gt.labels.max()) + 1
    n_classes = max(n_classes, 2)
    if gt.labels.max() >= n_classes:
        raise ValueError("labels exceed the requested class count")

    one_hot = np.stack([(gt.labels == k).astype(np.float64) for k in range(n_classes)])
    if blur_sigma_mm > 0:
        sig_vox = (
            blur_sigma_mm / gt.spacing[2],
            blur_sigma_mm / gt.spacing[1],
            blur_sigma_mm / gt.spacing[0],
        )
        one_hot = np.stack(
            [ndimage.gaussian_filter(ch, sigma=sig_vox, mode="nearest") for ch in one_hot]
        )
    probs = one_hot / one_hot.sum(axis=0, keepdims=True)

    if error_rate > 0:
        rng = np.random.default_rng(seed)
        flat = probs.reshape(n_classes, -1)
        swap = rng.random(flat.shape[1]) < error_rate
        cols = np.nonzero(swap)[0]
        order = np.argsort(-flat[:, cols], axis=0, kind="stable")
        top, second = order[0], order[1]
        tmp = flat[top, cols].copy()
        flat[top, cols] = flat[second, cols]
        flat[second, cols] = tmp
        probs = flat.reshape(probs.shape)
    return ProbVolume(probs.astype(np.float32), gt.spacing)


# ---------------------------------------------------------------------------
# key=value spec files (the `lesion` key may repeat: "cx cy cz radius hu")
# ---------------------------------------------------------------------------

def load_spec(path: str | Path) -> PhantomSpec:
    fields: dict[str, str] = {}
    lesions: list[LesionSpec] = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key == "lesion":
            parts = [float(v) for v in value.split()]
            if len(parts) != 5:
                raise DataError(f"{path}: lesion needs 'cx cy cz radius hu', got {value!r}")
            lesions.append(LesionSpec(tuple(parts[:3]), parts[3], parts[4]))
        else:
            fields[key] = value

    def triple(key, default, cast=float):
        if key not in fields:
            return default
        return tuple(cast(v) for v in fields[key].split())

    try:
        return PhantomSpec(
            dims=triple("dims", PhantomSpec.dims, int),
            spacing=triple("spacing_mm", PhantomSpec.spacing),
            liver_center_mm=triple("liver_center_mm", PhantomSpec.liver_center_mm),
            liver_axes_mm=triple("liver_axes_mm", PhantomSpec.liver_axes_mm),
            liver_hu=float(fields.get("liver_hu", PhantomSpec.liver_hu)),
            background_hu=float(fields.get("background_hu", PhantomSpec.background_hu)),
            lesions=tuple(lesions),
            noise_sigma=float(fields.get("noise_sigma_hu", PhantomSpec.noise_sigma)),
            seed=int(fields.get("seed", PhantomSpec.seed)),
        )
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path}: bad phantom spec: {exc}") from exc
