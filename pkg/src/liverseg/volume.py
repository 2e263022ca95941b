"""Volumetric data types and MetaImage (.mhd/.raw) I/O.

Conventions used throughout the toolkit:

* ``dims`` is ``(nx, ny, nz)`` voxel counts; ``spacing`` is ``(sx, sy, sz)``
  in millimetres per voxel.
* Arrays are stored with shape ``(nz, ny, nx)`` (C order) so that a flat
  ``ravel()`` walks x fastest, matching the on-disk raw layout.
* Probability volumes carry the class axis as the slowest dimension:
  array shape ``(classes, nz, ny, nx)``.
* All types are immutable after construction (arrays are marked read-only);
  every operation returns a new object.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeMismatchError, VolumeFormatError

PROB_SUM_TOL = 1e-5

_ELEMENT_TYPES = {
    "MET_SHORT": np.dtype("<i2"),
    "MET_UCHAR": np.dtype("u1"),
    "MET_FLOAT": np.dtype("<f4"),
}
_DTYPE_TO_ELEMENT = {
    np.dtype(np.int16): "MET_SHORT",
    np.dtype(np.uint8): "MET_UCHAR",
    np.dtype(np.float32): "MET_FLOAT",
}


def _check_spacing(spacing):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3:
        raise ValueError(f"spacing must have 3 components, got {spacing}")
    if not all(math.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"spacing components must be positive and finite, got {spacing}")
    return spacing


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Scalar 3D grid with physical voxel spacing.

    ``data`` holds either HU values (int16) or real intensities (float32),
    shape ``(nz, ny, nx)``.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"Volume3D data must be 3-D, got shape {self.data.shape}")
        if self.data.dtype == np.int16:
            dt = np.int16
        else:
            dt = np.float32
        object.__setattr__(self, "data", _freeze(self.data.astype(dt, copy=False)))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def voxel_count(self) -> int:
        return int(self.data.size)


@dataclass(frozen=True, eq=False)
class ProbVolume:
    """Per-voxel categorical distribution over labels.

    ``probs`` has shape ``(classes, nz, ny, nx)``; every per-voxel vector is
    nonnegative and sums to 1 within ``PROB_SUM_TOL``.
    """

    probs: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        if self.probs.ndim != 4:
            raise ValueError(f"ProbVolume probs must be 4-D, got shape {self.probs.shape}")
        if self.probs.shape[0] < 2:
            raise ValueError("ProbVolume needs at least 2 classes")
        probs = self.probs.astype(np.float32, copy=False)
        if probs.size and probs.min() < 0:
            raise ValueError("ProbVolume probabilities must be nonnegative")
        sums = probs.sum(axis=0, dtype=np.float64)
        if probs.size and np.max(np.abs(sums - 1.0)) > PROB_SUM_TOL:
            worst = float(np.max(np.abs(sums - 1.0)))
            raise ValueError(f"per-voxel probabilities must sum to 1 within {PROB_SUM_TOL} (off by {worst:g})")
        object.__setattr__(self, "probs", _freeze(probs))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def classes(self) -> int:
        return int(self.probs.shape[0])

    @property
    def dims(self) -> tuple[int, int, int]:
        _, nz, ny, nx = self.probs.shape
        return (nx, ny, nz)


# Mean-field marginals share the exact layout and invariants of ProbVolume.
QDistribution = ProbVolume


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Per-voxel hard label assignment, unsigned integers in {0, ..., l}."""

    labels: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        if self.labels.ndim != 3:
            raise ValueError(f"LabelVolume labels must be 3-D, got shape {self.labels.shape}")
        labels = self.labels
        if labels.dtype != np.uint8:
            if labels.size and (labels.min() < 0 or labels.max() > 255):
                raise ValueError("labels must fit in uint8")
            labels = labels.astype(np.uint8)
        object.__setattr__(self, "labels", _freeze(labels))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.labels.shape
        return (nx, ny, nz)


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive voxel-index box: ``lo`` and ``hi`` corners per axis (x, y, z)."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        lo = tuple(int(v) for v in self.lo)
        hi = tuple(int(v) for v in self.hi)
        if len(lo) != 3 or len(hi) != 3:
            raise ValueError("BoundingBox needs 3 components per corner")
        if any(l < 0 for l in lo) or any(l > h for l, h in zip(lo, hi)):
            raise ValueError(f"invalid box lo={lo} hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def check_within(self, dims: tuple[int, int, int]) -> None:
        if any(h >= d for h, d in zip(self.hi, dims)):
            raise ValueError(f"box hi={self.hi} exceeds volume dims {dims}")

    @property
    def extent(self) -> tuple[int, int, int]:
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))


AnyVolume = Volume3D | ProbVolume | LabelVolume


def _array_of(vol: AnyVolume) -> np.ndarray:
    if isinstance(vol, Volume3D):
        return vol.data
    if isinstance(vol, ProbVolume):
        return vol.probs
    return vol.labels


def _rebuild(vol: AnyVolume, arr: np.ndarray, spacing) -> AnyVolume:
    if isinstance(vol, Volume3D):
        return Volume3D(arr, spacing)
    if isinstance(vol, ProbVolume):
        return ProbVolume(arr, spacing)
    return LabelVolume(arr, spacing)


def require_same_grid(*vols: AnyVolume) -> None:
    """Raise ShapeMismatchError unless all volumes share dims and spacing."""
    ref = vols[0]
    for v in vols[1:]:
        if v.dims != ref.dims:
            raise ShapeMismatchError(f"dims mismatch: {v.dims} vs {ref.dims}")
        if not np.allclose(v.spacing, ref.spacing, rtol=1e-9, atol=0):
            raise ShapeMismatchError(f"spacing mismatch: {v.spacing} vs {ref.spacing}")


# ---------------------------------------------------------------------------
# MetaImage subset I/O
# ---------------------------------------------------------------------------

def _parse_header(text: str, path: Path) -> dict[str, str]:
    header = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise VolumeFormatError(f"{path}: malformed header line {line!r}")
        key, value = line.split("=", 1)
        header[key.strip()] = value.strip()
    return header


def load_volume(path: str | os.PathLike) -> AnyVolume:
    """Load a volume from a MetaImage header (.mhd) plus raw payload.

    The element type and dimensionality select the returned kind:
    MET_SHORT/MET_FLOAT 3-D -> Volume3D, MET_UCHAR 3-D -> LabelVolume,
    MET_FLOAT 4-D -> ProbVolume (channel axis slowest).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"volume header not found: {path}")
    header = _parse_header(path.read_text(), path)

    for key in ("NDims", "DimSize", "ElementType", "ElementDataFile"):
        if key not in header:
            raise VolumeFormatError(f"{path}: missing header key {key}")
    if header.get("ObjectType", "Image") != "Image":
        raise VolumeFormatError(f"{path}: unsupported ObjectType {header['ObjectType']!r}")
    if header.get("ElementByteOrderMSB", "False") != "False":
        raise VolumeFormatError(f"{path}: big-endian payloads are not supported")

    try:
        ndims = int(header["NDims"])
        dim_size = [int(v) for v in header["DimSize"].split()]
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: bad NDims/DimSize: {exc}") from exc
    if ndims not in (3, 4) or len(dim_size) != ndims or any(d <= 0 for d in dim_size):
        raise VolumeFormatError(f"{path}: NDims={ndims} DimSize={dim_size} unsupported")

    spacing_str = header.get("ElementSpacing", "1 1 1 1")
    try:
        spacing_all = [float(v) for v in spacing_str.split()]
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: bad ElementSpacing: {exc}") from exc
    if len(spacing_all) < 3:
        raise VolumeFormatError(f"{path}: ElementSpacing needs >= 3 components")
    spacing = tuple(spacing_all[:3])
    if any(not math.isfinite(s) or s <= 0 for s in spacing):
        raise VolumeFormatError(f"{path}: non-positive spacing {spacing}")

    elem = header["ElementType"]
    if elem not in _ELEMENT_TYPES:
        raise VolumeFormatError(f"{path}: unsupported ElementType {elem}")
    dtype = _ELEMENT_TYPES[elem]

    raw_path = path.parent / header["ElementDataFile"]
    if not raw_path.exists():
        raise VolumeFormatError(f"{path}: payload file not found: {raw_path}")
    payload = raw_path.read_bytes()
    count = int(np.prod(dim_size))
    expected = count * dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: element count mismatch: header implies {count} elements "
            f"({expected} bytes), payload has {len(payload)} bytes"
        )
    flat = np.frombuffer(payload, dtype=dtype)

    nx, ny, nz = dim_size[0], dim_size[1], dim_size[2]
    if ndims == 3:
        arr = flat.reshape(nz, ny, nx)
        if elem == "MET_UCHAR":
            return LabelVolume(arr, spacing)
        return Volume3D(arr, spacing)
    if elem != "MET_FLOAT":
        raise VolumeFormatError(f"{path}: 4-D volumes must be MET_FLOAT, got {elem}")
    classes = dim_size[3]
    arr = flat.reshape(classes, nz, ny, nx)
    try:
        return ProbVolume(arr, spacing)
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: {exc}") from exc


def save_volume(vol: AnyVolume, path: str | os.PathLike) -> None:
    """Write a volume as a MetaImage header plus sibling .raw payload.

    ``load_volume(save_volume(v))`` reproduces ``v`` bit-exactly.
    """
    path = Path(path)
    if path.suffix != ".mhd":
        path = path.with_suffix(".mhd")
    raw_name = path.with_suffix(".raw").name

    arr = _array_of(vol)
    elem = _DTYPE_TO_ELEMENT[arr.dtype]
    nx, ny, nz = vol.dims
    if isinstance(vol, ProbVolume):
        ndims = 4
        dim_size = f"{nx} {ny} {nz} {vol.classes}"
        spacing = " ".join(repr(s) for s in vol.spacing) + " 1"
    else:
        ndims = 3
        dim_size = f"{nx} {ny} {nz}"
        spacing = " ".join(repr(s) for s in vol.spacing)

    lines = [
        "ObjectType = Image",
        f"NDims = {ndims}",
        f"DimSize = {dim_size}",
        f"ElementSpacing = {spacing}",
        f"ElementType = {elem}",
        "ElementByteOrderMSB = False",
        f"ElementDataFile = {raw_name}",
    ]
    try:
        path.write_text("\n".join(lines) + "\n")
        (path.parent / raw_name).write_bytes(arr.tobytes())
    except OSError as exc:
        raise VolumeFormatError(f"cannot write volume to {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Cropping and resampling
# ---------------------------------------------------------------------------

def pad_voxels(pad_mm: float, spacing: tuple[float, float, float]) -> tuple[int, int, int]:
    """Physical padding converted to voxels per axis, rounded up."""
    if pad_mm < 0:
        raise ValueError(f"pad_mm must be nonnegative, got {pad_mm}")
    return tuple(int(math.ceil(pad_mm / s - 1e-12)) for s in spacing)


def expand_box(bbox: BoundingBox, pad_mm: float, dims, spacing) -> BoundingBox:
    """Expand a box by pad_mm (converted per axis), clamped to the volume."""
    pv = pad_voxels(pad_mm, spacing)
    lo = tuple(max(0, l - p) for l, p in zip(bbox.lo, pv))
    hi = tuple(min(d - 1, h + p) for h, d, p in zip(bbox.hi, dims, pv))
    return BoundingBox(lo, hi)


def crop(vol: AnyVolume, bbox: BoundingBox, pad_mm: float = 0.0) -> AnyVolume:
    """Crop to an inclusive box expanded by ``pad_mm`` (border-clamped).

    Voxel values are copied; spacing is preserved.
    """
    bbox.check_within(vol.dims)
    box = expand_box(bbox, pad_mm, vol.dims, vol.spacing)
    (x0, y0, z0), (x1, y1, z1) = box.lo, box.hi
    arr = _array_of(vol)
    out = arr[..., z0 : z1 + 1, y0 : y1 + 1, x0 : x1 + 1]
    return _rebuild(vol, out.copy(), vol.spacing)


def _axis_coords(src_n: int, dst_n: int) -> np.ndarray:
    # align-corners: src = dst_index * (src_n-1)/(dst_n-1); single sample hits the centre
    if dst_n == 1:
        return np.array([0.5 * (src_n - 1)])
    return np.arange(dst_n) * ((src_n - 1) / (dst_n - 1))


def _axis_spacing(s: float, src_n: int, dst_n: int) -> float:
    # preserve centre-to-centre physical extent; degenerate axes keep cell extent
    if dst_n > 1 and src_n > 1:
        return s * (src_n - 1) / (dst_n - 1)
    return s * src_n / dst_n


def resample(vol: AnyVolume, new_dims: tuple[int, int, int], mode: str = "linear") -> AnyVolume:
    """Resample to ``new_dims`` under the align-corners convention.

    ``linear`` interpolates trilinearly with edge clamping; ``nearest`` picks
    the closest source voxel centre (ties toward the lower index). Label
    volumes accept only ``nearest``. Spacing is rescaled so the physical
    extent is preserved.
    """
    if mode not in ("linear", "nearest"):
        raise ValueError(f"unknown resample mode {mode!r}")
    if isinstance(vol, LabelVolume) and mode == "linear":
        raise ValueError("label volumes must be resampled with mode='nearest'")
    new_dims = tuple(int(d) for d in new_dims)
    if len(new_dims) != 3 or any(d <= 0 for d in new_dims):
        raise ValueError(f"new_dims must be 3 positive integers, got {new_dims}")

    src = vol.dims
    spacing = tuple(
        _axis_spacing(s, sn, dn) for s, sn, dn in zip(vol.spacing, src, new_dims)
    )
    arr = _array_of(vol)
    coords = [_axis_coords(sn, dn) for sn, dn in zip(src, new_dims)]  # x, y, z

    if mode == "nearest":
        idx = [
            np.clip(np.ceil(c - 0.5).astype(np.intp), 0, sn - 1)
            for c, sn in zip(coords, src)
        ]
        out = arr[..., idx[2][:, None, None], idx[1][None, :, None], idx[0][None, None, :]]
        return _rebuild(vol, out.copy(), spacing)

    work = arr.astype(np.float64, copy=False)
    # interpolate one axis at a time: x (last), then y, then z
    for axis_vol, c, sn in zip((-1, -2, -3), coords, src):
        i0 = np.clip(np.floor(c).astype(np.intp), 0, sn - 1)
        i1 = np.minimum(i0 + 1, sn - 1)
        f = c - i0
        a = np.take(work, i0, axis=axis_vol)
        b = np.take(work, i1, axis=axis_vol)
        shape = [1] * work.ndim
        shape[axis_vol] = f.size
        fw = f.reshape(shape)
        work = a * (1.0 - fw) + b * fw
    out = work.astype(np.float32)
    if isinstance(vol, Volume3D) and vol.data.dtype == np.int16:
        out = np.rint(work).astype(np.int16)
    return _rebuild(vol, out, spacing)
