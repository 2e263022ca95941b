"""Dense fully connected 3D CRF over all voxel pairs.

The Gibbs energy couples per-voxel label costs (negative log probabilities
from the unary model) with Potts pairwise potentials weighted by two Gaussian
kernels: a spatial one over voxel positions in millimetres, and a bilateral
one over position plus intensity. Inference runs parallel mean-field updates
in which each kernel convolution is evaluated with a linear-time Gaussian
transform (``fastgauss``); exact quadratic references for both the filtering
and the MAP labeling are provided for small instances.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fastgauss
from .errors import GuardError, ShapeMismatchError
from .volume import LabelVolume, ProbVolume, QDistribution, Volume3D, require_same_grid

UNARY_FLOOR = 1e-7
ENERGY_GUARD = 4096
DIRECT_FILTER_GUARD = 32768
BRUTE_FORCE_GUARD = 10_000_000


@dataclass(frozen=True)
class CrfParams:
    """Pairwise weights, kernel widths (mm / intensity units) and iteration count."""

    w_pos: float
    w_bil: float
    sigma_pos: float
    sigma_bil: float
    sigma_int: float
    iterations: int = 10

    def __post_init__(self):
        if self.w_pos < 0 or self.w_bil < 0:
            raise ValueError("pairwise weights must be nonnegative")
        if min(self.sigma_pos, self.sigma_bil, self.sigma_int) <= 0:
            raise ValueError("kernel widths must be strictly positive")
        if self.iterations < 1:
            raise ValueError("iterations must be a positive integer")


#: Defaults found by random-search tuning on the synthetic phantom suite
#: (scripts/tune_crf_on_phantom.py); not taken from any published source.
DEFAULT_PARAMS = CrfParams(
    w_pos=0.5, w_bil=1.0, sigma_pos=2.5, sigma_bil=10.0, sigma_int=20.0, iterations=10
)

_PARAM_KEYS = ("w_pos", "w_bil", "sigma_pos_mm", "sigma_bil_mm", "sigma_int", "iterations")


def save_params(params: CrfParams, path: str | Path) -> None:
    """Serialize as a flat key=value text file."""
    vals = (params.w_pos, params.w_bil, params.sigma_pos, params.sigma_bil,
            params.sigma_int, params.iterations)
    Path(path).write_text("".join(f"{k} = {v!r}\n" for k, v in zip(_PARAM_KEYS, vals)))


def load_params(path: str | Path) -> CrfParams:
    fields = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    missing = [k for k in _PARAM_KEYS if k not in fields]
    if missing:
        raise ValueError(f"{path}: missing CRF parameter keys {missing}")
    return CrfParams(
        w_pos=float(fields["w_pos"]),
        w_bil=float(fields["w_bil"]),
        sigma_pos=float(fields["sigma_pos_mm"]),
        sigma_bil=float(fields["sigma_bil_mm"]),
        sigma_int=float(fields["sigma_int"]),
        iterations=int(fields["iterations"]),
    )


# ---------------------------------------------------------------------------
# Feature construction
# ---------------------------------------------------------------------------

def spatial_features(dims: tuple[int, int, int], spacing) -> np.ndarray:
    """(N, 3) physical voxel-centre positions in mm, x-fastest order."""
    nx, ny, nz = dims
    sx, sy, sz = spacing
    zz, yy, xx = np.meshgrid(
        np.arange(nz) * sz, np.arange(ny) * sy, np.arange(nx) * sx, indexing="ij"
    )
    return np.stack([xx, yy, zz], axis=-1).reshape(-1, 3)


def bilateral_features(intensity: Volume3D) -> np.ndarray:
    """(N, 4) position-plus-intensity features, x-fastest order."""
    pos = spatial_features(intensity.dims, intensity.spacing)
    return np.concatenate([pos, intensity.data.reshape(-1, 1).astype(np.float64)], axis=1)


# ---------------------------------------------------------------------------
# Gaussian filtering (exact reference and linear-time approximation)
# ---------------------------------------------------------------------------

def gaussian_filter_direct(values: np.ndarray, features: np.ndarray, sigmas) -> np.ndarray:
    """Exact O(N^2) Gaussian transform with the self term excluded.

    ``out_i = sum_{j != i} exp(-|f_i - f_j|^2_scaled / 2) v_j`` where each
    feature column is scaled by its kernel width.
    """
    f = fastgauss.scale_features(features, sigmas)
    n = f.shape[0]
    if n > DIRECT_FILTER_GUARD:
        raise GuardError(f"direct filter limited to N <= {DIRECT_FILTER_GUARD}, got {n}")
    v, squeeze = fastgauss._as_2d(values)
    if v.shape[0] != n:
        raise ShapeMismatchError(f"values rows {v.shape[0]} != feature rows {n}")
    out = np.empty_like(v)
    block = max(1, int(2**22 // max(n, 1)))
    for start in range(0, n, block):
        stop = min(start + block, n)
        d2 = ((f[start:stop, None, :] - f[None, :, :]) ** 2).sum(-1)
        k = np.exp(-0.5 * d2)
        k[np.arange(stop - start), np.arange(start, stop)] = 0.0
        out[start:stop] = k @ v
    return out[:, 0] if squeeze else out


def gaussian_filter_fast(values: np.ndarray, features: np.ndarray, sigmas) -> np.ndarray:
    """Linear-time approximation of :func:`gaussian_filter_direct`.

    Uses an exact separable convolution when the scaled features form a
    complete regular grid, and a calibrated splat/blur/slice lattice
    otherwise. The self term is removed analytically (kernel value 1 at zero
    distance).
    """
    f = fastgauss.scale_features(features, sigmas)
    v, squeeze = fastgauss._as_2d(values)
    if v.shape[0] != f.shape[0]:
        raise ShapeMismatchError(f"values rows {v.shape[0]} != feature rows {f.shape[0]}")
    plan = fastgauss.GaussianTransform.build(f)
    out = plan.apply(v) - v
    return out[:, 0] if squeeze else out


# ---------------------------------------------------------------------------
# Energy and inference
# ---------------------------------------------------------------------------

def _check_instance(unary: ProbVolume, intensity: Volume3D) -> None:
    require_same_grid(unary, intensity)


def _pairwise_kernel_block(pos, intens, params, i0, i1):
    d2 = ((pos[i0:i1, None, :] - pos[None, :, :]) ** 2).sum(-1)
    di2 = (intens[i0:i1, None] - intens[None, :]) ** 2
    k = params.w_pos * np.exp(-0.5 * d2 / params.sigma_pos**2)
    k += params.w_bil * np.exp(-0.5 * d2 / params.sigma_bil**2 - 0.5 * di2 / params.sigma_int**2)
    return k


def energy(x: LabelVolume, unary: ProbVolume, intensity: Volume3D, params: CrfParams) -> float:
    """Gibbs energy of a labeling: unary negative-log terms plus Potts pairs.

    Quadratic reference implementation, guarded to small instances.
    """
    _check_instance(unary, intensity)
    require_same_grid(x, unary)
    n = x.labels.size
    if n > ENERGY_GUARD:
        raise GuardError(f"energy() limited to N <= {ENERGY_GUARD}, got {n}")

    labels = x.labels.reshape(-1).astype(np.int64)
    if labels.max(initial=0) >= unary.classes:
        raise ValueError("labeling uses a class outside the unary distribution")
    probs = unary.probs.reshape(unary.classes, -1)
    p_of_x = probs[labels, np.arange(n)]
    total = float(-np.log(np.maximum(p_of_x, UNARY_FLOOR)).sum())

    pos = spatial_features(x.dims, x.spacing)
    intens = intensity.data.reshape(-1).astype(np.float64)
    for i0 in range(0, n, 512):
        i1 = min(i0 + 512, n)
        k = _pairwise_kernel_block(pos, intens, params, i0, i1)
        differ = labels[i0:i1, None] != labels[None, :]
        upper = np.arange(i0, i1)[:, None] < np.arange(n)[None, :]
        total += float((k * (differ & upper)).sum())
    return total


def _neg_log_unary(unary: ProbVolume, dtype=np.float64) -> np.ndarray:
    p = unary.probs.reshape(unary.classes, -1).T.astype(dtype)
    return -np.log(np.maximum(p, dtype(UNARY_FLOOR)))


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=1, keepdims=True)


class MeanFieldEngine:
    """Precomputed filtering plans for repeated mean-field updates on one instance.

    The fast path runs in float32 (memory-bandwidth bound at volume scale);
    the direct-filter path keeps float64 so it can serve as an oracle.
    """

    def __init__(self, unary: ProbVolume, intensity: Volume3D, params: CrfParams,
                 filtering: str = "fast"):
        _check_instance(unary, intensity)
        if filtering not in ("fast", "direct"):
            raise ValueError(f"unknown filtering mode {filtering!r}")
        self.params = params
        self.filtering = filtering
        self.dtype = np.float32 if filtering == "fast" else np.float64
        self.neg_phi = -_neg_log_unary(unary, self.dtype)  # log of floored unary probs, (N, c)
        self.spacing = unary.spacing
        self.grid_shape = unary.probs.shape
        pos = spatial_features(unary.dims, unary.spacing)
        self._pos_feats = fastgauss.scale_features(pos, params.sigma_pos)
        bil = bilateral_features(intensity)
        self._bil_feats = fastgauss.scale_features(
            bil, (params.sigma_bil, params.sigma_bil, params.sigma_bil, params.sigma_int)
        )
        if filtering == "fast":
            self._pos_plan = fastgauss.GaussianTransform.build(self._pos_feats)
            self._bil_plan = fastgauss.GaussianTransform.build(self._bil_feats)

    def _filtered(self, q_flat: np.ndarray) -> np.ndarray:
        p = self.params
        if self.filtering == "fast":
            m_pos = self._pos_plan.apply(q_flat) - q_flat
            m_bil = self._bil_plan.apply(q_flat) - q_flat
        else:
            sigmas_pos = np.ones(3)
            m_pos = gaussian_filter_direct(q_flat, self._pos_feats, sigmas_pos)
            m_bil = gaussian_filter_direct(q_flat, self._bil_feats, np.ones(4))
        return p.w_pos * m_pos + p.w_bil * m_bil

    def step(self, q_flat: np.ndarray) -> np.ndarray:
        """One parallel update of all voxel marginals, rows renormalized."""
        filt = self._filtered(q_flat)
        # Potts compatibility: the cost of label l sums the messages of all others
        cost = filt.sum(axis=1, keepdims=True) - filt
        return _softmax_rows(self.neg_phi - cost)

    def as_qdist(self, q_flat: np.ndarray) -> QDistribution:
        c, nz, ny, nx = self.grid_shape
        probs = q_flat.T.reshape(c, nz, ny, nx).astype(np.float32)
        return QDistribution(probs, self.spacing)


def meanfield_step(q: QDistribution, unary: ProbVolume, intensity: Volume3D,
                   params: CrfParams, filtering: str = "fast") -> QDistribution:
    """One mean-field update of ``q``; see :class:`MeanFieldEngine`."""
    require_same_grid(q, unary)
    engine = MeanFieldEngine(unary, intensity, params, filtering=filtering)
    q_flat = q.probs.reshape(q.classes, -1).T.astype(engine.dtype)
    return engine.as_qdist(engine.step(q_flat))


def infer(unary: ProbVolume, intensity: Volume3D, params: CrfParams,
          filtering: str = "fast",
          early_stop_tol: float | None = None) -> tuple[QDistribution, LabelVolume]:
    """Mean-field inference: marginals after ``params.iterations`` updates plus
    the per-voxel argmax labeling (ties toward the lowest label index).

    The marginals start from the unary distribution.
    """
    engine = MeanFieldEngine(unary, intensity, params, filtering=filtering)
    q = unary.probs.reshape(unary.classes, -1).T.astype(engine.dtype)
    for i in range(params.iterations):
        q_next = engine.step(q)
        if early_stop_tol is not None and np.max(np.abs(q_next - q)) < early_stop_tol:
            q = q_next
            break
        q = q_next
    labels = np.argmax(q, axis=1).astype(np.uint8)
    c, nz, ny, nx = unary.probs.shape
    label_vol = LabelVolume(labels.reshape(nz, ny, nx), unary.spacing)
    return engine.as_qdist(q), label_vol


def brute_force_map(unary: ProbVolume, intensity: Volume3D, params: CrfParams) -> LabelVolume:
    """Global energy minimizer by exhaustive enumeration (lexicographic ties)."""
    _check_instance(unary, intensity)
    n = int(np.prod(unary.dims))
    c = unary.classes
    if c**n > BRUTE_FORCE_GUARD:
        raise GuardError(f"brute force limited to classes^N <= {BRUTE_FORCE_GUARD}")

    probs = unary.probs.reshape(c, -1)
    unary_cost = -np.log(np.maximum(probs, UNARY_FLOOR)).T  # (N, c)
    pos = spatial_features(unary.dims, unary.spacing)
    intens = intensity.data.reshape(-1).astype(np.float64)
    kernel = _pairwise_kernel_block(pos, intens, params, 0, n)
    iu, ju = np.triu_indices(n, k=1)
    kpairs = kernel[iu, ju]

    best_energy = np.inf
    best = None
    total = c**n
    chunk = 65536
    for start in range(0, total, chunk):
        count = min(chunk, total - start)
        codes = start + np.arange(count)
        labs = np.empty((count, n), dtype=np.int64)
        rem = codes
        for pos_i in range(n - 1, -1, -1):
            labs[:, pos_i] = rem % c
            rem = rem // c
        e = unary_cost[np.arange(n)[None, :], labs].sum(axis=1)
        e += (labs[:, iu] != labs[:, ju]) @ kpairs
        i_best = int(np.argmin(e))
        if e[i_best] < best_energy:
            best_energy = float(e[i_best])
            best = labs[i_best]
    nz, ny, nx = unary.probs.shape[1:]
    return LabelVolume(best.reshape(nz, ny, nx).astype(np.uint8), unary.spacing)
