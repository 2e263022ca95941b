import numpy as np
import pytest

from liverseg import phantom
from liverseg.volume import LabelVolume, ProbVolume, Volume3D


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_volume(rng, dims=(4, 4, 2), spacing=(0.7, 0.7, 2.5), dtype=np.int16):
    nx, ny, nz = dims
    if dtype == np.int16:
        data = rng.integers(-1000, 1000, (nz, ny, nx)).astype(np.int16)
    else:
        data = rng.normal(0, 100, (nz, ny, nx)).astype(np.float32)
    return Volume3D(data, spacing)


def random_labels(rng, dims=(4, 4, 2), spacing=(1.0, 1.0, 2.0), classes=3):
    nx, ny, nz = dims
    return LabelVolume(rng.integers(0, classes, (nz, ny, nx)).astype(np.uint8), spacing)


def random_probs(rng, dims=(4, 4, 2), spacing=(1.0, 1.0, 2.0), classes=3):
    nx, ny, nz = dims
    raw = rng.dirichlet(np.ones(classes), size=nz * ny * nx).T
    return ProbVolume(raw.reshape(classes, nz, ny, nx).astype(np.float32), spacing)


def small_phantom(seed=3, noise=8.0, lesions=True):
    spec = phantom.PhantomSpec(
        dims=(32, 32, 24), spacing=(2.0, 2.0, 2.5),
        liver_center_mm=(32, 30, 30), liver_axes_mm=(24, 19, 21),
        lesions=(
            (phantom.LesionSpec((26, 26, 26), 9.0, 40.0),
             phantom.LesionSpec((40, 34, 36), 7.0, 160.0)) if lesions else ()
        ),
        noise_sigma=noise, seed=seed,
    )
    return spec, *phantom.generate(spec)


def kink_free_gradcheck_case(base_seed, h=1e-4, margin_factor=50.0):
    """A seeded (net, image, label, weights) tuple valid for central differences.

    Central differences cannot estimate the derivative when some ReLU
    preactivation lies within the straddle radius of zero (the analytic
    subgradient is fine; the FD quotient mixes the two linear pieces), so
    walk the seed deterministically until every preactivation clears a
    margin well above h.
    """
    from liverseg.fcn import ToyNet, _forward_cached, class_weights

    seed = base_seed
    while True:
        r = np.random.default_rng(seed)
        net = ToyNet(1, 4, 2, classes=2, seed=seed)
        img = r.random((8, 8))
        lab = (r.random((8, 8)) > 0.5).astype(np.uint8)
        _, _, pres = _forward_cached(net, img)
        if min(np.abs(z).min() for z in pres) > margin_factor * h:
            weights = class_weights([lab], 2, min_count=1)
            return net, img, lab, weights
        seed += 1000


# ---------------------------------------------------------------------------
# independent brute-force oracles (deliberately simple, loop-based)
# ---------------------------------------------------------------------------

def brute_force_surface(mask):
    """6-neighbourhood surface voxels by explicit looping."""
    mask = np.asarray(mask, dtype=bool)
    nz, ny, nx = mask.shape
    out = np.zeros_like(mask)
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if not mask[z, y, x]:
                    continue
                for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                                   (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    zz, yy, xx = z + dz, y + dy, x + dx
                    if not (0 <= zz < nz and 0 <= yy < ny and 0 <= xx < nx):
                        out[z, y, x] = True
                        break
                    if not mask[zz, yy, xx]:
                        out[z, y, x] = True
                        break
    return out


def brute_force_surface_distances(pred, gt, spacing):
    """Pooled symmetric surface distances by O(S^2) pairwise search."""
    sx, sy, sz = spacing
    scale = np.array([sz, sy, sx])  # arrays are (z, y, x)
    sp = np.argwhere(brute_force_surface(pred)) * scale
    sg = np.argwhere(brute_force_surface(gt)) * scale
    d_pg = [np.min(np.sqrt(((sg - p) ** 2).sum(1))) for p in sp]
    d_gp = [np.min(np.sqrt(((sp - g) ** 2).sum(1))) for g in sg]
    return np.concatenate([np.asarray(d_pg), np.asarray(d_gp)])


def brute_force_components(mask):
    """6-connected component labeling by BFS."""
    mask = np.asarray(mask, dtype=bool)
    labels = np.zeros(mask.shape, dtype=np.int64)
    nz, ny, nx = mask.shape
    current = 0
    for z0 in range(nz):
        for y0 in range(ny):
            for x0 in range(nx):
                if not mask[z0, y0, x0] or labels[z0, y0, x0]:
                    continue
                current += 1
                stack = [(z0, y0, x0)]
                labels[z0, y0, x0] = current
                while stack:
                    z, y, x = stack.pop()
                    for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                                       (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                        zz, yy, xx = z + dz, y + dy, x + dx
                        if (0 <= zz < nz and 0 <= yy < ny and 0 <= xx < nx
                                and mask[zz, yy, xx] and not labels[zz, yy, xx]):
                            labels[zz, yy, xx] = current
                            stack.append((zz, yy, xx))
    return labels, current
