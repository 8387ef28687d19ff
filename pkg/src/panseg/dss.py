"""Multi-scale Hessian line enhancement with direction-specific weighting.

The filter enhances bright tubular structures (vessels) and boosts, by a
configurable weight, structures whose axis is nearly perpendicular to the
head-to-foot (z) axis. All scales are physical (mm); anisotropic voxel
spacing is handled by per-axis sigma division and derivative rescaling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .volume import Volume3D

# Kernel truncation radius in sigmas. 4 sigma (the usual choice) loses
# enough of the second-derivative moment to bias Hxx on a quadratic field
# by over 1%; 6 sigma keeps analytic fields accurate to ~1e-4.
_TRUNCATE = 6.0


@dataclass(frozen=True)
class DSSParams:
    sigma_base: float = 1.0         # smallest filter scale, mm
    n_scales: int = 7               # scales are k * sigma_base, k = 1..n
    direction_weight: float = 2.0   # boost for near-horizontal structures
    direction_threshold: float = 0.25  # |e1 . uz| at or below this is boosted
    gamma23: float = 1.0            # cross-section asymmetry exponent
    gamma12: float = 0.5            # axis-curvature penalty exponent
    alpha: float = 0.25             # tolerance for positive axis curvature

    def validate(self):
        if self.sigma_base <= 0:
            raise ValueError("sigma_base must be > 0")
        if self.n_scales < 1:
            raise ValueError("n_scales must be >= 1")
        if self.direction_weight < 1:
            raise ValueError("direction_weight must be >= 1")
        if not 0.0 <= self.direction_threshold <= 1.0:
            raise ValueError("direction_threshold must be in [0, 1]")


@dataclass(frozen=True)
class Eig3:
    """Eigen-decomposition of a symmetric 3x3 matrix, eigenvalues sorted
    by algebraic value descending; eigenvectors unit-norm with the first
    nonzero component positive."""

    values: np.ndarray   # (3,)
    vectors: np.ndarray  # (3, 3), column i pairs with values[i]


def gaussian_hessian(v: Volume3D, sigma_mm: float) -> np.ndarray:
    """Gaussian-derivative Hessian at scale ``sigma_mm``.

    Returns the six unique components stacked on the last axis in the order
    (xx, yy, zz, xy, xz, yz), in intensity units per mm^2. Boundaries are
    handled by edge replication.
    """
    if sigma_mm <= 0:
        raise ValueError("sigma must be > 0")
    sx, sy, sz = v.spacing
    sig = (sigma_mm / sz, sigma_mm / sy, sigma_mm / sx)  # array axes (z, y, x)
    data = v.data.astype(np.float64)

    def deriv(order_zyx, scale):
        return gaussian_filter(data, sig, order=order_zyx, mode="nearest",
                               truncate=_TRUNCATE) / scale

    hxx = deriv((0, 0, 2), sx * sx)
    hyy = deriv((0, 2, 0), sy * sy)
    hzz = deriv((2, 0, 0), sz * sz)
    hxy = deriv((0, 1, 1), sx * sy)
    hxz = deriv((1, 0, 1), sx * sz)
    hyz = deriv((1, 1, 0), sy * sz)
    return np.stack([hxx, hyy, hzz, hxy, hxz, hyz], axis=-1)


def _hessian_matrices(v: Volume3D, sigma_mm: float) -> np.ndarray:
    """Full (N, 3, 3) Hessian stack for every voxel."""
    h = gaussian_hessian(v, sigma_mm).reshape(-1, 6)
    mats = np.empty((h.shape[0], 3, 3), dtype=np.float64)
    mats[:, 0, 0] = h[:, 0]
    mats[:, 1, 1] = h[:, 1]
    mats[:, 2, 2] = h[:, 2]
    mats[:, 0, 1] = mats[:, 1, 0] = h[:, 3]
    mats[:, 0, 2] = mats[:, 2, 0] = h[:, 4]
    mats[:, 1, 2] = mats[:, 2, 1] = h[:, 5]
    return mats


def _fix_sign(vectors: np.ndarray) -> np.ndarray:
    """Flip eigenvectors so the first component with |v| > 1e-12 is positive.

    ``vectors`` has shape (..., 3, 3) with eigenvectors in columns.
    """
    comp = np.moveaxis(vectors, -2, 0)  # component-major view
    nonzero = np.abs(comp) > 1e-12
    first = np.argmax(nonzero, axis=0)
    lead = np.take_along_axis(vectors, first[..., None, :], axis=-2)[..., 0, :]
    flip = np.where(lead < 0, -1.0, 1.0)
    return vectors * flip[..., None, :]


def eigh_descending(mats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched symmetric eigendecomposition, eigenvalues descending.

    ``mats`` is (..., 3, 3); returns (values (..., 3), vectors (..., 3, 3))
    with eigenvector i in column i and a deterministic sign convention.
    """
    w, vec = np.linalg.eigh(mats)
    w = w[..., ::-1]
    vec = vec[..., ::-1]
    return w, _fix_sign(vec)


def eig3_sym(mat: np.ndarray) -> Eig3:
    """Eigen-decomposition of one symmetric 3x3 matrix."""
    m = np.asarray(mat, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix entries must be finite")
    w, vec = eigh_descending(m)
    return Eig3(w, vec)


def line_measure(lam: np.ndarray, gamma23: float = 1.0, gamma12: float = 0.5,
                 alpha: float = 0.25) -> np.ndarray:
    """Bright-line response from sorted eigenvalues.

    ``lam`` is (..., 3) with lam1 >= lam2 >= lam3. The response is
    |lam3| * (lam2/lam3)^g23, attenuated by the lam1 term: multiplied by
    (1 + lam1/|lam2|)^g12 when lam1 <= 0 and by (1 - alpha*lam1/|lam2|)^g12
    when 0 < lam1 < |lam2|/alpha; zero otherwise and whenever lam2 >= 0.
    """
    lam = np.asarray(lam, dtype=np.float64)
    l1, l2, l3 = lam[..., 0], lam[..., 1], lam[..., 2]
    out = np.zeros(l1.shape, dtype=np.float64)
    tube = l2 < 0
    if not np.any(tube):
        return out
    safe_l3 = np.where(l3 < 0, l3, -1.0)
    safe_l2 = np.where(l2 < 0, l2, -1.0)
    base = np.abs(safe_l3) * (safe_l2 / safe_l3) ** gamma23
    ratio = l1 / np.abs(safe_l2)
    neg = tube & (l1 <= 0)
    pos = tube & (l1 > 0) & (ratio < 1.0 / alpha)
    np.copyto(out, base * np.maximum(1.0 + ratio, 0.0) ** gamma12, where=neg)
    np.copyto(out, base * np.maximum(1.0 - alpha * ratio, 0.0) ** gamma12,
              where=pos)
    return out


def _scale_sweep(v: Volume3D, params: DSSParams, want_vectors: bool):
    """Max response over scales plus per-voxel winners.

    Returns (best response, winning sigma, |e1.uz| at the winner or None).
    """
    n = v.data.size
    best = np.zeros(n, dtype=np.float64)
    win_sigma = np.zeros(n, dtype=np.float64)
    e1z = np.ones(n, dtype=np.float64) if want_vectors else None
    for k in range(1, params.n_scales + 1):
        sigma = k * params.sigma_base
        mats = _hessian_matrices(v, sigma)
        if want_vectors:
            lam, vec = eigh_descending(mats)
        else:
            lam = np.linalg.eigvalsh(mats)[..., ::-1]
            vec = None
        resp = sigma * sigma * line_measure(lam, params.gamma23,
                                            params.gamma12, params.alpha)
        better = resp > best
        best[better] = resp[better]
        win_sigma[better] = sigma
        if want_vectors:
            # vector rows are components (x, y, z); column 0 is e1
            e1z[better] = np.abs(vec[better, 2, 0])
    return best, win_sigma, e1z


def dss_volume(v: Volume3D, params: DSSParams) -> Volume3D:
    """Direction-weighted multi-scale line enhancement.

    Per voxel the response is the max over scales of
    ``sigma_k^2 * line_measure``; when the principal eigenvector at the
    winning scale is within ``direction_threshold`` of perpendicular to the
    z axis the response is multiplied by ``direction_weight``.
    """
    params.validate()
    best, _, e1z = _scale_sweep(v, params, want_vectors=True)
    out = np.where(e1z <= params.direction_threshold,
                   params.direction_weight * best, best)
    return v.with_data(out.reshape(v.data.shape))


def dss_scale_argmax(v: Volume3D, params: DSSParams) -> Volume3D:
    """Winning scale (mm) per voxel; zero where no scale responded.
    Diagnostic companion to :func:`dss_volume`."""
    params.validate()
    _, win_sigma, _ = _scale_sweep(v, params, want_vectors=False)
    return v.with_data(win_sigma.reshape(v.data.shape))
