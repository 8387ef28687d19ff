"""Deformable registration by multi-resolution block matching.

A coarse-to-fine lattice of control points is matched from the fixed onto
the moving volume with a discrete integer-voxel search maximizing local
block ZNCC; control displacements are interpolated trilinearly to a dense
per-voxel field. The field maps fixed-grid positions into the moving
volume: ``warped(x) = moving(x + u(x))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .volume import Volume3D, sample_trilinear


@dataclass(frozen=True)
class RegistrationParams:
    # (control-point spacing, discrete search radius) per level, voxels
    levels: tuple[tuple[int, int], ...] = ((32, 8), (16, 4), (8, 2))
    cap_voxels: float = 24.0     # per-component displacement bound
    smooth: bool = True          # 3^3 mean filter over the control lattice

    def validate(self):
        if not self.levels:
            raise ValueError("at least one level required")
        for cs, r in self.levels:
            if cs < 1 or r < 1:
                raise ValueError(f"bad level ({cs}, {r}): values must be >= 1")
        if self.cap_voxels <= 0:
            raise ValueError("cap_voxels must be > 0")


@dataclass
class DeformationField:
    """Dense displacement field on the fixed grid.

    ``disp_mm[z, y, x]`` is the (dx, dy, dz) displacement in mm; magnitudes
    are bounded by the registration cap.
    """

    disp_mm: np.ndarray  # (nz, ny, nx, 3)
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    cap_mm: float

    def magnitudes(self) -> np.ndarray:
        return np.linalg.norm(self.disp_mm, axis=-1)

    @classmethod
    def zero(cls, like: Volume3D, cap_mm: float = 0.0) -> "DeformationField":
        return cls(np.zeros(like.data.shape + (3,)), like.spacing,
                   like.origin, cap_mm)


def _control_coords(n: int, spacing: int) -> np.ndarray:
    pts = np.arange(0, n, spacing, dtype=np.int64)
    if pts[-1] != n - 1:
        pts = np.append(pts, n - 1)
    return pts


def _match_level(fix: np.ndarray, mov: np.ndarray, disp: np.ndarray,
                 cs: int, radius: int, cap: float):
    """One block-matching sweep: best integer offset per control point.

    All control points are matched together, one candidate offset at a
    time, through sliding-window views over the edge-padded volumes.
    Returns the control coordinate vectors and the updated lattice.
    """
    nz, ny, nx = fix.shape
    bh = max(2, cs // 2)
    block = 2 * bh + 1
    # coarse levels sample the block on a stride-s comb: same structures,
    # a fraction of the arithmetic
    samp = max(1, block // 8)
    nb = len(range(0, block, samp)) ** 3
    pad = bh + radius + int(math.ceil(cap)) + 1
    fixed_pad = np.pad(fix, bh, mode="edge")
    moving_pad = np.pad(mov, pad, mode="edge")
    fwin = np.lib.stride_tricks.sliding_window_view(fixed_pad, (block,) * 3)
    fwin = fwin[..., ::samp, ::samp, ::samp]
    mwin = np.lib.stride_tricks.sliding_window_view(moving_pad, (block,) * 3)
    mwin = mwin[..., ::samp, ::samp, ::samp]

    zc = _control_coords(nz, cs)
    yc = _control_coords(ny, cs)
    xc = _control_coords(nx, cs)
    gz, gy, gx = np.meshgrid(zc, yc, xc, indexing="ij")
    gz, gy, gx = gz.ravel(), gy.ravel(), gx.ravel()
    ncp = gz.size

    fblocks = fwin[gz, gy, gx].reshape(ncp, nb)
    fz = fblocks - fblocks.mean(axis=1, keepdims=True)
    nf = np.sqrt(np.einsum("ij,ij->i", fz, fz))
    live = nf > 1e-8

    d0 = np.round(disp[gz, gy, gx]).astype(np.int64)  # (ncp, 3) in (x, y, z)
    np.clip(d0, -int(cap), int(cap), out=d0)
    base_z = gz + d0[:, 2] + pad - bh
    base_y = gy + d0[:, 1] + pad - bh
    base_x = gx + d0[:, 0] + pad - bh

    best_score = np.full(ncp, -np.inf)
    best_off = np.zeros((ncp, 3), dtype=np.int64)  # (x, y, z) offsets
    for oz in range(-radius, radius + 1):
        for oy in range(-radius, radius + 1):
            for ox in range(-radius, radius + 1):
                mo = mwin[base_z + oz, base_y + oy, base_x + ox].reshape(ncp, nb)
                num = np.einsum("ij,ij->i", fz, mo)
                msum = mo.sum(axis=1)
                m2 = np.einsum("ij,ij->i", mo, mo)
                var = np.maximum(m2 - msum * msum / nb, 0.0)
                den = nf * np.sqrt(var)
                score = np.where(den > 1e-8, num / np.maximum(den, 1e-30),
                                 -np.inf)
                better = live & (score > best_score)
                best_score[better] = score[better]
                best_off[better] = (ox, oy, oz)

    lattice = (d0 + best_off).astype(np.float64)
    stale = ~live | ~np.isfinite(best_score)
    lattice[stale] = disp[gz, gy, gx][stale]  # keep the incoming estimate
    return zc, yc, xc, lattice.reshape(len(zc), len(yc), len(xc), 3)


def register_deformable(moving: Volume3D, fixed: Volume3D,
                        params: RegistrationParams = RegistrationParams()
                        ) -> DeformationField:
    """Estimate the displacement field aligning ``moving`` onto ``fixed``.

    Both volumes must share dims; they are expected to be in the normalized
    VOI frame. Degenerate inputs (no contrast anywhere) yield the zero
    field.
    """
    params.validate()
    if moving.data.shape != fixed.data.shape:
        raise ValueError(
            f"moving {moving.dims} and fixed {fixed.dims} dims differ")
    if min(fixed.data.shape) < 2:
        raise ValueError("registration needs at least 2 voxels per axis")
    nz, ny, nx = fixed.data.shape
    cap = params.cap_voxels
    disp = np.zeros((nz, ny, nx, 3), dtype=np.float64)  # voxel units, (x,y,z)
    mov = moving.data.astype(np.float64)
    fix = fixed.data.astype(np.float64)

    for cs, radius in params.levels:
        zc, yc, xc, lattice = _match_level(fix, mov, disp, cs, radius, cap)
        np.clip(lattice, -cap, cap, out=lattice)
        if params.smooth:
            for c in range(3):
                lattice[..., c] = uniform_filter(lattice[..., c], size=3,
                                                 mode="nearest")
        disp = _interpolate_lattice(lattice, zc, yc, xc, (nz, ny, nx))

    disp_mm = disp * np.asarray(fixed.spacing)
    return DeformationField(disp_mm, fixed.spacing, fixed.origin,
                            cap_mm=float(cap * max(fixed.spacing)))


def _axis_weights(coords: np.ndarray, n: int):
    q = np.arange(n, dtype=np.float64)
    j = np.clip(np.searchsorted(coords, q, side="right") - 1, 0,
                len(coords) - 2)
    t = (q - coords[j]) / (coords[j + 1] - coords[j])
    return j, t


def _interpolate_lattice(lattice, zc, yc, xc, shape) -> np.ndarray:
    """Trilinear lattice-to-grid interpolation, done separably per axis."""
    nz, ny, nx = shape
    jz, tz = _axis_weights(zc.astype(np.float64), nz)
    jy, ty = _axis_weights(yc.astype(np.float64), ny)
    jx, tx = _axis_weights(xc.astype(np.float64), nx)
    w = tz[:, None, None, None]
    a = lattice[jz] * (1.0 - w) + lattice[jz + 1] * w
    w = ty[None, :, None, None]
    a = a[:, jy] * (1.0 - w) + a[:, jy + 1] * w
    w = tx[None, None, :, None]
    return a[:, :, jx] * (1.0 - w) + a[:, :, jx + 1] * w


def warp(field: DeformationField, v: Volume3D, interp: str = "trilinear",
         fill: float = 0.0) -> Volume3D:
    """Resample ``v`` through the field: output(x) = v(x + u(x))."""
    if interp not in ("trilinear", "nearest"):
        raise ValueError(f"unsupported interpolation: {interp}")
    nz, ny, nx = field.disp_mm.shape[:3]
    kk, jj, ii = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx),
                             indexing="ij")
    sp = np.asarray(v.spacing)
    coords = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1).astype(np.float64)
    coords += field.disp_mm.reshape(-1, 3) / sp
    out = sample_trilinear(v, coords, fill, nearest=(interp == "nearest"))
    return Volume3D(out.reshape(nz, ny, nx), field.spacing, field.origin)
