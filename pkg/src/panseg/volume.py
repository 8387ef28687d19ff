"""Dense 3D volume container and core grid operations.

Conventions used throughout the package:

* Voxel data is kept in a numpy array indexed ``data[z, y, x]`` so that the
  flattened (C-order) layout is x-fastest, matching raw MetaImage payloads.
* Size, spacing and origin tuples are always given in ``(x, y, z)`` order.
* The physical position of voxel ``(i, j, k)`` is ``origin + (i*sx, j*sy, k*sz)``
  (voxels are point samples; the grid support is the convex hull of the
  sample positions).
* The voxel z axis is the head-to-foot patient axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import map_coordinates

# Out-of-support fill values by content type (air HU for CT, zero otherwise).
CT_FILL = -1024.0
LABEL_FILL = 0.0


@dataclass(frozen=True)
class Volume3D:
    """A scalar 3D grid (CT intensities, filter responses or probabilities).

    ``data`` is float32, shape ``(nz, ny, nx)``, and is frozen (read-only)
    after construction, so volumes can be shared freely across threads.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"all dims must be >= 1, got shape {arr.shape}")
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 3 or any(s <= 0 for s in sp):
            raise ValueError(f"spacing components must be > 0, got {self.spacing}")
        og = tuple(float(o) for o in self.origin)
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", sp)
        object.__setattr__(self, "origin", og)

    @property
    def dims(self) -> tuple[int, int, int]:
        """Voxel counts as (nx, ny, nz)."""
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    def voxel_to_mm(self, index_xyz) -> np.ndarray:
        """Physical position(s) of voxel index/indices given in (x, y, z) order."""
        idx = np.asarray(index_xyz, dtype=np.float64)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def mm_to_voxel(self, pos_mm) -> np.ndarray:
        """Continuous voxel coordinate(s) of physical position(s), (x, y, z) order."""
        pos = np.asarray(pos_mm, dtype=np.float64)
        return (pos - np.asarray(self.origin)) / np.asarray(self.spacing)

    def value_at(self, i: int, j: int, k: int) -> float:
        """Voxel value at integer index (i, j, k) = (x, y, z)."""
        return float(self.data[k, j, i])

    def with_data(self, data: np.ndarray) -> "Volume3D":
        """New volume on the same grid with different voxel values."""
        return Volume3D(data, self.spacing, self.origin)


@dataclass(frozen=True)
class Cuboid:
    """Axis-aligned voxel block relative to a patch corner.

    ``lo`` is inclusive and ``hi`` exclusive, both in (x, y, z) voxel offsets.
    """

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        lo = tuple(int(v) for v in self.lo)
        hi = tuple(int(v) for v in self.hi)
        if any(a >= b for a, b in zip(lo, hi)):
            raise ValueError(f"cuboid must be non-empty: lo={lo} hi={hi}")
        if any(a < 0 for a in lo):
            raise ValueError(f"cuboid lo must be >= 0: {lo}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def n_voxels(self) -> int:
        return int(np.prod([b - a for a, b in zip(self.lo, self.hi)]))


@dataclass(frozen=True)
class BoundingBox6:
    """Axis-aligned box given by six face coordinates in mm.

    Stored as per-axis (min, max) pairs. The face order used across the
    package is ``(x_min, x_max, y_min, y_max, z_min, z_max)``, which maps to
    the anatomical face naming (left, right, anterior, posterior, head, foot)
    through the fixed axis convention: x spans left-right, y spans
    anterior-posterior, z spans head-foot.
    """

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float
    z_max: float

    def __post_init__(self):
        for lo, hi, ax in ((self.x_min, self.x_max, "x"),
                           (self.y_min, self.y_max, "y"),
                           (self.z_min, self.z_max, "z")):
            if lo > hi:
                raise ValueError(f"{ax}_min > {ax}_max ({lo} > {hi})")

    @classmethod
    def from_faces(cls, faces: Sequence[float]) -> "BoundingBox6":
        """Build from the 6-vector of face coordinates, swapping any
        min/max pair that arrives out of order."""
        f = [float(v) for v in faces]
        if len(f) != 6:
            raise ValueError(f"expected 6 face coordinates, got {len(f)}")
        pairs = [(min(f[2 * a], f[2 * a + 1]), max(f[2 * a], f[2 * a + 1]))
                 for a in range(3)]
        return cls(pairs[0][0], pairs[0][1], pairs[1][0], pairs[1][1],
                   pairs[2][0], pairs[2][1])

    def faces(self) -> tuple[float, ...]:
        return (self.x_min, self.x_max, self.y_min, self.y_max,
                self.z_min, self.z_max)

    def expand(self, margin_mm: float) -> "BoundingBox6":
        m = float(margin_mm)
        return BoundingBox6(self.x_min - m, self.x_max + m,
                            self.y_min - m, self.y_max + m,
                            self.z_min - m, self.z_max + m)

    def extents(self) -> tuple[float, float, float]:
        return (self.x_max - self.x_min, self.y_max - self.y_min,
                self.z_max - self.z_min)


@dataclass(frozen=True)
class IntegralVolume:
    """Cumulative-sum table for O(1) cuboid sums.

    ``table[k, j, i]`` holds the sum of the source over the voxel block
    ``[0,i) x [0,j) x [0,k)`` (x, y, z ranges); the table is one voxel larger
    than the source along each axis and uses a float64 accumulator.
    """

    table: np.ndarray  # (nz+1, ny+1, nx+1) float64
    src_dims: tuple[int, int, int]  # (nx, ny, nz)

    def __post_init__(self):
        self.table.setflags(write=False)


def build_integral(v: Volume3D) -> IntegralVolume:
    """Integral (summed-volume) table of ``v``."""
    nz, ny, nx = v.data.shape
    table = np.zeros((nz + 1, ny + 1, nx + 1), dtype=np.float64)
    table[1:, 1:, 1:] = (v.data.astype(np.float64)
                         .cumsum(axis=0).cumsum(axis=1).cumsum(axis=2))
    return IntegralVolume(table, v.dims)


def cuboid_sum(iv: IntegralVolume, patch_corner: Sequence[int], c: Cuboid) -> float:
    """Sum of source voxels in cuboid ``c`` translated by ``patch_corner``.

    ``patch_corner`` is in (x, y, z) voxel indices. Raises IndexError when the
    translated cuboid does not fit inside the source volume.
    """
    px, py, pz = (int(q) for q in patch_corner)
    x0, y0, z0 = px + c.lo[0], py + c.lo[1], pz + c.lo[2]
    x1, y1, z1 = px + c.hi[0], py + c.hi[1], pz + c.hi[2]
    nx, ny, nz = iv.src_dims
    if x0 < 0 or y0 < 0 or z0 < 0 or x1 > nx or y1 > ny or z1 > nz:
        raise IndexError(
            f"cuboid [{(x0, y0, z0)}, {(x1, y1, z1)}) outside volume {iv.src_dims}")
    t = iv.table
    return float(
        t[z1, y1, x1] - t[z0, y1, x1] - t[z1, y0, x1] - t[z1, y1, x0]
        + t[z0, y0, x1] + t[z0, y1, x0] + t[z1, y0, x0] - t[z0, y0, x0])


def cuboid_mean(iv: IntegralVolume, patch_corner: Sequence[int], c: Cuboid) -> float:
    """Mean of source voxels in cuboid ``c`` translated by ``patch_corner``."""
    return cuboid_sum(iv, patch_corner, c) / c.n_voxels


def sample_trilinear(v: Volume3D, coords_xyz: np.ndarray, fill: float,
                     nearest: bool = False) -> np.ndarray:
    """Sample ``v`` at continuous voxel coordinates (N, 3) in (x, y, z) order.

    Coordinates outside the grid support (beyond any axis' [0, n-1] range,
    with a small tolerance for round-off) receive ``fill``.
    """
    coords = np.asarray(coords_xyz, dtype=np.float64)
    single = coords.ndim == 1
    coords = np.atleast_2d(coords)
    nz, ny, nx = v.data.shape
    tol = 1e-6
    inside = ((coords[:, 0] >= -tol) & (coords[:, 0] <= nx - 1 + tol)
              & (coords[:, 1] >= -tol) & (coords[:, 1] <= ny - 1 + tol)
              & (coords[:, 2] >= -tol) & (coords[:, 2] <= nz - 1 + tol))
    cz = np.clip(coords[:, 2], 0, nz - 1)
    cy = np.clip(coords[:, 1], 0, ny - 1)
    cx = np.clip(coords[:, 0], 0, nx - 1)
    out = map_coordinates(v.data.astype(np.float64), np.stack([cz, cy, cx]),
                          order=0 if nearest else 1, mode="nearest")
    out = np.where(inside, out, fill)
    return out[0] if single else out


def resample_trilinear(v: Volume3D, new_dims: Sequence[int],
                       new_spacing: Sequence[float],
                       fill: float = CT_FILL) -> Volume3D:
    """Resample onto a new grid sharing the input origin.

    Output voxel ``(i, j, k)`` samples the input at physical position
    ``origin + (i*sx', j*sy', k*sz')`` with trilinear interpolation;
    positions outside the input support take ``fill``.
    """
    nx, ny, nz = (int(d) for d in new_dims)
    if min(nx, ny, nz) < 1:
        raise ValueError(f"new_dims must be >= 1, got {new_dims}")
    sx, sy, sz = (float(s) for s in new_spacing)
    if min(sx, sy, sz) <= 0:
        raise ValueError(f"new_spacing must be > 0, got {new_spacing}")
    kk, jj, ii = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx),
                             indexing="ij")
    pos = np.stack([ii.ravel() * sx, jj.ravel() * sy, kk.ravel() * sz], axis=1)
    pos += np.asarray(v.origin)
    coords = (pos - np.asarray(v.origin)) / np.asarray(v.spacing)
    out = sample_trilinear(v, coords, fill).reshape(nz, ny, nx)
    return Volume3D(out, (sx, sy, sz), v.origin)


def crop(v: Volume3D, box: BoundingBox6, fill: float = CT_FILL) -> Volume3D:
    """Physical-space crop, rounded outward to voxel boundaries.

    The output grid keeps the input spacing; its origin is the position of
    the first kept voxel. Voxels of the output that fall outside the input
    grid are set to ``fill``. Raises ValueError when the box does not
    intersect the volume support.
    """
    lo_mm = np.array([box.x_min, box.y_min, box.z_min])
    hi_mm = np.array([box.x_max, box.y_max, box.z_max])
    sp = np.asarray(v.spacing)
    og = np.asarray(v.origin)
    nx, ny, nz = v.dims
    n = np.array([nx, ny, nz])
    eps = 1e-9
    i_lo = np.floor((lo_mm - og) / sp + eps).astype(np.int64)
    i_hi = np.ceil((hi_mm - og) / sp - eps).astype(np.int64)
    if np.any(i_hi < 0) or np.any(i_lo > n - 1):
        raise ValueError("crop box does not intersect the volume support")
    dims_out = i_hi - i_lo + 1
    out = np.full((dims_out[2], dims_out[1], dims_out[0]), fill, dtype=np.float32)
    src_lo = np.maximum(i_lo, 0)
    src_hi = np.minimum(i_hi, n - 1)
    dst_lo = src_lo - i_lo
    dst_hi = src_hi - i_lo
    out[dst_lo[2]:dst_hi[2] + 1, dst_lo[1]:dst_hi[1] + 1, dst_lo[0]:dst_hi[0] + 1] = \
        v.data[src_lo[2]:src_hi[2] + 1, src_lo[1]:src_hi[1] + 1, src_lo[0]:src_hi[0] + 1]
    new_origin = tuple(og + i_lo * sp)
    return Volume3D(out, v.spacing, new_origin)


def mask_bounding_box(mask: Volume3D, label: int = 1) -> BoundingBox6:
    """Tight axis-aligned box (mm) of voxels equal to ``label``."""
    hits = np.nonzero(mask.data == label)
    if hits[0].size == 0:
        raise ValueError(f"mask contains no voxels with label {label}")
    zz, yy, xx = hits
    sp = mask.spacing
    og = mask.origin
    return BoundingBox6(
        og[0] + xx.min() * sp[0], og[0] + xx.max() * sp[0],
        og[1] + yy.min() * sp[1], og[1] + yy.max() * sp[1],
        og[2] + zz.min() * sp[2], og[2] + zz.max() * sp[2])
