"""Synthetic CT-like phantoms with exact ground truth.

Each phantom holds a pancreas-like ellipsoid (rotatable about z) in a fat
background, a horizontal vessel-like tube running anterior to the organ
(axis perpendicular to z, tracking the organ position) plus an optional
vertical tube, and Gaussian noise. Intensities are quantized to integers so
in-memory volumes match their on-disk MET_SHORT payloads exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .io import write_volume
from .volume import BoundingBox6, Volume3D, mask_bounding_box


@dataclass(frozen=True)
class TubeSpec:
    axis: str                                  # 'x', 'y' or 'z'
    radius_mm: float
    center_mm: tuple[float, float, float]      # a point on the centerline
    mean_hu: float


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 48)
    spacing: tuple[float, float, float] = (2.5, 2.5, 3.0)
    organ_center_mm: tuple[float, float, float] = (78.0, 78.0, 70.0)
    organ_axes_mm: tuple[float, float, float] = (34.0, 16.0, 13.0)
    organ_rotation_deg: float = 0.0            # about the z axis
    organ_hu: float = 80.0
    background_hu: float = -100.0
    tubes: tuple[TubeSpec, ...] = ()
    noise_sigma_hu: float = 10.0
    seed: int = 0


def gen_phantom(spec: PhantomSpec) -> tuple[Volume3D, Volume3D, BoundingBox6]:
    """Render one phantom: CT volume, exact organ mask, exact tight box."""
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing
    extent = ((nx - 1) * sx, (ny - 1) * sy, (nz - 1) * sz)
    cx, cy, cz = spec.organ_center_mm
    ax, ay, az = spec.organ_axes_mm
    reach = (max(ax, ay), max(ax, ay), az)  # conservative under z-rotation
    for c, r, e, name in zip(spec.organ_center_mm, reach, extent, "xyz"):
        if c - r < 0 or c + r > e:
            raise ValueError(f"organ exceeds the volume extent along {name}")

    xs = np.arange(nx) * sx
    ys = np.arange(ny) * sy
    zs = np.arange(nz) * sz
    X = xs[None, None, :]
    Y = ys[None, :, None]
    Z = zs[:, None, None]

    phi = np.deg2rad(spec.organ_rotation_deg)
    xr = np.cos(phi) * (X - cx) + np.sin(phi) * (Y - cy)
    yr = -np.sin(phi) * (X - cx) + np.cos(phi) * (Y - cy)
    organ = (xr / ax) ** 2 + (yr / ay) ** 2 + ((Z - cz) / az) ** 2 <= 1.0

    ct = np.full((nz, ny, nx), spec.background_hu, dtype=np.float64)
    ct[organ] = spec.organ_hu
    for tube in spec.tubes:
        tx, ty, tz = tube.center_mm
        if tube.axis == "x":
            d2 = (Y - ty) ** 2 + (Z - tz) ** 2
        elif tube.axis == "y":
            d2 = (X - tx) ** 2 + (Z - tz) ** 2
        elif tube.axis == "z":
            d2 = (X - tx) ** 2 + (Y - ty) ** 2
        else:
            raise ValueError(f"unknown tube axis {tube.axis!r}")
        inside = np.broadcast_to(d2 <= tube.radius_mm ** 2, ct.shape)
        ct[inside & ~organ] = tube.mean_hu  # organ voxels keep their HU

    rng = np.random.default_rng(spec.seed)
    if spec.noise_sigma_hu > 0:
        ct = ct + rng.normal(0.0, spec.noise_sigma_hu, size=ct.shape)
    ct = np.clip(np.rint(ct), -32768, 32767)  # match MET_SHORT payloads

    vol = Volume3D(ct, spec.spacing, (0.0, 0.0, 0.0))
    mask = Volume3D(organ.astype(np.float32), spec.spacing, (0.0, 0.0, 0.0))
    return vol, mask, mask_bounding_box(mask)


@dataclass(frozen=True)
class DatasetRanges:
    """Randomization ranges for a phantom dataset (uniform draws)."""

    dims: tuple[int, int, int] = (64, 64, 48)
    spacing: tuple[float, float, float] = (2.5, 2.5, 3.0)
    center_jitter_mm: tuple[float, float, float] = (18.0, 18.0, 10.0)
    axes_x_mm: tuple[float, float] = (28.0, 40.0)
    axes_y_mm: tuple[float, float] = (12.0, 20.0)
    axes_z_mm: tuple[float, float] = (10.0, 16.0)
    rotation_deg: tuple[float, float] = (-15.0, 15.0)
    organ_hu: float = 80.0
    background_hu: float = -100.0
    tube_hu: float = 150.0
    sv_radius_mm: tuple[float, float] = (3.0, 5.0)
    sv_gap_mm: float = 6.0           # surface-to-centerline clearance
    vertical_tube: bool = True
    vertical_radius_mm: tuple[float, float] = (4.0, 6.0)
    noise_sigma_hu: float = 10.0


def random_spec(ranges: DatasetRanges, seed) -> PhantomSpec:
    """Draw one phantom spec; the tube anterior to the organ follows the
    organ position the way a neighboring vessel would."""
    rng = np.random.default_rng(seed)
    nx, ny, nz = ranges.dims
    sx, sy, sz = ranges.spacing
    vol_center = ((nx - 1) * sx / 2.0, (ny - 1) * sy / 2.0, (nz - 1) * sz / 2.0)
    center = tuple(c + rng.uniform(-j, j)
                   for c, j in zip(vol_center, ranges.center_jitter_mm))
    axes = (rng.uniform(*ranges.axes_x_mm), rng.uniform(*ranges.axes_y_mm),
            rng.uniform(*ranges.axes_z_mm))
    rotation = rng.uniform(*ranges.rotation_deg)
    sv_radius = rng.uniform(*ranges.sv_radius_mm)
    tubes = [TubeSpec(
        axis="x", radius_mm=sv_radius,
        center_mm=(center[0],
                   center[1] + axes[1] + ranges.sv_gap_mm + sv_radius,
                   center[2] + rng.uniform(-4.0, 4.0)),
        mean_hu=ranges.tube_hu)]
    if ranges.vertical_tube:
        v_radius = rng.uniform(*ranges.vertical_radius_mm)
        tubes.append(TubeSpec(
            axis="z", radius_mm=v_radius,
            center_mm=(center[0] + rng.uniform(-6.0, 6.0),
                       center[1] - (axes[1] + ranges.sv_gap_mm + v_radius),
                       0.0),
            mean_hu=ranges.tube_hu))
    noise_seed = int(rng.integers(0, 2 ** 31 - 1))
    return PhantomSpec(dims=ranges.dims, spacing=ranges.spacing,
                       organ_center_mm=center, organ_axes_mm=axes,
                       organ_rotation_deg=rotation, organ_hu=ranges.organ_hu,
                       background_hu=ranges.background_hu, tubes=tuple(tubes),
                       noise_sigma_hu=ranges.noise_sigma_hu, seed=noise_seed)


def gen_dataset(n: int, out_dir, ranges: DatasetRanges | None = None,
                seed: int = 0) -> Path:
    """Generate ``n`` phantoms plus a manifest; returns the manifest path.

    Same ``seed`` reproduces byte-identical files and manifest.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    ranges = ranges or DatasetRanges()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(n)
    cases = []
    for i, child in enumerate(children):
        case_id = f"case_{i:03d}"
        spec = random_spec(ranges, child)
        ct, mask, box = gen_phantom(spec)
        ct_name = f"{case_id}_ct.mhd"
        label_name = f"{case_id}_label.mhd"
        write_volume(out / ct_name, ct, "MET_SHORT")
        write_volume(out / label_name, mask, "MET_UCHAR")
        cases.append({"id": case_id, "ct": ct_name, "label": label_name,
                      "box": list(box.faces())})
    manifest = {"schema_version": 1, "seed": seed, "n": n,
                "ranges": asdict(ranges), "cases": cases}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path
