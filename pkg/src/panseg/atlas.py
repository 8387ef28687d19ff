"""VOI construction, similarity ranking and probabilistic atlas fusion.

A VOI is the margin-expanded crop around an estimated bounding box,
stretched per axis onto a fixed cubic grid (``voi_size`` voxels at a
nominal ``voi_spacing``). Database VOIs are registered to the input VOI,
ranked by ZNCC between vessel-enhanced (DSS) volumes, and the top
candidates' labels are fused into a per-voxel probability by
similarity-weighted voting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .registration import (DeformationField, RegistrationParams,
                           register_deformable, warp)
from .volume import (BoundingBox6, CT_FILL, Volume3D, crop, sample_trilinear)


class UndefinedSimilarityError(ValueError):
    """ZNCC requested on a zero-variance input."""


class EmptySelectionError(RuntimeError):
    """No database candidate survived similarity screening."""


@dataclass
class VOI:
    """Normalized volume of interest plus the frame needed to undo it.

    ``frame_origin`` and ``frame_step`` map VOI voxel (i, j, k) back to the
    patient-space position ``frame_origin + (i, j, k) * frame_step``.
    """

    ct: Volume3D
    label: Volume3D | None
    dss: Volume3D | None
    source_id: str
    source_box: BoundingBox6           # expanded box used for the crop
    frame_origin: tuple[float, float, float]
    frame_step: tuple[float, float, float]

    def __post_init__(self):
        dims = self.ct.dims
        if len(set(dims)) != 1:
            raise ValueError(f"VOI grid must be cubic, got {dims}")
        for name in ("label", "dss"):
            other = getattr(self, name)
            if other is not None and other.dims != dims:
                raise ValueError(f"{name} dims {other.dims} != ct dims {dims}")

    def with_volumes(self, ct=None, label=None, dss=None) -> "VOI":
        return VOI(ct if ct is not None else self.ct,
                   label if label is not None else self.label,
                   dss if dss is not None else self.dss,
                   self.source_id, self.source_box,
                   self.frame_origin, self.frame_step)

    def patient_to_voi(self, pos_mm) -> np.ndarray:
        pos = np.asarray(pos_mm, dtype=np.float64)
        return (pos - np.asarray(self.frame_origin)) / np.asarray(self.frame_step)


@dataclass
class ProbAtlas:
    """Per-voxel organ probability in the input-VOI frame, plus the
    contributing database VOI ids and their (positive) weights."""

    prob: Volume3D
    source_ids: list[str]
    weights: list[float]


def _stretch_to_cube(v: Volume3D, size: int, spacing: float,
                     nearest: bool, fill: float) -> Volume3D:
    """Resample the full extent of ``v`` onto a size^3 grid, stretching each
    axis independently."""
    nx, ny, nz = v.dims
    if min(nx, ny, nz) < 2:
        raise ValueError(f"crop too thin to normalize: dims {v.dims}")
    steps = [(n - 1) / (size - 1) for n in (nx, ny, nz)]
    ax = [np.arange(size) * s for s in steps]
    kk, jj, ii = np.meshgrid(ax[2], ax[1], ax[0], indexing="ij")
    coords = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
    out = sample_trilinear(v, coords, fill, nearest=nearest)
    return Volume3D(out.reshape(size, size, size),
                    (spacing,) * 3, (0.0, 0.0, 0.0))


def make_voi(v: Volume3D, box: BoundingBox6, margin_mm: float,
             voi_size: int, voi_spacing: float,
             label: Volume3D | None = None,
             source_id: str = "") -> VOI:
    """Crop the margin-expanded box and normalize it onto the VOI grid.

    CT is resampled trilinearly, labels nearest-neighbor. The crop is
    rounded outward to voxel boundaries, so a box whose crop already matches
    the target grid resamples as an exact identity.
    """
    if voi_size < 2:
        raise ValueError("voi_size must be >= 2")
    expanded = box.expand(margin_mm)
    ct_crop = crop(v, expanded, fill=CT_FILL)
    ct_voi = _stretch_to_cube(ct_crop, voi_size, voi_spacing,
                              nearest=False, fill=CT_FILL)
    label_voi = None
    if label is not None:
        if label.data.shape != v.data.shape:
            raise ValueError("label grid must match the CT grid")
        lbl_crop = crop(label, expanded, fill=0.0)
        label_voi = _stretch_to_cube(lbl_crop, voi_size, voi_spacing,
                                     nearest=True, fill=0.0)
    nxc, nyc, nzc = ct_crop.dims
    step = tuple((n - 1) * s / (voi_size - 1)
                 for n, s in zip((nxc, nyc, nzc), v.spacing))
    return VOI(ct=ct_voi, label=label_voi, dss=None, source_id=source_id,
               source_box=expanded, frame_origin=ct_crop.origin,
               frame_step=step)


def project_voi_label(label_voi: Volume3D, voi: VOI, target: Volume3D) -> Volume3D:
    """Map a VOI-frame label volume back onto the target grid
    (nearest-neighbor); voxels outside the VOI footprint are background."""
    nz, ny, nx = target.data.shape
    kk, jj, ii = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx),
                             indexing="ij")
    pos = (np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
           * np.asarray(target.spacing) + np.asarray(target.origin))
    coords = (pos - np.asarray(voi.frame_origin)) / np.asarray(voi.frame_step)
    vals = sample_trilinear(label_voi, coords, fill=0.0, nearest=True)
    return Volume3D(vals.reshape(nz, ny, nx), target.spacing, target.origin)


def zncc(a: Volume3D, b: Volume3D, mask: np.ndarray | None = None) -> float:
    """Zero-mean normalized cross-correlation over the (masked) voxels."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"dims differ: {a.dims} vs {b.dims}")
    av = a.data.astype(np.float64).ravel()
    bv = b.data.astype(np.float64).ravel()
    if mask is not None:
        m = np.asarray(mask, dtype=bool).ravel()
        if m.shape != av.shape:
            raise ValueError("mask shape must match the volumes")
        av, bv = av[m], bv[m]
    if av.size < 2:
        raise UndefinedSimilarityError("need at least 2 voxels for ZNCC")
    az = av - av.mean()
    bz = bv - bv.mean()
    na = float(np.sqrt(np.dot(az, az)))
    nb = float(np.sqrt(np.dot(bz, bz)))
    if na == 0.0 or nb == 0.0:
        raise UndefinedSimilarityError("ZNCC undefined for zero-variance input")
    return float(np.dot(az, bz) / (na * nb))


@dataclass
class AtlasCandidate:
    """A database VOI after registration onto the input frame."""

    voi: VOI               # warped volumes, input-VOI frame
    weight: float          # ZNCC of warped DSS vs input DSS
    db_index: int
    field: DeformationField


def select_similar(input_voi: VOI, db: list[VOI], n_select: int,
                   reg_params: RegistrationParams = RegistrationParams()
                   ) -> list[AtlasCandidate]:
    """Register every database VOI to the input, rank by DSS ZNCC and keep
    the best ``n_select`` with positive similarity.

    Ties are broken by ascending database index; candidates whose DSS
    similarity is non-positive or undefined are dropped. Raises
    EmptySelectionError when nothing survives.
    """
    if not db:
        raise ValueError("database is empty")
    if input_voi.dss is None:
        raise ValueError("input VOI has no DSS volume")
    scored: list[AtlasCandidate] = []
    for idx, cand in enumerate(db):
        if cand.dss is None:
            raise ValueError(f"database VOI {cand.source_id!r} has no DSS volume")
        field = register_deformable(cand.ct, input_voi.ct, reg_params)
        warped_ct = warp(field, cand.ct, "trilinear", fill=CT_FILL)
        warped_dss = warp(field, cand.dss, "trilinear", fill=0.0)
        warped_label = None
        if cand.label is not None:
            warped_label = warp(field, cand.label, "nearest", fill=0.0)
        try:
            score = zncc(warped_dss, input_voi.dss)
        except UndefinedSimilarityError:
            continue
        if score <= 0.0:
            continue
        warped = VOI(ct=warped_ct, label=warped_label, dss=warped_dss,
                     source_id=cand.source_id, source_box=cand.source_box,
                     frame_origin=input_voi.frame_origin,
                     frame_step=input_voi.frame_step)
        scored.append(AtlasCandidate(warped, score, idx, field))
    scored.sort(key=lambda c: (-c.weight, c.db_index))
    selected = scored[:n_select]
    if not selected:
        raise EmptySelectionError(
            "no database VOI has positive DSS similarity with the input")
    return selected


def build_atlas(selected: list[AtlasCandidate], label: int = 1) -> ProbAtlas:
    """Similarity-weighted per-voxel vote over the warped labels."""
    if not selected:
        raise EmptySelectionError("cannot fuse an empty selection")
    num = None
    total = 0.0
    for cand in selected:
        if cand.weight <= 0:
            raise ValueError(f"non-positive weight {cand.weight} in selection")
        if cand.voi.label is None:
            raise ValueError(f"candidate {cand.voi.source_id!r} has no label")
        vote = (cand.voi.label.data == label).astype(np.float64)
        num = cand.weight * vote if num is None else num + cand.weight * vote
        total += cand.weight
    prob = Volume3D(num / total, selected[0].voi.ct.spacing,
                    selected[0].voi.ct.origin)
    return ProbAtlas(prob, [c.voi.source_id for c in selected],
                     [c.weight for c in selected])


def save_atlas(path, atlas: ProbAtlas) -> None:
    """Persist as float MHD plus a JSON sidecar of contributors."""
    from .io import write_volume
    p = Path(path)
    write_volume(p, atlas.prob, "MET_FLOAT")
    sidecar = p.with_suffix(".json")
    sidecar.write_text(json.dumps(
        {"source_ids": atlas.source_ids, "weights": atlas.weights}, indent=2))
