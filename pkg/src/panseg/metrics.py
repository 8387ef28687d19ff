"""Overlap metrics between label volumes, reported as percentages."""

from __future__ import annotations

import numpy as np

from .volume import Volume3D


def _check_frames(a: Volume3D, b: Volume3D):
    if a.data.shape != b.data.shape:
        raise ValueError(f"label grids differ: {a.dims} vs {b.dims}")
    if not np.allclose(a.spacing, b.spacing) or not np.allclose(a.origin, b.origin):
        raise ValueError("label volumes are not in the same frame")


def overlap_counts(a: Volume3D, b: Volume3D, label: int = 1):
    """(intersection, |A|, |B|) voxel counts for the given label."""
    _check_frames(a, b)
    am = a.data == label
    bm = b.data == label
    return int(np.count_nonzero(am & bm)), int(am.sum()), int(bm.sum())


def jaccard(a: Volume3D, b: Volume3D, label: int = 1) -> float:
    """100 * |A n B| / |A u B|; two empty masks agree vacuously (100)."""
    inter, na, nb = overlap_counts(a, b, label)
    union = na + nb - inter
    if union == 0:
        return 100.0
    return 100.0 * inter / union


def dice(a: Volume3D, b: Volume3D, label: int = 1) -> float:
    """100 * 2|A n B| / (|A| + |B|); two empty masks agree vacuously (100)."""
    inter, na, nb = overlap_counts(a, b, label)
    if na + nb == 0:
        return 100.0
    return 100.0 * 2.0 * inter / (na + nb)
