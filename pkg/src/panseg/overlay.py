"""Axial-slice PNG overlays: windowed CT grayscale with a label tint."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .volume import Volume3D


def write_overlays(out_dir, ct: Volume3D, labels: Volume3D,
                   window: tuple[float, float] = (-200.0, 250.0),
                   every: int = 4, alpha: float = 0.45) -> list[Path]:
    """Write every ``every``-th axial slice as PNG; returns written paths."""
    if ct.data.shape != labels.data.shape:
        raise ValueError("CT and label grids differ")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lo, hi = window
    gray = np.clip((ct.data - lo) / (hi - lo), 0.0, 1.0) * 255.0
    mask = labels.data > 0.5
    written = []
    for k in range(0, ct.data.shape[0], max(1, every)):
        g = gray[k].astype(np.uint8)
        rgb = np.stack([g, g, g], axis=-1).astype(np.float32)
        m = mask[k]
        rgb[m, 0] = (1 - alpha) * rgb[m, 0] + alpha * 255.0
        rgb[m, 1] = (1 - alpha) * rgb[m, 1]
        rgb[m, 2] = (1 - alpha) * rgb[m, 2]
        path = out / f"slice_{k:04d}.png"
        Image.fromarray(rgb.astype(np.uint8)).save(path)
        written.append(path)
    return written
