"""Regression-forest localization of the organ bounding box.

Six independent forests (one per box face) regress the offset between a
patch center and that face coordinate from cuboid mean-difference features.
At estimation time every patch votes through every tree and the box face is
the average of all votes.

Face order everywhere: ``(x_min, x_max, y_min, y_max, z_min, z_max)``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .volume import (BoundingBox6, Cuboid, IntegralVolume, Volume3D,
                     build_integral, cuboid_mean)

MODEL_SCHEMA_VERSION = 1

# Inclusion-exclusion signs for the 8 corners of an integral-table lookup,
# bit b of the corner index selects hi (1) or lo (0) along axis b = (x,y,z).
_IE_SIGNS = np.array([(-1) ** (3 - bin(c).count("1")) for c in range(8)],
                     dtype=np.float64)


class ModelVersionError(Exception):
    """Serialized model schema does not match this package version."""


@dataclass(frozen=True)
class CuboidFeature:
    """A pair of cuboids inside the patch; the feature value is
    mean(f1) - mean(f2). Cuboids may overlap."""

    f1: Cuboid
    f2: Cuboid


@dataclass(frozen=True)
class PatchSample:
    """A training patch: its center, source volume and per-face offsets
    (face coordinate minus the matching center component)."""

    center_mm: tuple[float, float, float]
    offsets_mm: tuple[float, ...]  # 6 faces
    volume_id: int

    def reconstruct_faces(self) -> tuple[float, ...]:
        cx, cy, cz = self.center_mm
        doubled = (cx, cx, cy, cy, cz, cz)
        return tuple(o + v for o, v in zip(self.offsets_mm, doubled))


@dataclass(frozen=True)
class ForestParams:
    patch_size: int = 25          # patch edge, voxels
    stride: int = 25              # patch grid step, voxels
    n_features: int = 40          # candidate features per split
    n_thresholds: int = 500       # candidate thresholds per feature
    min_samples: int = 20         # below this a node becomes a leaf
    max_depth: int = 15           # maximum root-to-leaf edge count
    trees: int = 8                # trees per face
    var_floor: float = 1e-6       # leaf variance floor, mm^2
    leaf_bins: int = 64           # histogram bins for the leaf fit
    hu_window: tuple[float, float] | None = None   # optional intensity clamp
    patch_min_mean_hu: float | None = None         # optional air-patch filter

    def validate(self):
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        for name in ("n_features", "n_thresholds", "min_samples", "trees"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.var_floor <= 0:
            raise ValueError("var_floor must be > 0")


def extract_patches(v: Volume3D, stride: int, p: int):
    """Regular-grid patch corners and centers.

    Returns ``(corners, centers_mm)`` where corners are ``(N, 3)`` voxel
    indices (x, y, z) of each patch's low corner and centers are the patch
    midpoints in mm. Every patch lies fully inside the volume. Raises
    ValueError when the volume is smaller than one patch.
    """
    p = int(p)
    stride = int(stride)
    if p < 1 or stride < 1:
        raise ValueError("patch size and stride must be >= 1")
    nx, ny, nz = v.dims
    if nx < p or ny < p or nz < p:
        raise ValueError(f"volume {v.dims} smaller than patch size {p}")
    axes = [np.arange(0, n - p + 1, stride) for n in (nx, ny, nz)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    corners = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1).astype(np.int64)
    half = (p - 1) / 2.0
    centers = (corners + half) * np.asarray(v.spacing) + np.asarray(v.origin)
    return corners, centers


def patch_grid_count(dims: tuple[int, int, int], stride: int, p: int) -> int:
    """Closed-form patch count of :func:`extract_patches`."""
    return int(np.prod([(n - p) // stride + 1 for n in dims]))


def eval_feature(iv: IntegralVolume, patch_corner, feat: CuboidFeature) -> float:
    """Feature value for one patch: mean(f1) - mean(f2)."""
    return cuboid_mean(iv, patch_corner, feat.f1) - cuboid_mean(iv, patch_corner, feat.f2)


def offset_variance(samples) -> float:
    """Population variance (divide by the sample count) of scalar offsets."""
    arr = np.asarray(samples, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("offset_variance of an empty sample set")
    mean = arr.mean()
    return float(np.mean((arr - mean) ** 2))


def split_score(left, right) -> float:
    """Size-weighted mean of the child population variances."""
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    total = left.size + right.size
    if total == 0:
        raise ValueError("split_score with both sides empty")
    score = 0.0
    for side in (left, right):
        if side.size:
            score += side.size / total * offset_variance(side)
    return float(score)


def fit_leaf_gaussian_em(offsets, bins: int = 64,
                         var_floor: float = 1e-6) -> tuple[float, float]:
    """Fit a single Gaussian to the offset histogram.

    A one-component EM fit of a Gaussian to binned data collapses to
    weighted moment matching over the bin centers, which is what this
    computes. Degenerate inputs report the variance floor.
    """
    arr = np.asarray(offsets, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot fit a leaf model to zero offsets")
    lo, hi = float(arr.min()), float(arr.max())
    if lo == hi:
        return lo, float(var_floor)
    counts, edges = np.histogram(arr, bins=bins, range=(lo, hi))
    centers = (edges[:-1] + edges[1:]) / 2.0
    w = counts / counts.sum()
    mean = float(np.dot(w, centers))
    var = float(np.dot(w, (centers - mean) ** 2))
    return mean, max(var, float(var_floor))


@dataclass
class RegressionTree:
    """Binary regression tree in flat-array form.

    Split node ``n`` tests feature ``(f1[n], f2[n])`` against ``threshold[n]``
    and routes samples with value <= threshold to ``left[n]``; leaves have
    ``left == -1`` and carry a Gaussian (mean, variance) offset model.
    Cuboid bounds are stored as ``(lo_xyz, hi_xyz)`` rows.
    """

    f1_lo: np.ndarray
    f1_hi: np.ndarray
    f2_lo: np.ndarray
    f2_hi: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_mean: np.ndarray
    leaf_var: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.threshold)

    def is_leaf(self, n: int) -> bool:
        return self.left[n] < 0

    def depth(self) -> int:
        def walk(n, d):
            if self.left[n] < 0:
                return d
            return max(walk(self.left[n], d + 1), walk(self.right[n], d + 1))
        return walk(0, 0)

    def to_dict(self) -> dict:
        return {
            "f1_lo": self.f1_lo.tolist(), "f1_hi": self.f1_hi.tolist(),
            "f2_lo": self.f2_lo.tolist(), "f2_hi": self.f2_hi.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(), "right": self.right.tolist(),
            "leaf_mean": self.leaf_mean.tolist(),
            "leaf_var": self.leaf_var.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionTree":
        return cls(
            f1_lo=np.asarray(d["f1_lo"], dtype=np.int64).reshape(-1, 3),
            f1_hi=np.asarray(d["f1_hi"], dtype=np.int64).reshape(-1, 3),
            f2_lo=np.asarray(d["f2_lo"], dtype=np.int64).reshape(-1, 3),
            f2_hi=np.asarray(d["f2_hi"], dtype=np.int64).reshape(-1, 3),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            leaf_mean=np.asarray(d["leaf_mean"], dtype=np.float64),
            leaf_var=np.asarray(d["leaf_var"], dtype=np.float64),
        )


@dataclass
class RegressionForest:
    """Six per-face tree ensembles plus the hyperparameters they were
    trained with."""

    params: ForestParams
    faces: list[list[RegressionTree]]  # 6 entries

    def __post_init__(self):
        if len(self.faces) != 6:
            raise ValueError(f"expected 6 face ensembles, got {len(self.faces)}")


# --- training machinery ----------------------------------------------------

class _GroupStore:
    """Stacked flat integral tables for all volumes sharing one shape.

    Gives every sample a single flat base index so a cuboid sum over any
    subset of samples is eight gathers into one array.
    """

    def __init__(self, shape_zyx: tuple[int, int, int]):
        nz, ny, nx = shape_zyx
        self.tz, self.ty, self.tx = nz + 1, ny + 1, nx + 1
        self.vol_stride = self.tz * self.ty * self.tx
        self.tables: list[np.ndarray] = []
        self.flat: np.ndarray | None = None

    def add(self, iv: IntegralVolume) -> int:
        self.tables.append(iv.table.ravel())
        return len(self.tables) - 1

    def finalize(self):
        self.flat = np.concatenate(self.tables)
        self.tables = []

    def base_index(self, slot: int, corner_xyz: np.ndarray) -> np.ndarray:
        x, y, z = corner_xyz[:, 0], corner_xyz[:, 1], corner_xyz[:, 2]
        return (slot * self.vol_stride
                + z * (self.ty * self.tx) + y * self.tx + x)

    def cuboid_offsets(self, c: Cuboid) -> np.ndarray:
        offs = np.empty(8, dtype=np.int64)
        for corner in range(8):
            x = c.hi[0] if corner & 1 else c.lo[0]
            y = c.hi[1] if corner & 2 else c.lo[1]
            z = c.hi[2] if corner & 4 else c.lo[2]
            offs[corner] = z * (self.ty * self.tx) + y * self.tx + x
        return offs

    def feature_values(self, base_idx: np.ndarray, feat: CuboidFeature) -> np.ndarray:
        out = np.zeros(base_idx.size, dtype=np.float64)
        for cub, sign in ((feat.f1, 1.0), (feat.f2, -1.0)):
            offs = self.cuboid_offsets(cub)
            acc = np.zeros(base_idx.size, dtype=np.float64)
            for o, s in zip(offs, _IE_SIGNS):
                acc += s * self.flat[base_idx + o]
            out += sign * acc / cub.n_voxels
        return out


class TrainingSet:
    """Patches from all training volumes plus their per-face offsets.

    Patches are extracted once and shared by the six face ensembles.
    """

    def __init__(self, volumes: list[Volume3D], boxes: list[BoundingBox6],
                 params: ForestParams):
        params.validate()
        if len(volumes) != len(boxes):
            raise ValueError("one bounding box per volume required")
        if not volumes:
            raise ValueError("need at least one training volume")
        self.params = params
        groups: dict[tuple[int, int, int], _GroupStore] = {}
        group_ids: dict[tuple[int, int, int], int] = {}
        sample_group, sample_base = [], []
        centers, offsets = [], []
        for vol_id, (v, box) in enumerate(zip(volumes, boxes)):
            v = _apply_hu_window(v, params.hu_window)
            iv = build_integral(v)
            key = v.data.shape
            if key not in groups:
                group_ids[key] = len(groups)
                groups[key] = _GroupStore(key)
            store = groups[key]
            slot = store.add(iv)
            corners, ctrs = extract_patches(v, params.stride, params.patch_size)
            if params.patch_min_mean_hu is not None:
                keep = _patch_means(iv, corners, params.patch_size) \
                    >= params.patch_min_mean_hu
                corners, ctrs = corners[keep], ctrs[keep]
            faces = np.asarray(box.faces())
            doubled = ctrs[:, [0, 0, 1, 1, 2, 2]]
            sample_group.append(np.full(len(corners), group_ids[key], dtype=np.int64))
            sample_base.append(store.base_index(slot, corners))
            centers.append(ctrs)
            offsets.append(faces[None, :] - doubled)
        self.groups = list(groups.values())
        for g in self.groups:
            g.finalize()
        self.sample_group = np.concatenate(sample_group)
        self.sample_base = np.concatenate(sample_base)
        self.centers_mm = np.concatenate(centers)
        self.offsets_mm = np.concatenate(offsets)
        if len(self.sample_base) == 0:
            raise ValueError("patch filter removed every training patch")

    @property
    def n_samples(self) -> int:
        return len(self.sample_base)

    def feature_values(self, sample_idx: np.ndarray, feat: CuboidFeature) -> np.ndarray:
        if len(self.groups) == 1:
            return self.groups[0].feature_values(self.sample_base[sample_idx], feat)
        out = np.empty(sample_idx.size, dtype=np.float64)
        grp = self.sample_group[sample_idx]
        for g, store in enumerate(self.groups):
            m = grp == g
            if m.any():
                out[m] = store.feature_values(self.sample_base[sample_idx[m]], feat)
        return out


def _apply_hu_window(v: Volume3D, window) -> Volume3D:
    if window is None:
        return v
    lo, hi = window
    return v.with_data(np.clip(v.data, lo, hi))


def _patch_means(iv: IntegralVolume, corners: np.ndarray, p: int) -> np.ndarray:
    whole = Cuboid((0, 0, 0), (p, p, p))
    return np.array([cuboid_mean(iv, c, whole) for c in corners])


def _random_feature(rng: np.random.Generator, p: int) -> CuboidFeature:
    def rand_cuboid():
        a = rng.integers(0, p, size=3)
        b = rng.integers(0, p, size=3)
        lo = np.minimum(a, b)
        hi = np.maximum(a, b) + 1
        return Cuboid(tuple(lo), tuple(hi))
    return CuboidFeature(rand_cuboid(), rand_cuboid())


def _best_threshold(values: np.ndarray, offsets: np.ndarray,
                    thresholds: np.ndarray):
    """Lowest weighted-child-variance threshold, evaluated via prefix sums
    over the value-sorted samples (same score as :func:`split_score`)."""
    order = np.argsort(values, kind="stable")
    sv = values[order]
    so = offsets[order]
    n = len(sv)
    csum = np.concatenate([[0.0], np.cumsum(so)])
    csum2 = np.concatenate([[0.0], np.cumsum(so * so)])
    k = np.searchsorted(sv, thresholds, side="right")
    valid = (k > 0) & (k < n)
    if not valid.any():
        return None
    kv = k[valid]
    sum_l, sum2_l = csum[kv], csum2[kv]
    sum_r, sum2_r = csum[n] - sum_l, csum2[n] - sum2_l
    nl = kv.astype(np.float64)
    nr = n - nl
    var_l = sum2_l / nl - (sum_l / nl) ** 2
    var_r = sum2_r / nr - (sum_r / nr) ** 2
    scores = (nl * var_l + nr * var_r) / n
    best = int(np.argmin(scores))
    thr_idx = np.flatnonzero(valid)[best]
    return float(scores[best]), float(thresholds[thr_idx])


def train_tree(ts: TrainingSet, face: int, params: ForestParams,
               seed) -> RegressionTree:
    """Grow one variance-reduction regression tree for a box face.

    At each split node ``n_features`` random cuboid pairs are scored with
    ``n_thresholds`` random thresholds each (uniform over the node's value
    range) and the minimizer is recorded. Nodes with fewer than
    ``min_samples`` patches, at ``max_depth``, or with no valid split become
    leaves carrying the histogram Gaussian fit.
    """
    rng = np.random.default_rng(seed)
    offsets_all = ts.offsets_mm[:, face]
    nodes: list[dict] = []

    def build(sample_idx: np.ndarray, depth: int) -> int:
        node_id = len(nodes)
        nodes.append({})
        n = sample_idx.size
        best = None
        if n >= params.min_samples and depth < params.max_depth:
            node_off = offsets_all[sample_idx]
            for _ in range(params.n_features):
                feat = _random_feature(rng, params.patch_size)
                vals = ts.feature_values(sample_idx, feat)
                vmin, vmax = vals.min(), vals.max()
                thresholds = rng.uniform(vmin, vmax, params.n_thresholds)
                hit = _best_threshold(vals, node_off, thresholds)
                if hit is not None and (best is None or hit[0] < best[0]):
                    best = (hit[0], hit[1], feat, vals)
        if best is None:
            mean, var = fit_leaf_gaussian_em(offsets_all[sample_idx],
                                             params.leaf_bins, params.var_floor)
            nodes[node_id] = {"leaf": (mean, var)}
            return node_id
        _, thr, feat, vals = best
        go_left = vals <= thr
        left_id = build(sample_idx[go_left], depth + 1)
        right_id = build(sample_idx[~go_left], depth + 1)
        nodes[node_id] = {"feat": feat, "thr": thr,
                          "left": left_id, "right": right_id}
        return node_id

    build(np.arange(ts.n_samples, dtype=np.int64), 0)
    return _pack_nodes(nodes)


def _pack_nodes(nodes: list[dict]) -> RegressionTree:
    n = len(nodes)
    f1_lo = np.zeros((n, 3), np.int64)
    f1_hi = np.ones((n, 3), np.int64)
    f2_lo = np.zeros((n, 3), np.int64)
    f2_hi = np.ones((n, 3), np.int64)
    thr = np.zeros(n)
    left = np.full(n, -1, np.int64)
    right = np.full(n, -1, np.int64)
    lmean = np.full(n, np.nan)
    lvar = np.full(n, np.nan)
    for i, nd in enumerate(nodes):
        if "leaf" in nd:
            lmean[i], lvar[i] = nd["leaf"]
        else:
            feat = nd["feat"]
            f1_lo[i], f1_hi[i] = feat.f1.lo, feat.f1.hi
            f2_lo[i], f2_hi[i] = feat.f2.lo, feat.f2.hi
            thr[i] = nd["thr"]
            left[i], right[i] = nd["left"], nd["right"]
    return RegressionTree(f1_lo, f1_hi, f2_lo, f2_hi, thr, left, right, lmean, lvar)


def train_forest(volumes: list[Volume3D], boxes: list[BoundingBox6],
                 params: ForestParams, seed: int = 0,
                 jobs: int = 1) -> RegressionForest:
    """Train all six face ensembles on shared patches.

    Each tree gets an independent RNG stream derived from ``seed`` so the
    result is reproducible regardless of ``jobs``.
    """
    ts = TrainingSet(volumes, boxes, params)
    root = seed if isinstance(seed, np.random.SeedSequence) \
        else np.random.SeedSequence(seed)
    children = root.spawn(6 * params.trees)
    tasks = [(face, t, children[face * params.trees + t])
             for face in range(6) for t in range(params.trees)]
    results: dict[tuple[int, int], RegressionTree] = {}
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            futures = {ex.submit(train_tree, ts, face, params, ss): (face, t)
                       for face, t, ss in tasks}
            for fut, key in futures.items():
                results[key] = fut.result()
    else:
        for face, t, ss in tasks:
            results[(face, t)] = train_tree(ts, face, params, ss)
    faces = [[results[(face, t)] for t in range(params.trees)]
             for face in range(6)]
    return RegressionForest(params, faces)


# --- prediction -------------------------------------------------------------

def _route_tree(tree: RegressionTree, store: _GroupStore,
                base_idx: np.ndarray) -> np.ndarray:
    """Leaf means for every patch, found by partitioned descent."""
    out = np.empty(base_idx.size, dtype=np.float64)
    stack = [(0, np.arange(base_idx.size, dtype=np.int64))]
    while stack:
        node, idx = stack.pop()
        if tree.left[node] < 0:
            out[idx] = tree.leaf_mean[node]
            continue
        feat = CuboidFeature(
            Cuboid(tuple(tree.f1_lo[node]), tuple(tree.f1_hi[node])),
            Cuboid(tuple(tree.f2_lo[node]), tuple(tree.f2_hi[node])))
        vals = store.feature_values(base_idx[idx], feat)
        go_left = vals <= tree.threshold[node]
        stack.append((int(tree.left[node]), idx[go_left]))
        stack.append((int(tree.right[node]), idx[~go_left]))
    return out


class _PredictContext:
    """Per-volume cache shared by the six face predictions."""

    def __init__(self, forest: RegressionForest, v: Volume3D):
        p = forest.params
        v = _apply_hu_window(v, p.hu_window)
        iv = build_integral(v)
        corners, centers = extract_patches(v, p.stride, p.patch_size)
        if p.patch_min_mean_hu is not None:
            keep = _patch_means(iv, corners, p.patch_size) >= p.patch_min_mean_hu
            corners, centers = corners[keep], centers[keep]
        if len(corners) == 0:
            raise ValueError("no patches available for prediction")
        self.store = _GroupStore(v.data.shape)
        slot = self.store.add(iv)
        self.store.finalize()
        self.base_idx = self.store.base_index(slot, corners)
        self.centers = centers


def predict_face(forest: RegressionForest, face: int, v: Volume3D,
                 _ctx: _PredictContext | None = None) -> float:
    """Estimate one face coordinate: the mean over patches x trees of
    (leaf mean + matching patch-center component).

    The final average uses exact summation, so the result is independent of
    patch ordering.
    """
    ctx = _ctx if _ctx is not None else _PredictContext(forest, v)
    center_comp = ctx.centers[:, face // 2]
    votes: list[float] = []
    for tree in forest.faces[face]:
        leaf_means = _route_tree(tree, ctx.store, ctx.base_idx)
        votes.extend(leaf_means + center_comp)
    return math.fsum(votes) / len(votes)


def estimate_bounding_box(forest: RegressionForest, v: Volume3D) -> BoundingBox6:
    """Run all six face predictions; per-axis face pairs are swapped when
    predicted out of order so the box invariant always holds."""
    ctx = _PredictContext(forest, v)
    faces = [predict_face(forest, f, v, _ctx=ctx) for f in range(6)]
    return BoundingBox6.from_faces(faces)


# --- model persistence ------------------------------------------------------

def save_forest(path: str | os.PathLike, forest: RegressionForest) -> None:
    p = forest.params
    doc = {
        "schema_version": MODEL_SCHEMA_VERSION,
        "hyperparameters": {
            "patch_size": p.patch_size, "stride": p.stride,
            "n_features": p.n_features, "n_thresholds": p.n_thresholds,
            "min_samples": p.min_samples, "max_depth": p.max_depth,
            "trees": p.trees, "var_floor": p.var_floor,
            "leaf_bins": p.leaf_bins,
            "hu_window": list(p.hu_window) if p.hu_window else None,
            "patch_min_mean_hu": p.patch_min_mean_hu,
        },
        "faces": [[t.to_dict() for t in trees] for trees in forest.faces],
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_forest(path: str | os.PathLike) -> RegressionForest:
    with open(path) as f:
        doc = json.load(f)
    version = doc.get("schema_version")
    if version != MODEL_SCHEMA_VERSION:
        raise ModelVersionError(
            f"model schema version {version!r} not supported "
            f"(expected {MODEL_SCHEMA_VERSION})")
    h = doc["hyperparameters"]
    params = ForestParams(
        patch_size=h["patch_size"], stride=h["stride"],
        n_features=h["n_features"], n_thresholds=h["n_thresholds"],
        min_samples=h["min_samples"], max_depth=h["max_depth"],
        trees=h["trees"], var_floor=h["var_floor"], leaf_bins=h["leaf_bins"],
        hu_window=tuple(h["hu_window"]) if h.get("hu_window") else None,
        patch_min_mean_hu=h.get("patch_min_mean_hu"))
    faces = [[RegressionTree.from_dict(d) for d in trees]
             for trees in doc["faces"]]
    return RegressionForest(params, faces)
