import numpy as np
import pytest

from panseg.forest import (CuboidFeature, ForestParams, ModelVersionError,
                           RegressionForest, TrainingSet, estimate_bounding_box,
                           eval_feature, extract_patches, fit_leaf_gaussian_em,
                           load_forest, offset_variance, patch_grid_count,
                           predict_face, save_forest, split_score, train_forest,
                           train_tree)
from panseg.volume import BoundingBox6, Cuboid, Volume3D, build_integral


def naive_eq2_variance(values):
    arr = np.asarray(values, dtype=np.float64)
    mean = arr.sum() / arr.size
    return float(((arr - mean) ** 2).sum() / arr.size)


def naive_eq3_score(left, right):
    total = len(left) + len(right)
    s = 0.0
    for side in (left, right):
        if len(side):
            s += (len(side) / total) * naive_eq2_variance(side)
    return s


def naive_feature(data, corner, feat):
    def mean(cub):
        x0, y0, z0 = (c + l for c, l in zip(corner, cub.lo))
        x1, y1, z1 = (c + h for c, h in zip(corner, cub.hi))
        return data[z0:z1, y0:y1, x0:x1].mean()
    return mean(feat.f1) - mean(feat.f2)


class TestPatchSample:
    def test_offsets_reconstruct_faces(self, rng):
        from panseg.forest import PatchSample
        for _ in range(20):
            faces = np.sort(rng.uniform(-50, 50, 6).reshape(3, 2),
                            axis=1).ravel()
            faces = faces[[0, 1, 2, 3, 4, 5]]
            center = tuple(rng.uniform(-20, 20, 3))
            doubled = (center[0], center[0], center[1], center[1],
                       center[2], center[2])
            offsets = tuple(f - v for f, v in zip(faces, doubled))
            s = PatchSample(center, offsets, volume_id=0)
            assert np.allclose(s.reconstruct_faces(), faces, atol=1e-12)


class TestExtractPatches:
    def test_exact_fit_single_patch(self):
        v = Volume3D(np.zeros((25, 25, 25)))
        corners, centers = extract_patches(v, stride=25, p=25)
        assert len(corners) == 1
        assert np.array_equal(corners[0], [0, 0, 0])
        assert np.allclose(centers[0], [12.0, 12.0, 12.0])

    def test_tiling_count(self):
        v = Volume3D(np.zeros((50, 50, 50)))
        corners, _ = extract_patches(v, stride=25, p=25)
        assert len(corners) == 8

    def test_counting_formula(self, rng):
        for _ in range(50):
            dims = tuple(int(d) for d in rng.integers(8, 40, 3))
            p = int(rng.integers(2, 8))
            stride = int(rng.integers(1, 10))
            v = Volume3D(np.zeros(dims[::-1]))
            corners, _ = extract_patches(v, stride, p)
            assert len(corners) == patch_grid_count(dims, stride, p)

    def test_patches_inside_volume(self, rng):
        v = Volume3D(np.zeros((11, 13, 17)), (2.0, 1.0, 0.5))
        corners, centers = extract_patches(v, stride=3, p=5)
        assert np.all(corners >= 0)
        assert np.all(corners + 5 <= np.array(v.dims))
        # centers are the physical patch midpoints
        want = (corners + 2.0) * np.array(v.spacing)
        assert np.allclose(centers, want)

    def test_too_small_raises(self):
        with pytest.raises(ValueError, match="smaller than patch"):
            extract_patches(Volume3D(np.zeros((4, 4, 4))), 1, 5)


class TestEvalFeature:
    def test_identical_cuboids_zero(self, random_volume):
        v = random_volume((10, 10, 10))
        iv = build_integral(v)
        cub = Cuboid((1, 2, 0), (4, 5, 3))
        assert eval_feature(iv, (2, 2, 2), CuboidFeature(cub, cub)) == 0.0

    def test_constant_volume_zero(self):
        v = Volume3D(np.full((8, 8, 8), 11.0))
        iv = build_integral(v)
        feat = CuboidFeature(Cuboid((0, 0, 0), (2, 2, 2)),
                             Cuboid((3, 3, 3), (6, 6, 6)))
        assert eval_feature(iv, (1, 1, 1), feat) == pytest.approx(0.0, abs=1e-9)

    def test_matches_naive(self, rng, random_volume):
        v = random_volume((12, 12, 12))
        iv = build_integral(v)
        data64 = v.data.astype(np.float64)
        for _ in range(100):
            los = rng.integers(0, 4, (2, 3))
            his = los + rng.integers(1, 4, (2, 3))
            feat = CuboidFeature(Cuboid(tuple(los[0]), tuple(his[0])),
                                 Cuboid(tuple(los[1]), tuple(his[1])))
            corner = tuple(int(c) for c in rng.integers(0, 5, 3))
            got = eval_feature(iv, corner, feat)
            assert got == pytest.approx(naive_feature(data64, corner, feat),
                                        abs=1e-9)


class TestVarianceOps:
    def test_equal_offsets_zero(self):
        assert offset_variance([4.0, 4.0, 4.0]) == 0.0

    def test_hand_example(self):
        assert offset_variance([-1.0, 1.0]) == 1.0

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            offset_variance([])

    def test_matches_naive(self, rng):
        for _ in range(100):
            vals = rng.uniform(-100, 100, size=rng.integers(1, 40))
            assert offset_variance(vals) == pytest.approx(
                naive_eq2_variance(vals), abs=1e-12)

    def test_split_pure_children(self):
        assert split_score([0.0, 0.0], [10.0, 10.0]) == 0.0

    def test_split_one_side_empty_equals_parent(self, rng):
        vals = rng.uniform(-5, 5, 20)
        assert split_score(vals, []) == pytest.approx(
            offset_variance(vals), abs=1e-12)

    def test_split_both_empty_raises(self):
        with pytest.raises(ValueError):
            split_score([], [])

    def test_split_matches_naive(self, rng):
        for _ in range(100):
            n = int(rng.integers(2, 50))
            vals = rng.uniform(-50, 50, n)
            k = int(rng.integers(0, n + 1))
            got = split_score(vals[:k], vals[k:])
            assert got == pytest.approx(naive_eq3_score(vals[:k], vals[k:]),
                                        abs=1e-12)


class TestLeafFit:
    def test_degenerate_floors_variance(self):
        mean, var = fit_leaf_gaussian_em([5.0, 5.0, 5.0], var_floor=1e-6)
        assert mean == 5.0
        assert var == 1e-6

    def test_symmetric_mean_zero(self):
        mean, var = fit_leaf_gaussian_em([-3.0, 3.0, -3.0, 3.0])
        assert mean == pytest.approx(0.0, abs=1e-12)

    def test_recovers_gaussian_parameters(self):
        rng = np.random.default_rng(99)
        samples = rng.normal(5.0, 2.0, size=1000)
        mean, var = fit_leaf_gaussian_em(samples)
        assert mean == pytest.approx(5.0, abs=0.2)
        assert var == pytest.approx(4.0, abs=0.5)

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            fit_leaf_gaussian_em([])


def _separable_training_set(n_vols=30, p=8, seed=0):
    """Volumes whose left/right half brightness fully determines the offset
    of face 0: bright-left ones sit at -5, bright-right ones at +5."""
    rng = np.random.default_rng(seed)
    volumes, boxes = [], []
    for i in range(n_vols):
        bright_left = i % 2 == 0
        data = np.zeros((p, p, p))
        if bright_left:
            data[:, :, :p // 2] = 100.0
        else:
            data[:, :, p // 2:] = 100.0
        data += rng.normal(0, 1.0, data.shape)
        volumes.append(Volume3D(data))
        offset = -5.0 if bright_left else 5.0
        center = (p - 1) / 2.0
        x_min = center + offset
        boxes.append(BoundingBox6(x_min, x_min + 1.0, 0, p - 1, 0, p - 1))
    return volumes, boxes


class TestTrainTree:
    def test_min_samples_larger_than_set_gives_single_leaf(self):
        volumes, boxes = _separable_training_set(4)
        params = ForestParams(patch_size=8, stride=8, n_features=4,
                              n_thresholds=8, min_samples=100, max_depth=5,
                              trees=1)
        ts = TrainingSet(volumes, boxes, params)
        tree = train_tree(ts, 0, params, seed=1)
        assert tree.n_nodes == 1
        assert tree.is_leaf(0)
        assert tree.leaf_mean[0] == pytest.approx(0.0, abs=0.5)

    def test_depth_zero_gives_leaf(self):
        volumes, boxes = _separable_training_set(4)
        params = ForestParams(patch_size=8, stride=8, n_features=4,
                              n_thresholds=8, min_samples=1, max_depth=0,
                              trees=1)
        ts = TrainingSet(volumes, boxes, params)
        tree = train_tree(ts, 0, params, seed=1)
        assert tree.n_nodes == 1 and tree.is_leaf(0)

    def test_separable_data_gets_near_zero_child_variance(self):
        volumes, boxes = _separable_training_set(30)
        params = ForestParams(patch_size=8, stride=8, n_features=12,
                              n_thresholds=32, min_samples=2, max_depth=1,
                              trees=1)
        ts = TrainingSet(volumes, boxes, params)
        tree = train_tree(ts, 0, params, seed=3)
        assert not tree.is_leaf(0)
        left, right = int(tree.left[0]), int(tree.right[0])
        means = sorted([tree.leaf_mean[left], tree.leaf_mean[right]])
        assert means[0] == pytest.approx(-5.0, abs=0.3)
        assert means[1] == pytest.approx(5.0, abs=0.3)
        assert tree.leaf_var[left] < 0.5 and tree.leaf_var[right] < 0.5

    def test_depth_bounded(self):
        volumes, boxes = _separable_training_set(30)
        params = ForestParams(patch_size=8, stride=8, n_features=4,
                              n_thresholds=8, min_samples=1, max_depth=3,
                              trees=1)
        ts = TrainingSet(volumes, boxes, params)
        tree = train_tree(ts, 0, params, seed=5)
        assert tree.depth() <= 3

    def test_training_reproducible(self):
        volumes, boxes = _separable_training_set(12)
        params = ForestParams(patch_size=8, stride=8, n_features=6,
                              n_thresholds=16, min_samples=2, max_depth=4,
                              trees=2)
        f1 = train_forest(volumes, boxes, params, seed=42)
        f2 = train_forest(volumes, boxes, params, seed=42)
        for trees1, trees2 in zip(f1.faces, f2.faces):
            for t1, t2 in zip(trees1, trees2):
                assert np.array_equal(t1.threshold, t2.threshold)
                assert np.array_equal(t1.left, t2.left)
                assert np.array_equal(t1.leaf_mean, t2.leaf_mean,
                                      equal_nan=True)
                assert np.array_equal(t1.f1_lo, t2.f1_lo)

    def test_jobs_do_not_change_result(self):
        volumes, boxes = _separable_training_set(12)
        params = ForestParams(patch_size=8, stride=8, n_features=6,
                              n_thresholds=16, min_samples=2, max_depth=4,
                              trees=2)
        f1 = train_forest(volumes, boxes, params, seed=7, jobs=1)
        f2 = train_forest(volumes, boxes, params, seed=7, jobs=4)
        for trees1, trees2 in zip(f1.faces, f2.faces):
            for t1, t2 in zip(trees1, trees2):
                assert np.array_equal(t1.threshold, t2.threshold)
                assert np.array_equal(t1.leaf_mean, t2.leaf_mean,
                                      equal_nan=True)


class TestPatchOptions:
    def test_patch_filter_drops_background_patches(self):
        data = np.full((16, 16, 16), -100.0)
        data[:, :, 8:] = 80.0  # bright half
        v = Volume3D(data)
        box = BoundingBox6(0, 15, 0, 15, 0, 15)
        base = ForestParams(patch_size=8, stride=8, trees=1)
        ts_all = TrainingSet([v], [box], base)
        filt = ForestParams(patch_size=8, stride=8, trees=1,
                            patch_min_mean_hu=-95.0)
        ts_filt = TrainingSet([v], [box], filt)
        assert ts_all.n_samples == 8
        assert ts_filt.n_samples == 4  # the pure-background patches drop

    def test_hu_window_clamps_features(self):
        rng = np.random.default_rng(2)
        data = rng.uniform(-2000, 2000, (10, 10, 10))
        v = Volume3D(data)
        box = BoundingBox6(0, 9, 0, 9, 0, 9)
        params = ForestParams(patch_size=10, stride=10, trees=1,
                              hu_window=(-100.0, 200.0))
        ts = TrainingSet([v], [box], params)
        feat = CuboidFeature(Cuboid((0, 0, 0), (5, 10, 10)),
                             Cuboid((5, 0, 0), (10, 10, 10)))
        got = ts.feature_values(np.array([0]), feat)[0]
        clamped = np.clip(v.data.astype(np.float64), -100.0, 200.0)
        want = clamped[:, :, :5].mean() - clamped[:, :, 5:].mean()
        assert got == pytest.approx(want, abs=1e-9)


def _constant_forest(params, offsets):
    """Forest of single-leaf trees storing a fixed offset per face."""
    from panseg.forest import RegressionTree
    faces = []
    for f in range(6):
        tree = RegressionTree(
            f1_lo=np.zeros((1, 3), np.int64), f1_hi=np.ones((1, 3), np.int64),
            f2_lo=np.zeros((1, 3), np.int64), f2_hi=np.ones((1, 3), np.int64),
            threshold=np.zeros(1), left=np.full(1, -1, np.int64),
            right=np.full(1, -1, np.int64),
            leaf_mean=np.array([offsets[f]]), leaf_var=np.array([1.0]))
        faces.append([tree] * params.trees)
    return RegressionForest(params, faces)


class TestPredict:
    def test_single_leaf_constant_offset(self):
        params = ForestParams(patch_size=4, stride=2, trees=3)
        forest = _constant_forest(params, [7.0] * 6)
        v = Volume3D(np.zeros((8, 8, 8)))
        _, centers = extract_patches(v, 2, 4)
        got = predict_face(forest, 0, v)
        assert got == pytest.approx(centers[:, 0].mean() + 7.0, abs=1e-9)

    def test_permutation_invariance_is_exact(self, rng):
        # exact summation makes the estimate bit-identical under any
        # reordering of the patch list
        from panseg.forest import _PredictContext
        volumes, boxes = _separable_training_set(10)
        params = ForestParams(patch_size=8, stride=4, n_features=4,
                              n_thresholds=8, min_samples=2, max_depth=3,
                              trees=2)
        forest = train_forest(volumes, boxes, params, seed=13)
        v = Volume3D(rng.normal(0, 50, (12, 12, 12)))
        ctx = _PredictContext(forest, v)
        base = predict_face(forest, 0, v, _ctx=ctx)
        perm = rng.permutation(len(ctx.base_idx))
        ctx.base_idx = ctx.base_idx[perm]
        ctx.centers = ctx.centers[perm]
        assert predict_face(forest, 0, v, _ctx=ctx) == base

    def test_estimate_box_orders_faces(self):
        params = ForestParams(patch_size=4, stride=4, trees=1)
        # min faces predicted beyond max faces: estimate must swap them
        forest = _constant_forest(params, [50.0, -50.0, 10.0, -10.0, 5.0, -5.0])
        v = Volume3D(np.zeros((8, 8, 8)))
        box = estimate_bounding_box(forest, v)
        assert box.x_min <= box.x_max
        assert box.y_min <= box.y_max
        assert box.z_min <= box.z_max

    def test_known_box_recovered(self):
        # constant forests encoding one box exactly: prediction == that box
        params = ForestParams(patch_size=4, stride=2, trees=2)
        v = Volume3D(np.zeros((8, 8, 8)))
        _, centers = extract_patches(v, 2, 4)
        cx = centers[:, 0].mean()
        cy = centers[:, 1].mean()
        cz = centers[:, 2].mean()
        target = BoundingBox6(1.0, 6.0, 2.0, 5.0, 0.5, 6.5)
        offsets = [target.faces()[f] - (cx, cx, cy, cy, cz, cz)[f]
                   for f in range(6)]
        forest = _constant_forest(params, offsets)
        box = estimate_bounding_box(forest, v)
        assert np.allclose(box.faces(), target.faces(), atol=1e-9)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        volumes, boxes = _separable_training_set(8)
        params = ForestParams(patch_size=8, stride=8, n_features=4,
                              n_thresholds=8, min_samples=2, max_depth=3,
                              trees=2)
        forest = train_forest(volumes, boxes, params, seed=11)
        path = tmp_path / "model.json"
        save_forest(path, forest)
        back = load_forest(path)
        assert back.params == params
        v = volumes[0]
        for face in range(6):
            assert predict_face(back, face, v) == predict_face(forest, face, v)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "model.json"
        path.write_text('{"schema_version": 999, "faces": []}')
        with pytest.raises(ModelVersionError):
            load_forest(path)
