import numpy as np
import pytest

from panseg.volume import (BoundingBox6, Cuboid, Volume3D, build_integral,
                           crop, cuboid_mean, cuboid_sum, mask_bounding_box,
                           resample_trilinear)


def naive_prefix(data):
    """Triple-loop integral table (z, y, x indexing)."""
    nz, ny, nx = data.shape
    table = np.zeros((nz + 1, ny + 1, nx + 1))
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                table[k + 1, j + 1, i + 1] = data[:k + 1, :j + 1, :i + 1].sum()
    return table


def naive_cuboid_mean(data, corner, cub):
    x0, y0, z0 = (c + l for c, l in zip(corner, cub.lo))
    x1, y1, z1 = (c + h for c, h in zip(corner, cub.hi))
    return data[z0:z1, y0:y1, x0:x1].mean()


class TestVolume3D:
    def test_invariants(self):
        v = Volume3D(np.zeros((3, 4, 5)), (0.5, 1.0, 2.0), (1, 2, 3))
        assert v.dims == (5, 4, 3)
        assert v.data.dtype == np.float32
        assert not v.data.flags.writeable

    def test_voxel_position(self):
        v = Volume3D(np.zeros((3, 4, 5)), (0.5, 1.0, 2.0), (10.0, 20.0, 30.0))
        assert np.allclose(v.voxel_to_mm((2, 3, 1)), (11.0, 23.0, 32.0))

    def test_rejects_bad_spacing(self):
        with pytest.raises(ValueError):
            Volume3D(np.zeros((2, 2, 2)), (0.0, 1.0, 1.0))

    def test_rejects_non_3d(self):
        with pytest.raises(ValueError):
            Volume3D(np.zeros((2, 2)))


class TestIntegral:
    def test_all_zero(self):
        v = Volume3D(np.zeros((8, 8, 8)))
        iv = build_integral(v)
        assert np.all(iv.table == 0.0)

    def test_all_ones_total(self):
        v = Volume3D(np.ones((4, 4, 4)))
        iv = build_integral(v)
        assert iv.table[4, 4, 4] == 64.0

    def test_matches_naive_prefix(self, rng):
        data = np.rint(rng.uniform(-50, 50, size=(8, 8, 8)))
        iv = build_integral(Volume3D(data))
        assert np.array_equal(iv.table, naive_prefix(data))

    def test_integer_sums_exact_property(self, rng):
        for _ in range(100):
            shape = tuple(rng.integers(2, 9, 3))
            data = np.rint(rng.uniform(-1000, 1000, size=shape))
            v = Volume3D(data)
            iv = build_integral(v)
            nx, ny, nz = v.dims
            lo = rng.integers(0, (nx, ny, nz))
            hi = [int(rng.integers(l + 1, n + 1))
                  for l, n in zip(lo, (nx, ny, nz))]
            cub = Cuboid(tuple(lo), tuple(hi))
            naive = float(v.data[lo[2]:hi[2], lo[1]:hi[1], lo[0]:hi[0]].sum(
                dtype=np.float64))
            assert cuboid_sum(iv, (0, 0, 0), cub) == naive


class TestCuboidMean:
    def test_single_voxel(self, rng):
        data = np.rint(rng.uniform(0, 100, size=(6, 7, 8)))
        v = Volume3D(data)
        iv = build_integral(v)
        cub = Cuboid((0, 0, 0), (1, 1, 1))
        assert cuboid_mean(iv, (2, 3, 4), cub) == v.value_at(2, 3, 4)

    def test_constant_field(self):
        v = Volume3D(np.full((6, 6, 6), 7.0))
        iv = build_integral(v)
        cub = Cuboid((1, 0, 2), (4, 3, 5))
        assert cuboid_mean(iv, (1, 1, 1), cub) == pytest.approx(7.0, abs=1e-12)

    def test_random_matches_naive(self, rng):
        data = rng.uniform(-100, 100, size=(10, 10, 10)).astype(np.float32)
        v = Volume3D(data)
        iv = build_integral(v)
        for _ in range(100):
            lo = rng.integers(0, 5, 3)
            hi = lo + rng.integers(1, 5, 3)
            corner = rng.integers(0, 10 - hi.max() + 1, 3)
            cub = Cuboid(tuple(lo), tuple(hi))
            got = cuboid_mean(iv, tuple(corner), cub)
            want = naive_cuboid_mean(v.data.astype(np.float64), corner, cub)
            assert got == pytest.approx(want, abs=1e-9)

    def test_out_of_bounds_raises(self):
        v = Volume3D(np.zeros((4, 4, 4)))
        iv = build_integral(v)
        with pytest.raises(IndexError):
            cuboid_mean(iv, (2, 2, 2), Cuboid((0, 0, 0), (3, 3, 3)))


class TestResample:
    def test_identity(self, random_volume):
        v = random_volume((7, 6, 5), spacing=(1.5, 1.0, 2.0))
        out = resample_trilinear(v, v.dims, v.spacing)
        assert np.array_equal(out.data, v.data)

    def test_constant(self):
        v = Volume3D(np.full((5, 5, 5), 3.25), (2.0, 2.0, 2.0))
        out = resample_trilinear(v, (9, 9, 9), (1.0, 1.0, 1.0))
        assert np.allclose(out.data, 3.25, atol=1e-9)

    def test_linear_ramp_downsample(self):
        nx = 17
        ramp = np.tile(np.arange(nx, dtype=np.float64), (5, 5, 1))
        v = Volume3D(ramp, (1.0, 1.0, 1.0))
        out = resample_trilinear(v, (9, 5, 5), (2.0, 1.0, 1.0))
        want = np.tile(np.arange(9) * 2.0, (5, 5, 1))
        assert np.allclose(out.data, want, atol=1e-9)

    def test_affine_field_exact(self, rng):
        nx, ny, nz = 9, 8, 7
        ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                                 indexing="ij")
        f = (2.0 * ii + 3.0 * jj - 1.5 * kk + 4.0).transpose(2, 1, 0)
        v = Volume3D(f, (1.0, 1.0, 1.0))
        out = resample_trilinear(v, (17, 15, 13), (0.5, 0.5, 0.5))
        ii2, jj2, kk2 = np.meshgrid(np.arange(17) * 0.5, np.arange(15) * 0.5,
                                    np.arange(13) * 0.5, indexing="ij")
        want = (2.0 * ii2 + 3.0 * jj2 - 1.5 * kk2 + 4.0).transpose(2, 1, 0)
        assert np.allclose(out.data, want, atol=1e-9)

    def test_fill_outside_support(self):
        v = Volume3D(np.ones((3, 3, 3)), (1.0, 1.0, 1.0))
        out = resample_trilinear(v, (5, 3, 3), (1.0, 1.0, 1.0), fill=-5.0)
        assert np.all(out.data[:, :, 3:] == -5.0)
        assert np.all(out.data[:, :, :3] == 1.0)


class TestCrop:
    def test_identity_full_extent(self, random_volume):
        v = random_volume((6, 5, 4), spacing=(1.0, 2.0, 3.0))
        nx, ny, nz = v.dims
        box = BoundingBox6(0, (nx - 1) * 1.0, 0, (ny - 1) * 2.0, 0, (nz - 1) * 3.0)
        out = crop(v, box)
        assert np.array_equal(out.data, v.data)
        assert out.origin == v.origin

    def test_single_voxel(self, random_volume):
        v = random_volume((6, 5, 4))
        pos = v.voxel_to_mm((2, 3, 1))
        box = BoundingBox6(pos[0], pos[0], pos[1], pos[1], pos[2], pos[2])
        out = crop(v, box)
        assert out.dims == (1, 1, 1)
        assert out.data[0, 0, 0] == v.value_at(2, 3, 1)

    def test_random_subbox_maps_indices(self, rng, random_volume):
        v = random_volume((12, 11, 10), spacing=(0.8, 1.0, 1.2))
        for _ in range(50):
            lo = rng.integers(0, 5, 3)
            hi = [int(rng.integers(l + 1, n))
                  for l, n in zip(lo, v.dims)]
            lo_mm = v.voxel_to_mm(lo)
            hi_mm = v.voxel_to_mm(hi)
            box = BoundingBox6(lo_mm[0], hi_mm[0], lo_mm[1], hi_mm[1],
                               lo_mm[2], hi_mm[2])
            out = crop(v, box)
            for _ in range(5):
                idx = [int(rng.integers(0, d)) for d in out.dims]
                src = [int(i + l) for i, l in zip(idx, lo)]
                assert out.value_at(*idx) == v.value_at(*src)

    def test_outside_fill(self):
        v = Volume3D(np.ones((4, 4, 4)))
        box = BoundingBox6(-2, 3, 0, 3, 0, 3)
        out = crop(v, box, fill=-7.0)
        assert out.dims == (6, 4, 4)
        assert np.all(out.data[:, :, :2] == -7.0)
        assert np.all(out.data[:, :, 2:] == 1.0)

    def test_empty_intersection_raises(self):
        v = Volume3D(np.ones((4, 4, 4)))
        with pytest.raises(ValueError):
            crop(v, BoundingBox6(10, 12, 0, 1, 0, 1))


class TestBoundingBox:
    def test_from_faces_swaps(self):
        b = BoundingBox6.from_faces([5, 1, 0, 2, 3, 3])
        assert b.faces() == (1, 5, 0, 2, 3, 3)

    def test_expand(self):
        b = BoundingBox6(0, 1, 0, 1, 0, 1).expand(2)
        assert b.faces() == (-2, 3, -2, 3, -2, 3)

    def test_mask_bounding_box(self):
        data = np.zeros((5, 5, 5), dtype=np.float32)
        data[1:3, 2:4, 3:5] = 1  # z 1..2, y 2..3, x 3..4
        m = Volume3D(data, (1.0, 2.0, 3.0))
        b = mask_bounding_box(m)
        assert b.faces() == (3.0, 4.0, 4.0, 6.0, 3.0, 6.0)
