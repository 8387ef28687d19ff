import numpy as np
import pytest

from panseg.metrics import dice, jaccard, overlap_counts
from panseg.volume import Volume3D


def vol(mask):
    return Volume3D(np.asarray(mask, dtype=np.float32))


class TestOverlap:
    def test_identical_masks_100(self, rng):
        m = vol(rng.uniform(0, 1, (6, 6, 6)) > 0.5)
        assert jaccard(m, m) == 100.0
        assert dice(m, m) == 100.0

    def test_disjoint_masks_0(self):
        a = np.zeros((4, 4, 4))
        b = np.zeros((4, 4, 4))
        a[0, 0, 0] = 1
        b[3, 3, 3] = 1
        assert jaccard(vol(a), vol(b)) == 0.0
        assert dice(vol(a), vol(b)) == 0.0

    def test_counting_example(self):
        # |A| = |B| = 2 with one shared voxel
        a = np.zeros((2, 2, 2))
        b = np.zeros((2, 2, 2))
        a[0, 0, 0] = a[0, 0, 1] = 1
        b[0, 0, 0] = b[1, 1, 1] = 1
        assert jaccard(vol(a), vol(b)) == pytest.approx(100.0 / 3.0)
        assert dice(vol(a), vol(b)) == pytest.approx(50.0)

    def test_both_empty_convention(self):
        a = vol(np.zeros((3, 3, 3)))
        assert jaccard(a, a) == 100.0
        assert dice(a, a) == 100.0

    def test_dice_jaccard_identity(self, rng):
        for _ in range(100):
            a = vol(rng.uniform(0, 1, (5, 5, 5)) > 0.4)
            b = vol(rng.uniform(0, 1, (5, 5, 5)) > 0.6)
            ji = jaccard(a, b) / 100.0
            dc = dice(a, b) / 100.0
            assert dc == pytest.approx(2 * ji / (1 + ji), abs=1e-12)

    def test_symmetry(self, rng):
        a = vol(rng.uniform(0, 1, (5, 5, 5)) > 0.5)
        b = vol(rng.uniform(0, 1, (5, 5, 5)) > 0.5)
        assert jaccard(a, b) == jaccard(b, a)
        assert dice(a, b) == dice(b, a)

    def test_invariant_under_identical_crop(self, rng):
        from panseg.volume import BoundingBox6, crop
        a_data = (rng.uniform(0, 1, (8, 8, 8)) > 0.5).astype(np.float32)
        b_data = (rng.uniform(0, 1, (8, 8, 8)) > 0.5).astype(np.float32)
        a, b = vol(a_data), vol(b_data)
        box = BoundingBox6(1, 6, 1, 6, 1, 6)
        ca, cb = crop(a, box, fill=0.0), crop(b, box, fill=0.0)
        inter, na, nb = overlap_counts(ca, cb)
        inter_f, na_f, nb_f = overlap_counts(a, b)
        # identical crops keep the same relative overlap inside the box
        assert inter == ((a_data[1:7, 1:7, 1:7] > 0)
                         & (b_data[1:7, 1:7, 1:7] > 0)).sum()

    def test_frame_mismatch_raises(self):
        a = vol(np.zeros((3, 3, 3)))
        b = Volume3D(np.zeros((3, 3, 3)), (2.0, 1.0, 1.0))
        with pytest.raises(ValueError, match="frame"):
            jaccard(a, b)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            dice(vol(np.zeros((3, 3, 3))), vol(np.zeros((4, 3, 3))))
