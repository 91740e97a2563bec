import numpy as np
import pytest

from oracles import flood_fill_components
from voxseg.postproc import (LabelVolume, PostprocError, connected_components,
                             metrics, select_components, speckle_removal,
                             threshold)


class TestThreshold:
    def test_zero_keeps_all(self):
        conf = np.random.default_rng(0).integers(0, 101, (6, 6, 6)).astype(np.uint8)
        assert threshold(conf, 0).all()

    def test_bounds(self):
        conf = np.zeros((3, 3, 3), dtype=np.uint8)
        conf[1, 1, 1] = 100
        with pytest.raises(PostprocError):
            threshold(conf, 101)
        seg = threshold(conf, 100)
        assert seg.sum() == 1 and seg[1, 1, 1]

    def test_monotone_in_t(self, rng):
        conf = rng.integers(0, 101, (8, 8, 8)).astype(np.uint8)
        counts = [threshold(conf, t).sum() for t in range(0, 101, 5)]
        assert all(b <= a for a, b in zip(counts, counts[1:]))


class TestSpeckleRemoval:
    def test_isolated_voxel_removed(self):
        mask = np.zeros((12, 12, 12), dtype=bool)
        mask[6, 6, 6] = True
        out = speckle_removal(mask, 5, 15)
        assert out.sum() == 0

    def test_solid_interior_kept(self):
        mask = np.zeros((9, 9, 9), dtype=bool)
        mask[2:7, 2:7, 2:7] = True
        out = speckle_removal(mask, 3, 18)
        assert out[4, 4, 4]

    def test_eta_zero_identity(self, rng):
        mask = rng.random((10, 10, 10)) > 0.5
        assert np.array_equal(speckle_removal(mask, 3, 0), mask)

    def test_never_adds_voxels(self, rng):
        for _ in range(100):
            mask = rng.random((9, 9, 9)) > rng.uniform(0.2, 0.8)
            out = speckle_removal(mask, 3, int(rng.integers(0, 27)))
            assert not np.any(out & ~mask)

    def test_boundary_counts_in_volume_only(self):
        mask = np.ones((4, 4, 4), dtype=bool)
        out = speckle_removal(mask, 3, 8)
        # corner voxel has exactly 7 in-volume neighbors -> dropped at eta=8
        assert not out[0, 0, 0]
        assert out[1, 1, 1]  # interior keeps 26

    def test_exact_neighbor_count_against_brute_force(self, rng):
        mask = rng.random((7, 7, 7)) > 0.5
        k, eta = 3, 10
        out = speckle_removal(mask, k, eta)
        for x in range(7):
            for y in range(7):
                for z in range(7):
                    if not mask[x, y, z]:
                        assert not out[x, y, z]
                        continue
                    block = mask[max(0, x - 1):x + 2, max(0, y - 1):y + 2,
                                 max(0, z - 1):z + 2]
                    n = int(block.sum()) - 1
                    assert out[x, y, z] == (n >= eta)

    def test_parameter_validation(self):
        mask = np.zeros((3, 3, 3), dtype=bool)
        with pytest.raises(PostprocError):
            speckle_removal(mask, 4, 2)
        with pytest.raises(PostprocError):
            speckle_removal(mask, 3, 27)


class TestConnectedComponents:
    def test_two_islands(self):
        mask = np.zeros((6, 6, 6), dtype=bool)
        mask[1, 1, 1] = mask[4, 4, 4] = True
        lab = connected_components(mask, 26)
        assert lab.count == 2
        assert np.array_equal(np.sort(lab.sizes), [1, 1])

    def test_connectivity_semantics(self):
        face = np.zeros((4, 4, 4), dtype=bool)
        face[1, 1, 1] = face[2, 1, 1] = True
        assert connected_components(face, 6).count == 1
        assert connected_components(face, 26).count == 1
        corner = np.zeros((4, 4, 4), dtype=bool)
        corner[1, 1, 1] = corner[2, 2, 2] = True
        assert connected_components(corner, 6).count == 2
        assert connected_components(corner, 26).count == 1

    def test_matches_flood_fill_oracle(self, rng):
        for connectivity in (6, 26):
            for _ in range(10):
                dims = tuple(int(d) for d in rng.integers(4, 20, 3))
                mask = rng.random(dims) > rng.uniform(0.4, 0.8)
                lab = connected_components(mask, connectivity)
                _, comps = flood_fill_components(mask, connectivity)
                got = [frozenset(zip(*np.nonzero(lab.labels == i + 1)))
                       for i in range(lab.count)]
                assert set(got) == set(comps)
                assert sum(lab.sizes) == mask.sum()

    def test_labels_ordered_by_size(self, rng):
        mask = rng.random((12, 12, 12)) > 0.7
        lab = connected_components(mask, 26)
        assert np.all(np.diff(lab.sizes) <= 0)

    def test_label_order_deterministic_ties(self):
        mask = np.zeros((6, 6, 6), dtype=bool)
        mask[4, 4, 4] = True   # later in raster order
        mask[1, 1, 1] = True   # earlier
        lab = connected_components(mask, 26)
        assert lab.labels[1, 1, 1] == 1
        assert lab.labels[4, 4, 4] == 2


class TestSelectComponents:
    def _two_islands(self):
        mask = np.zeros((8, 8, 8), dtype=bool)
        mask[1:4, 1:4, 1:4] = True   # 27 voxels
        mask[6, 6, 6] = True         # 1 voxel
        return connected_components(mask, 26)

    def test_largest(self):
        lab = self._two_islands()
        seg = select_components(lab, largest=1)
        assert seg.sum() == 27 and not seg[6, 6, 6]

    def test_containing_background_empty(self):
        lab = self._two_islands()
        seg = select_components(lab, containing=[(0, 0, 0)])
        assert seg.sum() == 0

    def test_min_size_identity(self):
        lab = self._two_islands()
        seg = select_components(lab, min_size=1)
        assert seg.sum() == 28

    def test_position_out_of_volume(self):
        lab = self._two_islands()
        with pytest.raises(PostprocError):
            select_components(lab, containing=[(99, 0, 0)])

    def test_exactly_one_rule(self):
        lab = self._two_islands()
        with pytest.raises(PostprocError):
            select_components(lab, largest=1, min_size=2)


class TestMetrics:
    def test_perfect_match(self, rng):
        gt = rng.random((6, 6, 6)) > 0.5
        rep = metrics(gt, gt)
        assert (rep.iou, rep.precision, rep.recall, rep.f1) == (1, 1, 1, 1)

    def test_disjoint(self):
        a = np.zeros((4, 4, 4), dtype=bool)
        b = np.zeros((4, 4, 4), dtype=bool)
        a[0, 0, 0] = True
        b[1, 1, 1] = True
        rep = metrics(a, b)
        assert (rep.iou, rep.precision, rep.recall, rep.f1) == (0, 0, 0, 0)

    def test_double_cover(self):
        gt = np.zeros((4, 4, 4), dtype=bool)
        gt[0:2, 0, 0] = True
        seg = np.zeros((4, 4, 4), dtype=bool)
        seg[0:4, 0, 0] = True
        rep = metrics(seg, gt)
        assert rep.recall == 1.0
        assert rep.precision == pytest.approx(0.5)
        assert rep.iou == pytest.approx(0.5)
        assert rep.f1 == pytest.approx(2.0 / 3.0)

    def test_both_empty_convention(self):
        empty = np.zeros((3, 3, 3), dtype=bool)
        rep = metrics(empty, empty)
        assert (rep.iou, rep.precision, rep.recall, rep.f1) == (1, 1, 1, 1)

    def test_one_empty_side(self, rng):
        empty = np.zeros((3, 3, 3), dtype=bool)
        other = rng.random((3, 3, 3)) > 0.5
        for a, b in ((empty, other), (other, empty)):
            rep = metrics(a, b)
            assert (rep.iou, rep.precision, rep.recall, rep.f1) == (0, 0, 0, 0)

    def test_swap_symmetry(self, rng):
        a = rng.random((6, 6, 6)) > 0.5
        b = rng.random((6, 6, 6)) > 0.6
        r1, r2 = metrics(a, b), metrics(b, a)
        assert r1.precision == r2.recall and r1.recall == r2.precision
        assert r1.iou == r2.iou and r1.f1 == r2.f1

    def test_f1_iou_identity(self, rng):
        for _ in range(50):
            a = rng.random((5, 5, 5)) > rng.uniform(0.2, 0.8)
            b = rng.random((5, 5, 5)) > rng.uniform(0.2, 0.8)
            rep = metrics(a, b)
            if rep.iou in (0.0, 1.0):
                continue
            assert rep.f1 == pytest.approx(2 * rep.iou / (1 + rep.iou), abs=1e-12)

    def test_dims_mismatch(self):
        with pytest.raises(PostprocError):
            metrics(np.zeros((2, 2, 2), dtype=bool), np.zeros((3, 3, 3), dtype=bool))

    def test_kv_round_trip(self, rng):
        from voxseg.postproc import metrics_from_kv
        from voxseg import textkv
        a = rng.random((4, 4, 4)) > 0.5
        b = rng.random((4, 4, 4)) > 0.5
        rep = metrics(a, b)
        again = metrics_from_kv(textkv.loads(rep.serialize()))
        assert again == rep

    def test_csv_row(self):
        gt = np.ones((2, 2, 2), dtype=bool)
        rep = metrics(gt, gt)
        row = rep.csv_row("piston")
        parts = row.split(",")
        assert parts[0] == "piston"
        assert [float(v) for v in parts[1:]] == [1.0, 1.0, 1.0, 1.0]
