import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_counts, flood_fill_regions, oracle_pir
from hdseg.errors import DimensionMismatch, NoPlexusRegions
from hdseg.metrics import (
    DEFAULT_THRESHOLDS,
    ConfusionCounts,
    baseline_table,
    confusion,
    connected_components,
    dice,
    dice_from_counts,
    evaluate_mask,
    pir,
    precision_recall,
    threshold_sweep,
)

masks = arrays(bool, st.tuples(st.integers(1, 12), st.integers(1, 12)))


def mask_pairs(draw_shape=(6, 7)):
    return st.integers(0, 2 ** 32 - 1).map(
        lambda s: tuple(np.random.default_rng(s).random((2,) + draw_shape) < 0.5))


class TestConfusion:
    def test_identity(self):
        m = np.random.default_rng(0).random((9, 9)) < 0.3
        c = confusion(m, m)
        assert c.fp == 0 and c.fn == 0 and c.tp == m.sum()

    def test_all_set_prediction(self):
        gt = np.zeros((4, 5), bool)
        gt[1, 1:4] = True
        c = confusion(np.ones_like(gt), gt)
        assert (c.tp, c.fp, c.fn) == (3, 17, 0)

    def test_exhaustive_three_by_three(self):
        patterns = [np.array([(i >> b) & 1 for b in range(9)], bool).reshape(3, 3)
                    for i in range(512)]
        for a, b in itertools.product(patterns, repeat=2):
            c = confusion(a, b)
            assert (c.tp, c.fp, c.fn, c.tn) == brute_counts(a, b)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatch):
            confusion(np.zeros((2, 2), bool), np.zeros((2, 3), bool))

    @given(masks)
    def test_counts_sum_to_area(self, m):
        other = np.roll(m, 1, axis=0)
        assert confusion(m, other).total == m.size


class TestDice:
    def test_identical(self):
        m = np.eye(4, dtype=bool)
        assert dice(m, m) == 100.0

    def test_disjoint(self):
        a = np.zeros((2, 2), bool)
        a[0] = True
        assert dice(a, ~a) == 0.0

    def test_half_overlap(self):
        x = np.zeros((4, 4), bool)
        y = np.zeros((4, 4), bool)
        x[0] = True
        y[0, :2] = True
        y[1, :2] = True
        assert dice(x, y) == 50.0

    def test_empty_empty_is_perfect(self):
        z = np.zeros((3, 3), bool)
        assert dice(z, z) == 100.0

    @settings(max_examples=60)
    @given(mask_pairs())
    def test_symmetric(self, pair):
        a, b = pair
        assert dice(a, b) == dice(b, a)


class TestPrecisionRecall:
    def test_half_precision(self):
        assert precision_recall(ConfusionCounts(2, 2, 0, 10)) == (50.0, 100.0, False)

    def test_perfect(self):
        assert precision_recall(ConfusionCounts(5, 0, 0, 1)) == (100.0, 100.0, False)

    def test_empty_prediction(self):
        p, r, degenerate = precision_recall(ConfusionCounts(0, 0, 3, 6))
        assert p == 0.0 and r == 0.0 and degenerate


class TestComponents:
    def test_empty(self):
        assert connected_components(np.zeros((5, 5), bool))[0] == 0

    def test_diagonal_neighbours_join(self):
        m = np.zeros((3, 3), bool)
        m[0, 0] = m[1, 1] = True
        assert connected_components(m)[0] == 1

    def test_gap_row_splits(self):
        m = np.zeros((3, 1), bool)
        m[0] = m[2] = True
        assert connected_components(m)[0] == 2

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_matches_flood_fill(self, seed):
        m = np.random.default_rng(seed).random((12, 15)) < 0.35
        n, labels = connected_components(m)
        regions = flood_fill_regions(m)
        assert n == len(regions)
        assert sorted(sorted(r) for r in regions) == sorted(
            sorted(zip(*np.nonzero(labels == k))) for k in range(1, n + 1))


def three_blobs():
    plexus = np.zeros((10, 10), bool)
    plexus[1:3, 1:3] = True
    plexus[6:8, 1:3] = True
    plexus[4:6, 6:9] = True
    return plexus


class TestPIR:
    def test_full_prediction(self):
        assert pir(np.ones((10, 10), bool), three_blobs())[0] == 100.0

    def test_two_of_three(self):
        pred = np.zeros((10, 10), bool)
        pred[:5, :5] = True
        pred[5:, :5] = True
        rate, n_in, n_gt = pir(pred, three_blobs())
        assert rate == pytest.approx(66.67, abs=0.01) and (n_in, n_gt) == (2, 3)

    def test_no_regions(self):
        with pytest.raises(NoPlexusRegions):
            pir(np.ones((4, 4), bool), np.zeros((4, 4), bool))

    def test_partial_overlap_and_fraction(self):
        plexus = three_blobs()
        pred = np.zeros((10, 10), bool)
        pred[1, 1:3] = True  # half of the first blob
        assert pir(pred | ~plexus, plexus, 1.0)[1] == 0
        assert pir(pred, plexus, 0.5)[1] == 1

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10 ** 6), st.sampled_from([0.25, 0.5, 1.0]))
    def test_matches_oracle(self, seed, fraction):
        rng = np.random.default_rng(seed)
        plexus = rng.random((14, 14)) < 0.25
        if not plexus.any():
            plexus[0, 0] = True
        pred = rng.random((14, 14)) < 0.6
        assert pir(pred, plexus, fraction) == oracle_pir(pred, plexus, fraction)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_non_increasing_in_fraction(self, seed):
        rng = np.random.default_rng(seed)
        plexus = rng.random((12, 12)) < 0.3
        plexus[0, 0] = True
        pred = rng.random((12, 12)) < 0.5
        rates = [pir(pred, plexus, f)[0] for f in (0.1, 0.3, 0.5, 0.8, 1.0)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10 ** 6), st.sampled_from([0.3, 1.0]))
    def test_superset_prediction_is_full(self, seed, fraction):
        rng = np.random.default_rng(seed)
        plexus = rng.random((10, 10)) < 0.3
        plexus[5, 5] = True
        pred = plexus | (rng.random((10, 10)) < 0.3)
        assert pir(pred, plexus, fraction)[0] == 100.0


def _prob_slide(seed, shape=(20, 24)):
    rng = np.random.default_rng(seed)
    musc = np.zeros(shape, bool)
    musc[5:15] = True
    plexus = np.zeros(shape, bool)
    plexus[8:10, 4:6] = plexus[11:13, 15:18] = True
    prob = np.clip(np.where(musc, 0.7, 0.2) + rng.normal(0, 0.25, shape), 0, 1)
    return prob, musc, plexus


class TestSweep:
    def test_zero_threshold_recovers_everything(self):
        prob, musc, plexus = _prob_slide(0)
        pt = threshold_sweep([prob], [musc], [plexus], [0.0])[0]
        assert pt.mean_recall == 100.0 and pt.mean_pir == 100.0

    def test_constant_map_steps(self):
        _, musc, plexus = _prob_slide(0)
        prob = np.full(musc.shape, 0.6)
        lo, hi = threshold_sweep([prob], [musc], [plexus], [0.5, 0.7])
        assert lo.mean_recall == 100.0 and lo.mean_pir == 100.0
        assert hi.mean_recall == 0.0 and hi.mean_pir == 0.0

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_monotone_over_default_grid(self, seed):
        maps = [_prob_slide(seed + i) for i in range(3)]
        pts = threshold_sweep(*zip(*maps), DEFAULT_THRESHOLDS)
        positives = [sum(int((p >= t).sum()) for p, _, _ in maps) for t in DEFAULT_THRESHOLDS]
        assert all(a >= b for a, b in zip(positives, positives[1:]))
        assert all(a.mean_recall >= b.mean_recall for a, b in zip(pts, pts[1:]))
        assert all(a.mean_pir >= b.mean_pir for a, b in zip(pts, pts[1:]))

    def test_matches_per_threshold_evaluation(self):
        prob, musc, plexus = _prob_slide(4)
        for pt in threshold_sweep([prob], [musc], [plexus]):
            rep = evaluate_mask("s", prob >= pt.threshold, musc, plexus)
            assert pt.mean_dice == rep.dice and pt.mean_pir == rep.pir

    def test_requires_sorted_thresholds(self):
        prob, musc, plexus = _prob_slide(0)
        with pytest.raises(ValueError):
            threshold_sweep([prob], [musc], [plexus], [0.5, 0.1])

    def test_default_grid(self):
        assert len(DEFAULT_THRESHOLDS) == 13 and {0.01, 0.4} <= set(DEFAULT_THRESHOLDS)


class TestBaselines:
    def test_rows(self):
        rows = {r["model"]: r for r in baseline_table()}
        assert (rows["k-means"]["dice"], rows["k-means"]["pir"]) == (70.7, 77.4)
        assert (rows["CNN"]["dice"], rows["CNN"]["pir"]) == (89.2, 96.0)
        assert (rows["ViT"]["recall"], rows["ViT"]["pir"]) == (99.7, 100.0)

    def test_copy_is_independent(self):
        baseline_table()[0]["dice"] = 0
        assert baseline_table()[0]["dice"] == 70.7


def test_dice_from_counts_matches_sets():
    x, y = {1, 2, 3, 4}, {3, 4, 5, 6}
    c = ConfusionCounts(len(x & y), len(x - y), len(y - x), 0)
    assert dice_from_counts(c) == 100.0 * 2 * len(x & y) / (len(x) + len(y))
