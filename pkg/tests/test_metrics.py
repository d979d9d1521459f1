"""Scoring and threshold-baseline tests.

Confusion counts are checked against independent elementwise arithmetic,
and the NDWI threshold search against a brute-force sweep that scores
every grid point by explicit mask comparisons.  Known precision/recall
pairs are frozen as literal expectations."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riverseg.chips import ChipRecord
from riverseg.errors import ArgumentError
from riverseg.labels import (
    DEFINITE_WATER,
    LAND,
    WATER_CUTOFF,
    LabelMask,
    ndwi,
    pick_ndwi_bands,
)
from riverseg.metrics import (
    ConfusionCounts,
    ScoreSummary,
    confusion,
    metrics_csv,
    optimize_ndwi_threshold,
    prf1,
    summarize,
)
from riverseg.raster import MS4_BANDS, GeoTransform, Raster, Window


def _chip_from_ndwi(values: np.ndarray, labels: np.ndarray,
                    source_id: str = "s") -> ChipRecord:
    """Build a 4-band chip whose NDWI equals ``values`` exactly."""
    values = np.asarray(values, dtype=np.float64)
    green = np.round(1000.0 * (1.0 + values)).astype(np.uint16)
    nir = np.round(1000.0 * (1.0 - values)).astype(np.uint16)
    data = np.stack([np.full_like(green, 400), green,
                     np.full_like(green, 600), nir])
    image = Raster(data, MS4_BANDS, GeoTransform())
    label = LabelMask(np.asarray(labels, dtype=np.uint8))
    h, w = labels.shape
    return ChipRecord(image, label, source_id, Window(0, 0, w, h))


def _random_chip(rng, h=12, w=12, source_id="r") -> ChipRecord:
    data = rng.integers(1, 2047, size=(4, h, w)).astype(np.uint16)
    image = Raster(data, MS4_BANDS, GeoTransform())
    labels = rng.choice([0, 70, 170, 255], size=(h, w)).astype(np.uint8)
    return ChipRecord(image, LabelMask(labels), source_id, Window(0, 0, w, h))


class TestConfusion:
    def test_identical_masks(self):
        rng = np.random.default_rng(0)
        m = rng.random((20, 20)) > 0.5
        c = confusion(m, m)
        assert (c.tp, c.fp, c.fn) == (int(m.sum()), 0, 0)
        assert c.tn == m.size - m.sum()
        assert prf1(c) == (1.0, 1.0, 1.0)

    def test_all_water_prediction_over_half_water_truth(self):
        truth = np.zeros((10, 10), dtype=bool)
        truth[:5] = True
        c = confusion(np.ones((10, 10), dtype=bool), truth)
        p, r, f1 = prf1(c)
        assert (p, r) == (0.5, 1.0)
        assert f1 == pytest.approx(2.0 / 3.0)

    def test_empty_prediction_scores_zero(self):
        truth = np.ones((4, 4), dtype=bool)
        assert prf1(confusion(np.zeros((4, 4), dtype=bool), truth)) == (0.0, 0.0, 0.0)

    def test_counts_match_elementwise_arithmetic(self):
        rng = np.random.default_rng(3)
        pred = rng.random((31, 17)) > 0.4
        truth = rng.random((31, 17)) > 0.6
        c = confusion(pred, truth)
        pi, ti = pred.astype(np.int64), truth.astype(np.int64)
        assert c.tp == (pi * ti).sum()
        assert c.fp == (pi * (1 - ti)).sum()
        assert c.fn == ((1 - pi) * ti).sum()
        assert c.tn == ((1 - pi) * (1 - ti)).sum()
        assert c.total == pred.size

    def test_nonzero_semantics_for_integer_masks(self):
        pred = np.array([[0, 255], [128, 0]], dtype=np.uint8)
        truth = np.array([[0, 1], [0, 1]], dtype=np.uint8)
        c = confusion(pred, truth)
        assert (c.tp, c.fp, c.fn, c.tn) == (1, 1, 1, 1)

    def test_swapping_masks_swaps_precision_and_recall(self):
        rng = np.random.default_rng(5)
        a = rng.random((15, 15)) > 0.5
        b = rng.random((15, 15)) > 0.5
        pa, ra, fa = prf1(confusion(a, b))
        pb, rb, fb = prf1(confusion(b, a))
        assert (pa, ra) == (rb, pb)
        assert fa == pytest.approx(fb)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ArgumentError):
            confusion(np.zeros((3, 3), dtype=bool), np.zeros((3, 4), dtype=bool))

    def test_negative_counts_rejected(self):
        with pytest.raises(ArgumentError):
            ConfusionCounts(1, -1, 0, 0)

    def test_counts_add(self):
        total = ConfusionCounts(1, 2, 3, 4) + ConfusionCounts(10, 20, 30, 40)
        assert total == ConfusionCounts(11, 22, 33, 44)


class TestPrf1:
    def test_balanced_errors(self):
        assert prf1(ConfusionCounts(1, 1, 1, 0)) == (0.5, 0.5, 0.5)

    def test_known_pair(self):
        p, r, f1 = prf1(ConfusionCounts(tp=320, fp=30, fn=32, tn=0))
        assert p == pytest.approx(0.914286, abs=1e-6)
        assert r == pytest.approx(0.909091, abs=1e-6)
        assert f1 == pytest.approx(0.911681, abs=1e-6)

    def test_perfect_precision_tiny_recall(self):
        p, r, f1 = prf1(ConfusionCounts(tp=1, fp=0, fn=999, tn=0))
        assert p == 1.0
        assert r == 0.001
        assert f1 == pytest.approx(2 * 0.001 / 1.001)

    @settings(max_examples=200, deadline=None)
    @given(st.tuples(*(st.integers(0, 10**6) for _ in range(4))))
    def test_bounds_and_harmonic_mean_property(self, counts):
        c = ConfusionCounts(*counts)
        p, r, f1 = prf1(c)
        assert 0.0 <= p <= 1.0 and 0.0 <= r <= 1.0 and 0.0 <= f1 <= 1.0
        assert f1 <= (p + r) / 2 + 1e-12
        if p == r:
            assert f1 == pytest.approx(p)
        # mirroring fp and fn mirrors precision and recall, keeps F1
        p2, r2, f2 = prf1(ConfusionCounts(c.tp, c.fn, c.fp, c.tn))
        assert (p2, r2) == (r, p)
        assert f2 == pytest.approx(f1)


def _sweep_oracle(records, step):
    """Score every grid threshold by explicit mask comparison and apply
    the documented plateau rule."""
    n_steps = int(round(2.0 / step))
    grid = np.round(np.arange(-n_steps // 2, n_steps // 2 + 1) * step, 10)
    vals, wat = [], []
    for rec in records:
        green, nir, _ = pick_ndwi_bands(rec.image)
        vals.append(ndwi(green, nir).ravel())
        wat.append(rec.label.values.ravel() >= WATER_CUTOFF)
    v = np.concatenate(vals)
    w = np.concatenate(wat)
    f1s = []
    for t in grid:
        pred = v >= t
        tp = int((pred & w).sum())
        fp = int((pred & ~w).sum())
        fn = int((~pred & w).sum())
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    f1s = np.asarray(f1s)
    winners = np.flatnonzero(f1s >= f1s.max() - 1e-12)
    first = last = winners[0]
    for k in winners[1:]:
        if k != last + 1:
            break
        last = k
    return float((grid[first] - step + grid[last]) / 2.0)


class TestOptimizeNdwiThreshold:
    def test_two_level_scene_centres_the_plateau(self):
        values = np.zeros((10, 10))
        labels = np.zeros((10, 10), dtype=np.uint8)
        values[:, :4] = 0.8
        labels[:, :4] = DEFINITE_WATER
        rec = _chip_from_ndwi(values, labels)
        assert optimize_ndwi_threshold([rec]) == pytest.approx(0.40, abs=1e-9)

    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_matches_sweep_oracle_on_random_scenes(self, seed):
        rng = np.random.default_rng(seed)
        records = [_random_chip(rng, source_id=f"r{i}") for i in range(3)]
        assert optimize_ndwi_threshold(records) == pytest.approx(
            _sweep_oracle(records, 0.01), abs=1e-9)

    def test_matches_sweep_oracle_on_correlated_scene(self):
        rng = np.random.default_rng(9)
        values = rng.uniform(-0.9, 0.9, size=(24, 24))
        labels = np.where(values > 0.25, DEFINITE_WATER, LAND).astype(np.uint8)
        flip = rng.random((24, 24)) < 0.05
        labels[flip] = 255 - labels[flip]
        rec = _chip_from_ndwi(values, labels)
        assert optimize_ndwi_threshold([rec]) == pytest.approx(
            _sweep_oracle([rec], 0.01), abs=1e-9)

    def test_coarse_step(self):
        rng = np.random.default_rng(13)
        records = [_random_chip(rng)]
        assert optimize_ndwi_threshold(records, step=0.1) == pytest.approx(
            _sweep_oracle(records, 0.1), abs=1e-9)

    def test_single_water_pixel_is_defined(self):
        values = np.full((8, 8), -0.2)
        values[3, 3] = 0.6
        labels = np.zeros((8, 8), dtype=np.uint8)
        labels[3, 3] = DEFINITE_WATER
        rec = _chip_from_ndwi(values, labels)
        t = optimize_ndwi_threshold([rec])
        assert -1.01 <= t <= 1.0
        assert t == pytest.approx(_sweep_oracle([rec], 0.01), abs=1e-9)

    def test_all_water_scene(self):
        values = np.full((6, 6), 0.5)
        labels = np.full((6, 6), DEFINITE_WATER, dtype=np.uint8)
        rec = _chip_from_ndwi(values, labels)
        assert optimize_ndwi_threshold([rec]) == pytest.approx(
            _sweep_oracle([rec], 0.01), abs=1e-9)

    def test_record_order_irrelevant(self):
        rng = np.random.default_rng(21)
        records = [_random_chip(rng, source_id=f"r{i}") for i in range(4)]
        assert optimize_ndwi_threshold(records) == optimize_ndwi_threshold(
            records[::-1])

    def test_no_water_rejected(self):
        values = np.zeros((5, 5))
        labels = np.zeros((5, 5), dtype=np.uint8)
        with pytest.raises(ArgumentError):
            optimize_ndwi_threshold([_chip_from_ndwi(values, labels)])


class TestSummarize:
    def test_single_score(self):
        s = summarize([0.8])
        assert s == ScoreSummary((0.8,), 0.8, 0.8, 0.8, 0.8)

    def test_four_scores_interpolated_quartiles(self):
        s = summarize([0.6, 0.7, 0.8, 0.9])
        assert s.median == pytest.approx(0.75)
        assert s.lower_quartile == pytest.approx(0.675)
        assert s.upper_quartile == pytest.approx(0.825)
        assert s.mean == pytest.approx(0.75)

    def test_permutation_invariant_statistics(self):
        rng = np.random.default_rng(2)
        scores = rng.random(11).tolist()
        a = summarize(scores)
        b = summarize(scores[::-1])
        assert (a.median, a.lower_quartile, a.upper_quartile) == (
            b.median, b.lower_quartile, b.upper_quartile)
        assert a.mean == pytest.approx(b.mean, rel=1e-12)

    def test_scores_kept_in_input_order(self):
        assert summarize([0.3, 0.1, 0.2]).scores == (0.3, 0.1, 0.2)

    def test_empty_rejected(self):
        with pytest.raises(ArgumentError):
            summarize([])


class TestMetricsCsv:
    def test_golden_report(self):
        rows = [
            ("a", ConfusionCounts(9, 1, 3, 87)),
            ("b", ConfusionCounts(0, 0, 0, 100)),
        ]
        want = (
            "image_id,tp,fp,fn,tn,precision,recall,f1\n"
            "a,9,1,3,87,0.900000,0.750000,0.818182\n"
            "b,0,0,0,100,0.000000,0.000000,0.000000\n"
            "pooled,9,1,3,187,0.900000,0.750000,0.818182\n"
        )
        assert metrics_csv(rows) == want

    def test_pooled_row_micro_averages(self):
        rows = [
            ("left", ConfusionCounts(10, 0, 10, 80)),
            ("right", ConfusionCounts(10, 10, 0, 80)),
        ]
        lines = metrics_csv(rows).splitlines()
        assert lines[-1].startswith("pooled,20,10,10,160,")
        p, r, f1 = (float(x) for x in lines[-1].split(",")[5:])
        assert p == pytest.approx(20 / 30, abs=5e-7)
        assert r == pytest.approx(20 / 30, abs=5e-7)
        assert f1 == pytest.approx(20 / 30, abs=5e-7)
