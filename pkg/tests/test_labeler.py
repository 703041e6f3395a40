import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imoseg.geometry import FlowField, GeometryError, ShapeMismatchError
from imoseg.labeler import (
    BACKGROUND,
    IMO,
    INVALID,
    EmptyHistogramError,
    LabelMask,
    RejectedSliceError,
    RejectionReason,
    ResidualField,
    ResidualHistogram,
    ThresholdDecision,
    close_binary,
    decide_threshold,
    make_label_mask,
    morphological_close,
    otsu_threshold,
    residual_field,
    residual_histogram,
)

from oracles import dilate_loop, erode_loop, otsu_brute_force

ACCEPT = ThresholdDecision(1.0, 1.0, 1.0, True)


def _hist_from(bins_and_counts, bins=256, clip=10.0):
    counts = np.zeros(bins, dtype=np.int64)
    for b, c in bins_and_counts:
        counts[b] += c
    return ResidualHistogram(counts, clip)


def _within_class(hist, k):
    p = hist.counts / hist.total
    c = hist.centers()
    out = 0.0
    for sel in (slice(0, k + 1), slice(k + 1, None)):
        w = p[sel].sum()
        if w > 0:
            mu = (p[sel] @ c[sel]) / w
            out += p[sel] @ (c[sel] - mu) ** 2
    return out


class TestResidualField:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.shape = (12, 17)
        self.a = FlowField(rng.normal(size=self.shape), rng.normal(size=self.shape), rng.random(self.shape) < 0.9)
        self.b = FlowField(rng.normal(size=self.shape), rng.normal(size=self.shape), rng.random(self.shape) < 0.9)

    def test_identical(self):
        r = residual_field(self.a, self.a)
        assert not r.r.any()

    def test_345(self):
        shifted = FlowField(self.a.u + 3, self.a.v + 4, self.a.valid)
        r = residual_field(shifted, self.a)
        assert np.allclose(r.r[r.valid], 5.0, rtol=1e-14)

    def test_elementwise_oracle(self):
        r = residual_field(self.a, self.b)
        valid = self.a.valid & self.b.valid
        assert np.array_equal(r.valid, valid)
        for i, j in zip(*np.nonzero(valid)):
            ref = np.sqrt((self.a.u[i, j] - self.b.u[i, j]) ** 2 + (self.a.v[i, j] - self.b.v[i, j]) ** 2)
            assert r.r[i, j] == pytest.approx(ref, rel=1e-14)

    def test_dt_mismatch(self):
        other = FlowField(self.a.u, self.a.v, self.a.valid, dt=0.05)
        with pytest.raises(GeometryError):
            residual_field(self.a, other)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            residual_field(self.a, FlowField.zeros((3, 3)))


class TestHistogram:
    def test_clip_goes_to_last_bin(self):
        res = ResidualField(np.array([[0.0, 9.99, 10.0, 57.0]]), np.ones((1, 4), bool))
        h = residual_histogram(res)
        assert h.total == 4
        assert h.counts[0] == 1 and h.counts[255] == 3
        assert h.bin_width == 10.0 / 256

    def test_invalid_excluded(self):
        res = ResidualField(np.array([[1.0, 2.0]]), np.array([[True, False]]))
        assert residual_histogram(res).total == 1

    def test_bad_counts(self):
        with pytest.raises(ValueError):
            ResidualHistogram(np.array([1, -1]))


class TestOtsu:
    def test_single_bin(self):
        h = _hist_from([(40, 100)])
        thr, between, total = otsu_threshold(h)
        assert between == 0.0 and total == 0.0
        assert thr == 41 * h.bin_width

    def test_bimodal(self):
        h = _hist_from([(2, 500), (51, 500)])
        thr, between, total = otsu_threshold(h)
        # the split must separate the two modes
        assert 3 * h.bin_width <= thr <= 51 * h.bin_width
        lo, hi = (2 + 0.5) * h.bin_width, (51 + 0.5) * h.bin_width
        assert lo < thr < hi
        assert between == pytest.approx(total, rel=1e-12)
        assert otsu_brute_force(h.counts) + 1 == round(thr / h.bin_width)

    def test_empty(self):
        with pytest.raises(EmptyHistogramError):
            otsu_threshold(ResidualHistogram(np.zeros(256)))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(60):
            kind = rng.integers(3)
            if kind == 0:
                counts = rng.integers(0, 50, 256)
            elif kind == 1:
                counts = np.zeros(256, dtype=np.int64)
                counts[rng.integers(0, 256, rng.integers(1, 6))] = rng.integers(1, 5)
            else:
                counts = rng.poisson(rng.uniform(0, 3, 256))
            if counts.sum() == 0:
                counts[0] = 1
            h = ResidualHistogram(counts)
            thr, _, _ = otsu_threshold(h)
            assert round(thr / h.bin_width) == otsu_brute_force(counts) + 1

    def test_tie_breaks_low(self):
        # symmetric three-spike histogram: splitting either gap is equally good
        h = _hist_from([(10, 5), (20, 5), (30, 5)])
        thr, _, _ = otsu_threshold(h)
        assert round(thr / h.bin_width) == otsu_brute_force(h.counts) + 1 == 11

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 1000), min_size=256, max_size=256).filter(lambda c: sum(c) > 0))
    def test_variance_decomposition(self, counts):
        h = ResidualHistogram(np.array(counts))
        thr, between, total = otsu_threshold(h)
        k = round(thr / h.bin_width) - 1
        within = _within_class(h, k)
        assert 0 <= between <= total
        assert within + between == pytest.approx(total, rel=1e-9, abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(st.floats(0, 20, allow_nan=False), min_size=1, max_size=200),
        st.sampled_from([0.5, 2.0, 4.0, 0.25]),
    )
    def test_scale_covariance(self, values, c):
        r = np.array(values)[None, :]
        valid = np.ones_like(r, dtype=bool)
        t1, _, _ = otsu_threshold(residual_histogram(ResidualField(r, valid), 256, 10.0))
        t2, _, _ = otsu_threshold(residual_histogram(ResidualField(r * c, valid), 256, 10.0 * c))
        assert t2 == t1 * c


class TestDecide:
    def test_clean_bimodal_accepted(self):
        h = _hist_from([(3, 850), (100, 150)])
        d = decide_threshold(h)
        assert d.accepted and d.rejection_reason is RejectionReason.NONE

    def test_uniform_rejected_total(self):
        h = ResidualHistogram(np.full(256, 40))
        d = decide_threshold(h)
        assert d.total_variance == pytest.approx(100 / 12, rel=1e-3)
        assert not d.accepted
        assert d.rejection_reason is RejectionReason.TOTAL_VARIANCE_TOO_HIGH

    def test_unimodal_rejected_separation(self):
        h = _hist_from([(4, 300), (5, 500), (6, 200)])
        d = decide_threshold(h)
        assert d.rejection_reason is RejectionReason.SEPARATION_TOO_LOW
        assert not d.accepted

    def test_comparator_flip(self):
        h = ResidualHistogram(np.full(256, 40))
        d = decide_threshold(h, total_variance_comparator="less")
        assert d.rejection_reason is not RejectionReason.TOTAL_VARIANCE_TOO_HIGH

    def test_threshold_always_filled(self):
        d = decide_threshold(_hist_from([(5, 10)]))
        assert d.threshold == 6 * 10.0 / 256


class TestMakeMask:
    def test_zero_residual(self):
        res = ResidualField(np.zeros((5, 6)), np.ones((5, 6), bool))
        m = make_label_mask(res, ACCEPT)
        assert (m.label == BACKGROUND).all()

    def test_box(self):
        r = np.zeros((20, 20))
        r[5:10, 6:12] = 5.0
        m = make_label_mask(ResidualField(r, np.ones_like(r, bool)), ACCEPT)
        assert np.array_equal(m.imo, r > 0)

    def test_equal_to_threshold_is_background(self):
        r = np.array([[1.0, 1.0 + 1e-12]])
        m = make_label_mask(ResidualField(r, np.ones_like(r, bool)), ACCEPT)
        assert m.label.tolist() == [[BACKGROUND, IMO]]

    def test_invalid_kept(self):
        r = np.full((4, 4), 3.0)
        valid = np.ones((4, 4), bool)
        valid[0, 0] = False
        m = make_label_mask(ResidualField(r, valid), ACCEPT, morph_radius=1)
        assert m.label[0, 0] == INVALID
        assert (m.label[valid] == IMO).all()

    def test_rejected_decision(self):
        rej = ThresholdDecision(1.0, 9.0, 0.1, False, RejectionReason.TOTAL_VARIANCE_TOO_HIGH)
        with pytest.raises(RejectedSliceError):
            make_label_mask(ResidualField(np.zeros((2, 2)), np.ones((2, 2), bool)), rej)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 10), st.floats(0, 10))
    def test_threshold_monotone(self, t1, t2):
        lo, hi = sorted((t1, t2))
        r = np.random.default_rng(4).uniform(0, 10, (16, 16))
        valid = np.ones_like(r, bool)
        a = make_label_mask(ResidualField(r, valid), ThresholdDecision(lo, 1, 1, True)).imo
        b = make_label_mask(ResidualField(r, valid), ThresholdDecision(hi, 1, 1, True)).imo
        assert not np.any(b & ~a)


class TestMorphology:
    def test_radius_zero(self):
        m = np.random.default_rng(0).random((10, 10)) < 0.5
        assert np.array_equal(close_binary(m, 0), m)

    def test_fills_hole(self):
        m = np.zeros((20, 20), bool)
        m[5:15, 5:15] = True
        m[9, 9] = False
        assert close_binary(m, 1)[9, 9]
        assert np.count_nonzero(close_binary(m, 1)) == 100

    @pytest.mark.parametrize("r", [1, 2, 3])
    def test_matches_shift_oracle(self, r):
        rng = np.random.default_rng(r)
        for _ in range(10):
            m = rng.random((25, 31)) < rng.uniform(0.1, 0.7)
            padded = np.pad(m, r)
            ref = erode_loop(dilate_loop(padded, r), r)[r:-r, r:-r]
            assert np.array_equal(close_binary(m, r), ref)

    @pytest.mark.parametrize("r", [1, 2])
    def test_idempotent(self, r):
        rng = np.random.default_rng(10 + r)
        for _ in range(10):
            m = rng.random((30, 30)) < 0.4
            once = close_binary(m, r)
            assert np.array_equal(close_binary(once, r), once)

    def test_invalid_restored(self):
        label = np.zeros((9, 9), np.uint8)
        label[2:7, 2:7] = IMO
        label[4, 4] = INVALID
        out = morphological_close(LabelMask(label), 1)
        assert out.label[4, 4] == INVALID
        assert (out.label[2:7, 2:7][out.label[2:7, 2:7] != INVALID] == IMO).all()

    def test_negative_radius(self):
        with pytest.raises(ValueError):
            close_binary(np.zeros((3, 3), bool), -1)
