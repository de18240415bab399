import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import (
    oracle_argmax,
    oracle_iou,
    oracle_mae,
    oracle_miou,
    oracle_ms_ssim,
    oracle_psnr,
    oracle_ssim,
)
from semsr.errors import ShapeError
from semsr.metrics import (
    MetricsReport,
    build_report,
    iou,
    mae,
    mask_from_probs,
    miou,
    ms_ssim,
    pct_improvement,
    pooled_class_ious,
    psnr,
    ssim,
)


class TestPSNR:
    def test_known_value(self):
        # MSE of 0.01 at unit range is exactly 20 dB
        x = np.zeros((10, 10))
        y = np.full((10, 10), 0.1)
        assert psnr(x, y) == pytest.approx(20.0, abs=1e-9)

    def test_identical_is_inf(self, rng):
        x = rng.random((8, 8, 3))
        assert psnr(x, x) == math.inf

    def test_matches_oracle(self, rng):
        for _ in range(20):
            x, y = rng.random((8, 8, 3)), rng.random((8, 8, 3))
            assert psnr(x, y) == pytest.approx(oracle_psnr(x, y), abs=1e-6)

    def test_noise_monotonicity(self, rng):
        x = rng.random((16, 16))
        noise = rng.standard_normal((16, 16))
        values = [psnr(x, x + amp * noise) for amp in (0.01, 0.05, 0.1, 0.2)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((4, 4)), np.zeros((5, 5)))


class TestMAE:
    def test_identity(self, rng):
        x = rng.random((6, 6, 3))
        assert mae(x, x) == 0.0

    def test_constant_offset(self):
        x = np.full((8, 8, 3), 0.4)
        assert mae(x, x + 0.1) == pytest.approx(0.1, abs=1e-12)

    def test_matches_oracle(self, rng):
        x, y = rng.random((4, 4, 3)), rng.random((4, 4, 3))
        assert mae(x, y) == pytest.approx(oracle_mae(x, y), abs=1e-7)


class TestSSIM:
    def test_identity(self, rng):
        x = rng.random((16, 16, 3))
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-9)

    def test_equal_constants(self):
        x = np.full((16, 16), 0.5)
        assert ssim(x, x.copy()) == pytest.approx(1.0, abs=1e-9)

    def test_distinct_constants_closed_form(self):
        # luminance term only: (2*0.2*0.8 + c1) / (0.2^2 + 0.8^2 + c1)
        c1 = (0.01 * 1.0) ** 2
        want = (2 * 0.2 * 0.8 + c1) / (0.2**2 + 0.8**2 + c1)
        x = np.full((16, 16), 0.2)
        y = np.full((16, 16), 0.8)
        assert ssim(x, y) == pytest.approx(want, abs=1e-9)

    def test_matches_sliding_window_oracle(self, rng):
        for _ in range(10):
            x, y = rng.random((16, 16, 3)), rng.random((16, 16, 3))
            assert ssim(x, y) == pytest.approx(oracle_ssim(x, y), abs=1e-6)

    def test_symmetry(self, rng):
        x, y = rng.random((12, 12)), rng.random((12, 12))
        assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-9)

    def test_too_small_image(self):
        with pytest.raises(ShapeError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))


class TestMSSSIM:
    def test_identity(self, rng):
        x = rng.random((176, 176))
        assert ms_ssim(x, x) == pytest.approx(1.0, abs=1e-9)

    def test_matches_independent_recursion(self, rng):
        for _ in range(3):
            x, y = rng.random((176, 176)), rng.random((176, 176))
            assert ms_ssim(x, y) == pytest.approx(oracle_ms_ssim(x, y), abs=1e-5)

    def test_matches_oracle_color(self, rng):
        x, y = rng.random((192, 192, 3)), rng.random((192, 192, 3))
        assert ms_ssim(x, y) == pytest.approx(oracle_ms_ssim(x, y), abs=1e-5)

    def test_blur_sensitivity(self, rng):
        from scipy.ndimage import gaussian_filter

        base = gaussian_filter(rng.random((256, 256)), 2.0)
        base = (base - base.min()) / (base.max() - base.min())
        blurred = gaussian_filter(base, 6.0)
        value = ms_ssim(base, blurred)
        assert value < 0.99
        assert math.isfinite(psnr(base, blurred))

    def test_minimum_size_named(self):
        with pytest.raises(ShapeError, match="176"):
            ms_ssim(np.zeros((128, 128)), np.zeros((128, 128)))


class TestIoU:
    def test_perfect(self):
        m = np.array([[0, 1], [1, 0]])
        assert iou(m, m, 1) == 1.0

    def test_disjoint(self):
        a = np.array([[1, 1], [0, 0]])
        b = np.array([[0, 0], [1, 1]])
        assert iou(a, b, 1) == 0.0

    def test_counting_case(self):
        # two pixels each, one shared: |I|=1, |U|=3
        a = np.array([1, 1, 0, 0])
        b = np.array([0, 1, 1, 0])
        assert iou(a, b, 1) == pytest.approx(1 / 3)

    def test_empty_union_is_none(self):
        z = np.zeros((4, 4), dtype=int)
        assert iou(z, z, 3) is None

    def test_matches_oracle(self, rng):
        for _ in range(20):
            a = rng.integers(0, 3, (6, 6))
            b = rng.integers(0, 3, (6, 6))
            for c in range(3):
                got = iou(a, b, c)
                want = oracle_iou(a, b, c)
                assert (got is None and want is None) or got == pytest.approx(want, abs=1e-9)

    @given(data=st.data())
    @settings(max_examples=30, deadline=None)
    def test_bounded_and_symmetric(self, data):
        shape = (5, 5)
        a = np.array(data.draw(st.lists(st.integers(0, 2), min_size=25, max_size=25))).reshape(shape)
        b = np.array(data.draw(st.lists(st.integers(0, 2), min_size=25, max_size=25))).reshape(shape)
        v = iou(a, b, 1)
        if v is not None:
            assert 0.0 <= v <= 1.0
            assert v == iou(b, a, 1)


class TestMIoU:
    def test_perfect(self, rng):
        m = rng.integers(0, 4, (8, 8))
        assert miou(m, m, 4) == 1.0

    def test_half(self):
        a = np.array([0, 0, 1, 1])
        b = np.array([0, 0, 1, 1])
        b2 = np.array([0, 0, 0, 0])
        # class 0 IoU = 0.5 (2 shared, union 4), class 1 IoU = 0
        assert miou(a, b2, 2) == pytest.approx((0.5 + 0.0) / 2)

    def test_matches_oracle(self, rng):
        for _ in range(20):
            a = rng.integers(0, 3, (7, 7))
            b = rng.integers(0, 3, (7, 7))
            assert miou(a, b, 3) == pytest.approx(oracle_miou(a, b, 3), abs=1e-9)

    def test_excludes_undefined_classes(self):
        a = np.array([0, 0, 1, 1])
        b = np.array([0, 1, 1, 0])
        # class 2 absent entirely: mean over classes 0 and 1 only
        per = [iou(a, b, c) for c in range(3)]
        assert per[2] is None
        assert miou(a, b, 3) == pytest.approx(np.mean([per[0], per[1]]), abs=1e-9)

    def test_degenerate_all_empty(self):
        z = np.zeros((2, 2), dtype=int)
        with pytest.raises(ShapeError):
            miou(z - 1, z - 1, 1)  # no pixel of class 0 anywhere


class TestPctImprovement:
    def test_paper_protocol_4x(self):
        assert round(pct_improvement(0.523, 0.468), 1) == 11.8

    def test_paper_protocol_32x(self):
        assert round(pct_improvement(0.250, 0.120)) == 108

    def test_zero_on_equal(self):
        assert pct_improvement(0.3, 0.3) == 0.0

    def test_sign_consistency(self):
        assert pct_improvement(0.4, 0.5) < 0
        assert pct_improvement(0.5, 0.4) > 0

    def test_zero_baseline_error(self):
        with pytest.raises(ValueError):
            pct_improvement(0.5, 0.0)


class TestMaskFromProbs:
    def test_one_hot_recovery(self, rng):
        labels = rng.integers(0, 6, (8, 8))
        probs = np.eye(6)[labels]
        assert np.array_equal(mask_from_probs(probs), labels)

    def test_uniform_ties_pick_class_zero(self):
        probs = np.full((4, 4, 6), 1.0 / 6)
        assert (mask_from_probs(probs) == 0).all()

    def test_matches_scan_oracle(self, rng):
        probs = rng.random((6, 6, 5))
        assert np.array_equal(mask_from_probs(probs), oracle_argmax(probs))


class TestReport:
    def test_row_count_and_round_trip(self, tmp_path, rng):
        n = 3
        hr = rng.random((n, 32, 32, 3)).astype(np.float32)
        up = np.clip(hr + rng.normal(0, 0.05, hr.shape), 0, 1).astype(np.float32)
        labels = rng.integers(0, 3, (n, 32, 32))
        pred = rng.integers(0, 3, (n, 32, 32))
        report = build_report(up, hr, pred, labels, ("a", "b", "c"))
        assert len(report.rows) == n
        assert report.aggregate["image_id"] == "aggregate"
        path = report.to_csv(tmp_path / "r.csv")
        loaded = MetricsReport.from_csv(path)
        assert len(loaded.rows) == n
        for col in ("mae", "psnr", "ssim", "miou"):
            assert loaded.aggregate[col] == pytest.approx(report.aggregate[col], abs=1e-12)

    def test_inf_psnr_serialisation(self, tmp_path, rng):
        hr = rng.random((1, 32, 32, 3)).astype(np.float32)
        labels = np.zeros((1, 32, 32), dtype=int)
        report = build_report(hr, hr, labels, labels, ("a",))
        path = report.to_csv(tmp_path / "r.csv")
        assert "inf" in path.read_text()
        loaded = MetricsReport.from_csv(path)
        assert loaded.aggregate["psnr"] == math.inf

    def test_pooled_equals_unweighted_mean_of_classes(self, rng):
        preds = [rng.integers(0, 3, (8, 8)) for _ in range(4)]
        targets = [rng.integers(0, 3, (8, 8)) for _ in range(4)]
        pooled = pooled_class_ious(preds, targets, 3)
        defined = [v for v in pooled if v is not None]
        assert np.mean(defined) == pytest.approx(
            sum(defined) / len(defined), abs=1e-9
        )
