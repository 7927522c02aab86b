import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from texguard.metrics import (PSNR_CAP, DefenseReport, EvalRecord, distortion_l2, dsr, feature_distance_proxy, mse,
                              psnr, ssim)


def ssim_oracle(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Window-by-window SSIM with an explicit 2-D Gaussian."""
    ax = np.arange(size) - size // 2
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    c1, c2 = k1 ** 2, k2 ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        for i in range(x.shape[0] - size + 1):
            for j in range(x.shape[1] - size + 1):
                wx, wy = x[i:i + size, j:j + size], y[i:i + size, j:j + size]
                mx, my = (g * wx).sum(), (g * wy).sum()
                vx = (g * (wx - mx) ** 2).sum()
                vy = (g * (wy - my) ** 2).sum()
                cxy = (g * (wx - mx) * (wy - my)).sum()
                vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


class TestPsnr:
    def test_identical_is_cap(self, rng):
        a = rng.uniform(size=(8, 8, 3))
        assert psnr(a, a) == PSNR_CAP == 99.0

    @pytest.mark.parametrize("err,db", [(0.01, 20.0), (1e-4, 40.0)])
    def test_known_values(self, err, db):
        a = np.zeros((10, 10))
        assert psnr(a, a + np.sqrt(err)) == pytest.approx(db, abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2)), np.zeros((3, 3)))


class TestSsim:
    def test_identical_is_one(self, rng):
        a = rng.uniform(size=(20, 20, 3))
        assert ssim(a, a) == 1.0

    def test_negative_is_below_zero(self, rng):
        a = rng.uniform(size=(24, 24, 3))
        assert ssim(a, 1.0 - a) < 0

    def test_matches_window_oracle(self, rng):
        a = rng.uniform(size=(24, 20, 3))
        b = np.clip(a + rng.normal(0, 0.1, size=a.shape), 0, 1)
        assert ssim(a, b) == pytest.approx(ssim_oracle(a, b), abs=1e-6)

    def test_too_small(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))


class TestDistortion:
    def test_examples(self, rng):
        a = rng.uniform(size=(4, 4, 3))
        assert distortion_l2(a, a) == 0
        assert distortion_l2(a, a + 0.3) == pytest.approx(0.09)

    def test_matches_summation(self, rng):
        a, b = rng.uniform(size=(5, 6, 3)), rng.uniform(size=(5, 6, 3))
        total = 0.0
        for x, y in zip(a.ravel(), b.ravel()):
            total += (x - y) ** 2
        assert distortion_l2(a, b) == pytest.approx(total / a.size, abs=1e-9)
        assert mse(a, b) == distortion_l2(a, b)


class TestDsr:
    def test_boundary_counts(self):
        assert dsr([0.06, 0.04, 0.05], 0.05) == pytest.approx(66.67, abs=0.01)

    def test_all_below(self):
        assert dsr([0.01, 0.02], 0.05) == 0.0

    def test_counting_oracle(self, rng):
        d = rng.uniform(0, 0.1, size=1000)
        assert dsr(d, 0.05) == 100.0 * sum(1 for x in d if x >= 0.05) / 1000

    def test_records_and_empty(self):
        recs = [EvalRecord("a", "k", 40.0, 0.9, 0.07), EvalRecord("b", "k", 38.0, 0.95, 0.01)]
        assert dsr(recs) == 50.0 and recs[0].success and not recs[1].success
        with pytest.raises(ValueError):
            dsr([])

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=50), st.floats(0.001, 1))
    def test_range(self, ds, thr):
        assert 0.0 <= dsr(ds, thr) <= 100.0


def test_report_aggregates_per_kind():
    recs = [EvalRecord("a", "x", 30.0, 0.9, 0.1), EvalRecord("b", "x", 40.0, 0.8, 0.0),
            EvalRecord("a", "y", 30.0, 0.9, 0.06), EvalRecord("b", "y", 40.0, 0.8, 0.06)]
    rep = DefenseReport.from_records(recs)
    assert [r.edit_kind for r in rep.rows] == ["x", "y"]
    assert [r.dsr_percent for r in rep.rows] == [50.0, 100.0]
    assert rep.mean_dsr == 75.0 and rep.mean_psnr == 35.0 and rep.mean_ssim == pytest.approx(0.85)


def test_feature_proxy_identical_is_zero(rng):
    from texguard.attention import ClassifierSpec, build_classifier
    from texguard.layers import mark_trained

    spec = ClassifierSpec()
    p = mark_trained(build_classifier(spec, 0), 1)
    a = rng.uniform(size=(64, 64, 3))
    assert feature_distance_proxy(a, a, p, spec) == 0.0
    with pytest.raises(ValueError):
        feature_distance_proxy(a, a, build_classifier(spec, 0), spec)
