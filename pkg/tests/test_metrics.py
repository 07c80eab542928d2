import math

import numpy as np
import pytest

from adapterleak import metrics as mx
from adapterleak.errors import ShapeError
from adapterleak.numerics import Rng


class TestMsePsnr:
    def test_identical_zero_mse_infinite_psnr(self):
        a = Rng(1).uniform(48)
        assert mx.patch_mse(a, a) == 0.0
        assert math.isinf(mx.psnr(a, a))

    def test_opposite_extremes(self):
        a = np.ones(10)
        b = -np.ones(10)
        assert mx.patch_mse(a, b) == 4.0
        assert mx.psnr(a, b, peak=2.0) == 0.0

    def test_against_direct_formula(self):
        rng = Rng(2)
        a, b = rng.uniform(60), rng.uniform(60)
        expected = float(((a - b) ** 2).mean())
        assert abs(mx.patch_mse(a, b) - expected) < 1e-12

    def test_symmetry_nonnegativity(self):
        rng = Rng(3)
        a, b = rng.uniform(30), rng.uniform(30)
        assert mx.patch_mse(a, b) == mx.patch_mse(b, a)
        assert mx.patch_mse(a, b) >= 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mx.patch_mse(np.ones(3), np.ones(4))


class TestSsim:
    def test_identical_is_one(self):
        a = Rng(4).uniform(3 * 8 * 8).reshape(3, 8, 8) * 2 - 1
        assert mx.ssim(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_zero_mean_negation_is_negative(self):
        rng = Rng(5)
        a = rng.uniform(64).reshape(8, 8)
        a -= a.mean()
        # oracle by the direct window formula: mu_b = -mu_a = 0, cov = -var
        assert mx.ssim(a, -a) < 0.0

    def test_constant_offset_second_order(self):
        for delta in (1e-3, 1e-2):
            a = np.full((8, 8), 0.25)
            val = mx.ssim(a, a + delta)
            c1 = (0.01 * 2.0) ** 2
            mu2 = 0.25 * (0.25 + delta)
            expected = (2 * mu2 + c1) / (0.25 ** 2 + (0.25 + delta) ** 2 + c1)
            assert val == pytest.approx(expected, abs=1e-12)
            assert 1.0 - val < 3.0 * delta ** 2 / c1

    def test_window_shrinks_for_small_patches(self):
        a = Rng(6).uniform(3 * 4 * 4).reshape(3, 4, 4)
        assert mx.ssim(a, a, window=8) == pytest.approx(1.0)

    def test_range(self):
        rng = Rng(7)
        for _ in range(10):
            a = rng.uniform(64).reshape(8, 8) * 2 - 1
            b = rng.uniform(64).reshape(8, 8) * 2 - 1
            assert -1.0 <= mx.ssim(a, b) <= 1.0


class TestRecoveryRate:
    def test_all_recovered_exactly(self):
        truth = Rng(8).uniform(2 * 4 * 48).reshape(2, 4, 48) * 2 - 1
        recovered = {(i, t + 1): truth[i, t] for i in range(2) for t in range(4)}
        assert mx.recovery_rate(recovered, truth) == 1.0

    def test_none_recovered(self):
        truth = Rng(9).uniform(2 * 4 * 48).reshape(2, 4, 48)
        assert mx.recovery_rate({}, truth) == 0.0

    def test_threshold_monotone(self):
        rng = Rng(10)
        truth = rng.uniform(2 * 4 * 48).reshape(2, 4, 48) * 2 - 1
        recovered = {(i, t + 1): np.clip(truth[i, t] + rng.uniform(48) * 0.3, -1, 1)
                     for i in range(2) for t in range(4)}
        rates = [mx.recovery_rate(recovered, truth, threshold_mse=th)
                 for th in (0.001, 0.01, 0.05, 1.0)]
        assert all(r1 <= r2 for r1, r2 in zip(rates, rates[1:]))

    def test_score_report_gray_fill(self):
        truth = np.full((1, 4, 48), 0.5)
        report = mx.score_reconstruction({(0, 1): truth[0, 0]}, truth, p=4, c=3)
        assert report.recovery_rate == 0.25
        # unrecovered slots compare mid-gray against 0.5
        assert report.mean_mse == pytest.approx((3 * 0.25) / 4, abs=1e-12)


class TestWriters:
    def test_csv_deterministic(self, tmp_path):
        rows = [["a", 1, 0.5, math.inf, -0.25]]
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        mx.write_csv(p1, ["n", "x", "r", "p", "s"], rows)
        mx.write_csv(p2, ["n", "x", "r", "p", "s"], rows)
        assert p1.read_bytes() == p2.read_bytes()
        assert "inf" in p1.read_text()

    def test_json_sorted_keys(self, tmp_path):
        p = tmp_path / "s.json"
        mx.write_json(p, {"b": 1, "a": [1.5, None]})
        text = p.read_text()
        assert text.index('"a"') < text.index('"b"')
