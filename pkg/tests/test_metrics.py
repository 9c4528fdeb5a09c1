import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.lib.stride_tricks import sliding_window_view

from sparsect.core import Image2D, Rng
from sparsect.metrics import MetricConfig, psnr, snr, ssim, ssim_map, write_metric_rows
from sparsect.phantom import head_sample, shepp_logan


def ssim_oracle(x, y, L, win=7, k1=0.01, k2=0.03):
    """SSIM map from explicit windows: sample statistics of each 7x7 neighbourhood."""
    r = win // 2
    xp = sliding_window_view(np.pad(x, r, mode="symmetric"), (win, win)).reshape(*x.shape, -1)
    yp = sliding_window_view(np.pad(y, r, mode="symmetric"), (win, win)).reshape(*y.shape, -1)
    mx, my = xp.mean(-1), yp.mean(-1)
    vx, vy = xp.var(-1, ddof=1), yp.var(-1, ddof=1)
    cxy = ((xp - mx[..., None]) * (yp - my[..., None])).sum(-1) / (win * win - 1)
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    return (2 * mx * my + c1) * (2 * cxy + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2))


def psnr_oracle(x, y, m, L):
    return 10 * np.log10(L**2 / np.mean((x[m] - y[m]) ** 2))


@pytest.fixture(scope="module")
def phantom():
    s = head_sample(128)
    return s.image, s.skull_mask.data


class TestSsim:
    def test_identity(self, phantom):
        img, mask = phantom
        assert ssim(img, img, mask) == 1.0

    def test_noisy_matches_oracle(self, phantom):
        img, mask = phantom
        noisy = img.data + 0.5 * Rng(1).uniform(-1, 1, img.shape)
        val = ssim(noisy, img, mask)
        assert val < 0.5
        oracle = ssim_oracle(noisy, img.data, 1.0)[mask].mean()
        assert val == pytest.approx(oracle, abs=1e-10)

    def test_map_matches_oracle(self):
        rng = Rng(2)
        x, y = rng.random((20, 23)), rng.random((20, 23))
        np.testing.assert_allclose(ssim_map(x, y), ssim_oracle(x, y, 1.0), atol=1e-10)

    def test_data_range_from_reference(self):
        rng = Rng(3)
        ref = Image2D(rng.random((16, 16)) * 80, (0.0, 80.0))
        x = ref.data + rng.normal((16, 16))
        mask = np.ones((16, 16), bool)
        expected = ssim_oracle(x, ref.data, 80.0).mean()
        assert ssim(x, ref, mask) == pytest.approx(expected, abs=1e-10)
        cfg = MetricConfig(data_range=80.0)
        assert ssim(x, ref.data, mask, cfg) == pytest.approx(expected, abs=1e-10)

    def test_window_config(self):
        rng = Rng(4)
        x, y = rng.random((12, 12)), rng.random((12, 12))
        cfg = MetricConfig(ssim_window=3)
        np.testing.assert_allclose(ssim_map(x, y, cfg), ssim_oracle(x, y, 1.0, win=3), atol=1e-10)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((4, 4)), np.zeros((4, 5)), np.ones((4, 4), bool))

    def test_empty_mask(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)), np.zeros((8, 8), bool))

    @pytest.mark.parametrize("kw", [{"ssim_window": 4}, {"ssim_window": 1}, {"K1": 0.0}, {"data_range": -1.0}])
    def test_bad_config(self, kw):
        with pytest.raises(ValueError):
            MetricConfig(**kw)

    def test_only_window_dilated_support_matters(self):
        rng = Rng(5)
        x, y = rng.random((32, 32)), rng.random((32, 32))
        mask = np.zeros((32, 32), bool)
        mask[12:18, 12:18] = True
        base = (ssim(x, y, mask), psnr(x, y, mask), snr(x, y, mask))
        x2, y2 = x.copy(), y.copy()
        # pixels more than 3 px away from the mask are outside every window touching it
        far = np.ones((32, 32), bool)
        far[9:21, 9:21] = False
        x2[far] = rng.random(far.sum())
        y2[far] = rng.random(far.sum())
        # uniform_filter uses running sums, so allow last-bit noise
        after = (ssim(x2, y2, mask), psnr(x2, y2, mask), snr(x2, y2, mask))
        np.testing.assert_allclose(after, base, rtol=1e-12, atol=0)
        x3 = x.copy()
        x3[10, 10] += 0.5  # inside the dilated support
        assert abs(ssim(x3, y, mask) - base[0]) > 1e-6


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32), h=st.integers(7, 24), w=st.integers(7, 24), scale=st.floats(0.01, 2.0))
def test_ssim_symmetric_and_bounded(seed, h, w, scale):
    rng = Rng(seed)
    x, y = rng.random((h, w)), rng.random((h, w)) * scale
    mask = rng.random((h, w)) < 0.5
    mask[0, 0] = True
    a, b = ssim(x, y, mask), ssim(y, x, mask)
    assert a == pytest.approx(b, abs=1e-12)
    assert -1.0 <= a <= 1.0


class TestPsnrSnr:
    def test_identity_sentinel(self):
        x = shepp_logan(32).data
        m = np.ones_like(x, bool)
        assert psnr(x, x, m) == math.inf
        assert snr(x, x, m) == math.inf

    def test_constant_error(self):
        ref = np.ones((8, 8))
        m = np.ones((8, 8), bool)
        assert psnr(ref + 0.1, ref, m) == pytest.approx(20.0, abs=1e-12)
        assert snr(ref + 0.1, ref, m) == pytest.approx(20.0, abs=1e-12)

    def test_matches_oracle(self):
        rng = Rng(32)
        x, y = rng.random((32, 32)), rng.random((32, 32))
        m = rng.random((32, 32)) < 0.7
        assert psnr(x, y, m) == pytest.approx(psnr_oracle(x, y, m, 1.0), abs=1e-12)

    def test_zero_reference_energy(self):
        with pytest.raises(ValueError):
            snr(np.ones((4, 4)), np.zeros((4, 4)), np.ones((4, 4), bool))

    def test_constant_shift(self):
        rng = Rng(6)
        x, y = rng.random((16, 16)), rng.random((16, 16)) + 0.5
        m = np.ones((16, 16), bool)
        c = 0.7
        assert psnr(x + c, y + c, m) == pytest.approx(psnr(x, y, m), abs=1e-9)
        shift = 10 * np.log10(np.sum((y + c) ** 2) / np.sum(y**2))
        assert snr(x + c, y + c, m) - snr(x, y, m) == pytest.approx(shift, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32), L=st.floats(0.5, 100.0))
def test_psnr_snr_identity(seed, L):
    rng = Rng(seed)
    ref = Image2D(rng.random((12, 12)) * L, (0.0, L))
    x = ref.data + rng.normal((12, 12))
    m = rng.random((12, 12)) < 0.6
    m[3, 3] = True
    gap = psnr(x, ref, m) - snr(x, ref, m)
    expected = 10 * np.log10(L**2 * m.sum() / np.sum(ref.data[m] ** 2))
    assert gap == pytest.approx(expected, abs=1e-9)


def test_metric_rows_csv(tmp_path):
    rows = [{"image_id": "a", "views": 64, "method": "fbp", "ssim": 0.5, "psnr": 20.0, "snr": math.inf}]
    path = write_metric_rows(rows, tmp_path / "m.csv")
    out = list(csv.reader(open(path)))
    assert out[0] == ["image_id", "views", "method", "ssim", "psnr", "snr"]
    assert out[1] == ["a", "64", "fbp", "0.5", "20.0", "inf"]
