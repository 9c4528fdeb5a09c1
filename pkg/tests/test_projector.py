import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsect.core import Rng
from sparsect.phantom import shepp_logan
from sparsect.projector import (
    ScanGeometry,
    Sinogram,
    load_sinogram,
    radon_forward,
    save_sinogram,
    subsample_views,
)


def antialiased_disk(n, radius, supersample=4):
    """Pixel coverage of a centred disk, estimated on a sub-pixel grid."""
    sub = (np.arange(n * supersample) + 0.5) / supersample - n / 2
    xx, yy = np.meshgrid(sub, sub)
    inside = (xx**2 + yy**2 <= radius**2).astype(float)
    return inside.reshape(n, supersample, n, supersample).mean(axis=(1, 3))


class TestGeometry:
    def test_angles(self):
        g = ScanGeometry(8, 5)
        np.testing.assert_allclose(g.angles, np.arange(8) * np.pi / 8)
        assert np.all(np.diff(g.angles) > 0) and g.angles[-1] < np.pi

    def test_offsets_centered(self):
        np.testing.assert_allclose(ScanGeometry(1, 4, 2.0).offsets, [-3, -1, 1, 3])

    @pytest.mark.parametrize("args", [(0, 4), (4, 0), (4, 4, 0.0)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            ScanGeometry(*args)

    def test_shape_check(self):
        with pytest.raises(ValueError):
            Sinogram(ScanGeometry(3, 4), np.zeros((4, 3)))


class TestRadon:
    def test_zero_image(self):
        s = radon_forward(np.zeros((32, 32)), ScanGeometry.for_image(32, 12))
        assert np.all(s.data == 0.0)

    def test_non_square(self):
        with pytest.raises(ValueError):
            radon_forward(np.zeros((32, 30)), ScanGeometry(4, 32))

    def test_disk_chord_lengths(self):
        n, r = 256, 100.0
        g = ScanGeometry.for_image(n, 12)
        sino = radon_forward(antialiased_disk(n, r), g).data
        s = g.offsets
        sel = np.abs(s) < 0.9 * r
        chord = 2 * np.sqrt(r**2 - s[sel] ** 2)
        rel = np.abs(sino[:, sel] - chord) / chord
        assert rel.max() < 0.02

    def test_mass_conservation(self):
        n = 256
        g = ScanGeometry.for_image(n, 90)
        sino = radon_forward(shepp_logan(n), g)
        mass = sino.data.sum(axis=1) * g.detector_spacing
        assert (mass.max() - mass.min()) / mass.mean() < 0.01
        # and the mass is the image integral
        assert mass.mean() == pytest.approx(shepp_logan(n).data.sum(), rel=0.01)

    def test_linearity(self):
        rng = Rng(7)
        x, y = rng.random((40, 40)), rng.random((40, 40))
        g = ScanGeometry.for_image(40, 16)
        lhs = radon_forward(2.5 * x - 0.75 * y, g).data
        rhs = 2.5 * radon_forward(x, g).data - 0.75 * radon_forward(y, g).data
        assert np.max(np.abs(lhs - rhs)) <= 1e-9 * np.max(np.abs(rhs))

    def test_symmetric_phantom_mirrors(self):
        # ellipse symmetric in x and y: P(pi - t, s) == P(t, s) == P(t, -s)
        n, views = 128, 64
        ii, jj = np.mgrid[0:n, 0:n]
        c = (n - 1) / 2
        img = ((((jj - c) / 40) ** 2 + ((ii - c) / 25) ** 2) <= 1).astype(float)
        p = radon_forward(img, ScanGeometry.for_image(n, views)).data
        tol = 1e-3 * p.max()
        assert np.max(np.abs(p - p[:, ::-1])) < tol
        mirrored = p[(views - np.arange(1, views)) % views]
        assert np.max(np.abs(p[1:] - mirrored)) < tol

    def test_detector_spacing_scales_offsets(self):
        r = 50.0
        g = ScanGeometry(4, 64, 2.0)
        sino = radon_forward(antialiased_disk(128, r), g).data
        s = g.offsets
        sel = np.abs(s) < 0.9 * r
        chord = 2 * np.sqrt(r**2 - s[sel] ** 2)
        assert np.max(np.abs(sino[:, sel] - chord) / chord) < 0.02


@pytest.fixture(scope="module")
def sino():
    return Sinogram(ScanGeometry(4096, 8), Rng(3).random((4096, 8)))


class TestSubsample:
    def test_identity(self, sino):
        out = subsample_views(sino, 4096)
        np.testing.assert_array_equal(out.data, sino.data)
        assert out.geometry == sino.geometry

    def test_stride(self, sino):
        out = subsample_views(sino, 512)
        np.testing.assert_array_equal(out.data, sino.data[8 * np.arange(512)])
        np.testing.assert_allclose(out.geometry.angles, sino.geometry.angles[::8], rtol=0, atol=1e-15)

    def test_composition(self, sino):
        twice = subsample_views(subsample_views(sino, 1024), 256)
        np.testing.assert_array_equal(twice.data, subsample_views(sino, 256).data)

    def test_non_divisor(self, sino):
        with pytest.raises(ValueError):
            subsample_views(sino, 3000)

    @settings(max_examples=20, deadline=None)
    @given(a=st.integers(0, 6), b=st.integers(0, 6))
    def test_composition_property(self, sino, a, b):
        hi, lo = 2 ** max(a, b) * 64, 2 ** min(a, b) * 64
        twice = subsample_views(subsample_views(sino, hi), lo)
        np.testing.assert_array_equal(twice.data, subsample_views(sino, lo).data)


def test_sinogram_file_round_trip(tmp_path):
    g = ScanGeometry(6, 5, 0.5)
    s = Sinogram(g, Rng(2).normal((6, 5)))
    save_sinogram(s, tmp_path / "s")
    back = load_sinogram(tmp_path / "s.f64")
    assert back.geometry == g
    assert back.data.tobytes() == s.data.tobytes()
