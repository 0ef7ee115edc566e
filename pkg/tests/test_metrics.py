import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pseudoisp.metrics import PSNR_CAP, psnr, ssim

RNG = np.random.default_rng(3)


def test_psnr_identical_is_capped():
    x = RNG.uniform(0, 1, (8, 8, 3))
    assert psnr(x, x) == PSNR_CAP


def test_psnr_closed_form():
    a = np.zeros((10, 10))
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    assert psnr(a, a + 0.01) == pytest.approx(40.0)
    assert psnr(a, a + 0.2, peak=2.0) == pytest.approx(20.0)


def test_psnr_reference_formula():
    a, b = RNG.uniform(0, 1, (2, 16, 16, 3))
    assert psnr(a, b) == pytest.approx(-10 * np.log10(np.mean((a - b) ** 2)), rel=1e-12)


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_ssim_identity():
    x = RNG.uniform(0, 1, (32, 32, 3))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_images_closed_form():
    # variances vanish, so SSIM reduces to the luminance term
    mu, nu, c1 = 0.3, 0.6, 0.01**2
    got = ssim(np.full((20, 20), mu), np.full((20, 20), nu))
    assert got == pytest.approx((2 * mu * nu + c1) / (mu**2 + nu**2 + c1), rel=1e-9)


@given(st.integers(0, 10_000))
def test_ssim_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(0, 1, (2, 16, 16))
    s = ssim(a, b)
    assert s == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1.0 <= s <= 1.0


def test_ssim_decreases_with_noise():
    x = np.tile(np.linspace(0, 1, 32), (32, 1))
    noise = np.random.default_rng(0).standard_normal(x.shape)
    vals = [ssim(x, x + s * noise) for s in (0.01, 0.05, 0.2)]
    assert vals[0] > vals[1] > vals[2]


def test_ssim_matches_scikit_image():
    metrics = pytest.importorskip("skimage.metrics")
    a = RNG.uniform(0, 1, (40, 40, 3))
    b = np.clip(a + 0.1 * RNG.standard_normal(a.shape), 0, 1)
    ref = metrics.structural_similarity(
        a, b, data_range=1.0, channel_axis=-1, gaussian_weights=True, sigma=1.5, use_sample_covariance=False
    )
    assert ssim(a, b) == pytest.approx(ref, abs=1e-6)


def test_ssim_errors():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))
    with pytest.raises(ValueError):
        ssim(np.zeros((16, 16)), np.zeros((16, 17)))
