import json

import numpy as np
import pytest

from pseudoisp import camera
from pseudoisp import synthesis as S
from pseudoisp.pseudo_isp import PseudoIspModel, PseudoPair, TrainConfig, train_pseudoisp
from pseudoisp.scenes import make_scenes, smooth_scene


@pytest.fixture(scope="module")
def trained():
    p = camera.CameraProfile.default()
    shots = [camera.capture(p, s, i) for i, s in enumerate(make_scenes(2, 32, seed=0))]
    pairs = [PseudoPair(s.noisy_srgb, s.clean_srgb) for s in shots]
    cfg = TrainConfig(patch_size=16, batch=2, iters_stage1=10, iters_stage2=5, lr1=1e-3, lr2=1e-4, width=8, sharing_scope="set")
    return train_pseudoisp(pairs, cfg)[0]


@pytest.fixture(scope="module")
def identity_map():
    x = np.linspace(0.0, 1.0, 256 * 4).reshape(16, 16, 4)
    return S.fit_elementwise_map(x, x, iters=1500)


def _silence_noise(model):
    # softplus(-60) underflows to zero in float32
    model.noise_net.weights[-1].data[:] = 0.0
    model.noise_net.biases[-1].data[:] = -60.0
    return model


def test_zero_noise_synthesis_equals_clean_round_trip(trained, tmp_path):
    trained.save(tmp_path / "m.ckpt")
    m = _silence_noise(PseudoIspModel.load(tmp_path / "m.ckpt"))
    clean = smooth_scene(16, 2)
    pair = S.synthesize_noisy(m, clean, seed=4)
    np.testing.assert_allclose(pair.noisy, S.clean_round_trip(m, clean), atol=1e-6)


def test_noise_is_additive_in_packed_space(trained):
    clean = smooth_scene(16, 1)
    x, sigma, y = S.synthesize_packed(trained, clean, seed=9)
    n0 = np.random.default_rng(9).standard_normal(x.shape).astype(x.dtype)
    np.testing.assert_allclose(y - x, sigma * n0, atol=1e-6)
    assert (sigma >= 0).all()


def test_synthesis_seed_determinism(trained):
    clean = smooth_scene(16, 3)
    a = S.synthesize_noisy(trained, clean, seed=1)
    b = S.synthesize_noisy(trained, clean, seed=1)
    c = S.synthesize_noisy(trained, clean, seed=2)
    np.testing.assert_array_equal(a.noisy, b.noisy)
    assert not np.array_equal(a.noisy, c.noisy)
    assert a.noisy.min() >= 0 and a.noisy.max() <= 1


def test_synthesis_errors(trained, tmp_path):
    clean = smooth_scene(16, 0)
    fresh = PseudoIspModel(8, seed=0)
    with pytest.raises(ValueError, match="untrained"):
        S.synthesize_noisy(fresh, clean, seed=0)
    S.synthesize_noisy(fresh, clean, seed=0, allow_untrained=True)
    with pytest.raises(ValueError, match="even"):
        S.synthesize_noisy(trained, clean[:15], seed=0)
    trained.save(tmp_path / "m.ckpt")
    broken = PseudoIspModel.load(tmp_path / "m.ckpt")
    broken.raw2srgb.weights[0].data[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        S.synthesize_noisy(broken, clean, seed=0)


def test_pack_mosaic_example():
    out = S.pack_mosaic(np.array([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out, [[[1.0, 2.0, 3.0, 4.0]]])
    with pytest.raises(ValueError):
        S.pack_mosaic(np.zeros((2, 2, 1)))


def test_identity_map_fit(identity_map):
    x = np.random.default_rng(0).uniform(0.05, 0.95, (8, 8, 4))
    assert np.abs(identity_map.f(x) - x).max() < 0.01
    assert np.abs(identity_map.f_inv(x) - x).max() < 0.01
    # relu kinks make f' piecewise constant, so judge the typical slope
    slope_err = np.abs(identity_map.derivative(x) - 1.0)
    assert np.median(slope_err) < 0.05 and np.mean(slope_err) < 0.1
    q = S.map_fit_quality(identity_map, x, x)
    assert q["psnr_f"] > 40 and q["psnr_round_trip"] > 40


def test_map_fit_rejects_misaligned():
    with pytest.raises(ValueError):
        S.fit_elementwise_map(np.zeros((4, 4, 4)), np.zeros((4, 6, 4)), iters=1)
    with pytest.raises(ValueError):
        S.fit_elementwise_map(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), iters=1)


def test_identity_map_h_is_the_camera_nlf(identity_map, trained):
    # with f = id the predicted level is the raw NLF itself
    p = camera.CameraProfile.default()
    clean = [smooth_scene(64, s) for s in range(3)]
    rows = S.noise_level_comparison(p, identity_map, trained, clean, min_count=50)
    assert rows
    for r in rows:
        lo = float(p.nlf_std(np.full(4, r["lo"]), S.PACKED_TO_COLOR)[r["channel"]])
        hi = float(p.nlf_std(np.full(4, r["hi"]), S.PACKED_TO_COLOR)[r["channel"]])
        assert 0.9 * lo <= r["h"] <= 1.1 * hi


def test_verification_report_json(identity_map, trained, tmp_path):
    p = camera.CameraProfile.default()
    shot = camera.capture(p, smooth_scene(32, 0), 0)
    rep = S.verify_taylor_noise_model(
        p, identity_map, trained, [smooth_scene(64, 1)], heldout=[dict(gt_raw=shot.noisy_raw, noisy_srgb=shot.noisy_srgb)]
    )
    rep.save(tmp_path / "r" / "report.json")
    d = json.loads((tmp_path / "r" / "report.json").read_text())
    assert set(d["passed"]) == {"nlf_max_rel_err", "nlf_median_rel_err", "psnr_f", "psnr_round_trip", "psnr_srgb"}
    assert len(d["map_quality"]) == 1 and len(d["srgb_psnr"]) == 1
    assert d["thresholds"] == S.DEFAULT_THRESHOLDS
    assert all(abs(r["rel_err"] - abs(r["sigma_hat"] - r["h"]) / r["h"]) < 1e-12 for r in d["bins"])
