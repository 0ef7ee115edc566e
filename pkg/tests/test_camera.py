import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pseudoisp import camera
from pseudoisp.camera import CameraProfile, RawImage, add_raw_noise, develop, render_clean_raw
from pseudoisp.metrics import psnr
from pseudoisp.scenes import KINDS, make_scenes, smooth_scene


def test_identity_profile_gray_scene():
    raw = render_clean_raw(CameraProfile.identity(), np.full((4, 6, 3), 0.5))
    np.testing.assert_allclose(raw.data, 0.5, atol=1e-15)


def test_pure_red_only_at_r_sites():
    scene = np.zeros((4, 4, 3))
    scene[..., 0] = 0.7
    raw = render_clean_raw(CameraProfile.identity(), scene).data
    mask = np.zeros((4, 4), bool)
    mask[0::2, 0::2] = True
    assert (raw[mask] > 0).all()
    assert not raw[~mask].any()


def test_render_rejects_odd_dims():
    with pytest.raises(ValueError):
        render_clean_raw(CameraProfile.default(), np.zeros((5, 4, 3)))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_round_trip_smooth_scene(seed):
    p = CameraProfile.default()
    scene = smooth_scene(64, seed)
    out = develop(p, render_clean_raw(p, scene))
    assert psnr(out[2:-2, 2:-2], scene[2:-2, 2:-2]) > 45


def test_round_trip_random_profiles():
    for seed in range(3):
        p = CameraProfile.random(seed)
        scene = smooth_scene(64, seed) * 0.8
        out = develop(p, render_clean_raw(p, scene))
        assert psnr(out[2:-2, 2:-2], scene[2:-2, 2:-2]) > 45


def test_zero_nlf_noise_is_identity():
    clean = RawImage(np.random.default_rng(0).uniform(0, 1, (8, 8)))
    np.testing.assert_array_equal(add_raw_noise(CameraProfile.identity(0, 0), clean, 3).data, clean.data)


def test_noise_std_monte_carlo():
    clean = RawImage(np.full((1000, 1000), 0.25))
    noisy = add_raw_noise(CameraProfile.identity(0.01, 0.0004), clean, 11).data
    resid = noisy - 0.25
    assert np.std(resid) == pytest.approx(np.sqrt(0.0029), rel=0.005)
    assert abs(resid.mean()) < 3 * np.sqrt(0.0029) / 1000
    h = np.corrcoef(resid[:, :-1].ravel(), resid[:, 1:].ravel())[0, 1]
    v = np.corrcoef(resid[:-1].ravel(), resid[1:].ravel())[0, 1]
    assert abs(h) < 0.01 and abs(v) < 0.01


def test_noise_is_per_channel():
    p = CameraProfile(np.array([0.0, 0.01, 0.04]), 1e-4, 1.0, 1.0, np.eye(3))
    clean = RawImage(np.full((400, 400), 0.5))
    r = add_raw_noise(p, clean, 0).data - 0.5
    ch = camera.bayer_channels(400, 400)
    for c, a in enumerate([0.0, 0.01, 0.04]):
        assert np.std(r[ch == c]) == pytest.approx(np.sqrt(a * 0.5 + 1e-4), rel=0.02)


def test_develop_examples():
    ident = CameraProfile.identity()
    np.testing.assert_allclose(develop(ident, RawImage(np.full((6, 6), 0.5))), 0.5, atol=1e-15)
    g = CameraProfile(0, 0, 1 / 2.2, 1.0, np.eye(3))
    np.testing.assert_allclose(develop(g, RawImage(np.full((6, 6), 0.25))), 0.25 ** (1 / 2.2), atol=1e-12)
    assert 0.25 ** (1 / 2.2) == pytest.approx(0.5326, abs=1e-4)


@given(st.integers(0, 10_000))
def test_develop_monotone(seed):
    rng = np.random.default_rng(seed)
    p = CameraProfile(0, 0, 1 / 2.2, [0.9, 0.8, 0.85], np.eye(3))
    base = rng.uniform(0, 1, (8, 8))
    bump = base + rng.uniform(0, 0.2, (8, 8))
    assert (develop(p, RawImage(bump)) >= develop(p, RawImage(base)) - 1e-12).all()


def test_tone_inverse_identity():
    p = CameraProfile.random(3)
    x = np.linspace(0.01, 1, 1000)[:, None] * np.ones(3)
    np.testing.assert_allclose(p.inverse_tone(p.tone(x)), x, atol=1e-6)
    np.testing.assert_allclose(p.tone(p.inverse_tone(x)), x, atol=1e-6)


def test_profile_validation():
    with pytest.raises(ValueError):
        CameraProfile(-1, 0, 1, 1, np.eye(3))
    with pytest.raises(ValueError):
        CameraProfile(0, 0, 0, 1, np.eye(3))
    with pytest.raises(ValueError):
        CameraProfile(0, 0, 1, 1, [[1, 1, 0], [1, 1, 0], [0, 0, 1]])
    p = CameraProfile.random(7)
    assert CameraProfile.from_dict(json.loads(json.dumps(p.to_dict()))).to_dict() == p.to_dict()
    for seed in range(20):
        q = CameraProfile.random(seed)
        assert (q.tone_gamma >= 1 / 2.4).all() and (q.tone_gamma <= 1 / 1.8).all()
        assert (q.raw_nlf_a <= 5e-2 * 1.2).all() and (q.raw_nlf_b > 0).all()


def test_raw_image_invariants():
    with pytest.raises(ValueError):
        RawImage(np.zeros((3, 4)))
    with pytest.raises(ValueError):
        RawImage(np.array([[np.nan, 0], [0, 0]]))


def test_generate_dataset_partition_and_determinism(tmp_path):
    p = CameraProfile.default()
    sc = make_scenes(2, 32, seed=1)
    m = camera.generate_dataset(p, sc, tmp_path / "a", seed=5)
    assert len(m.role("noisy")) == 1 and len(m.role("clean")) == 1
    assert m.role("noisy")[0]["scene"] != m.role("clean")[0]["scene"]
    camera.generate_dataset(p, sc, tmp_path / "b", seed=5)
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
    loaded = camera.DatasetManifest.load(tmp_path / "a" / "manifest.json")
    assert loaded.to_json() == m.to_json()


def test_generate_dataset_errors(tmp_path):
    with pytest.raises(ValueError):
        camera.generate_dataset(CameraProfile.default(), make_scenes(1, 16), tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        camera.generate_dataset(CameraProfile.default(), make_scenes(2, 16), blocker / "sub")


def test_srgb_noise_spatially_correlated():
    p = CameraProfile.default()
    shots = [camera.capture(p, s, i) for i, s in enumerate(make_scenes(4, 64, seed=2))]
    corrs = []
    for s in shots:
        r = s.noisy_srgb - s.clean_srgb
        corrs.append(np.corrcoef(r[:, :-1].ravel(), r[:, 1:].ravel())[0, 1])
    assert np.mean(corrs) > 0.1


def test_scenes_deterministic_and_in_range():
    a = make_scenes(len(KINDS), 32, seed=3)
    b = make_scenes(len(KINDS), 32, seed=3)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
        assert x.min() >= 0.03 - 1e-12 and x.max() <= 0.74 + 1e-12
