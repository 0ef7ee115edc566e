"""Ground-truth synthetic camera.

Clean rawRGB mosaics are produced by inverting a known ISP on a scene,
corrupted with heteroscedastic Gaussian noise (variance ``a*x + b`` per
colour channel) and developed back to sRGB with bilinear demosaicking,
a 3x3 colour mix and a per-channel power-law tone curve.  All hidden
quantities (clean raws, the NLF, the ISP) stay available for verification.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import imageio
from .tensor import checkpoint

SCHEMA_VERSION = 1

# RGGB: (row parity, col parity) -> colour channel
_RGGB_SITES = {(0, 0): 0, (0, 1): 1, (1, 0): 1, (1, 1): 2}

_KERNEL_G = np.array([[0, 1, 0], [1, 4, 1], [0, 1, 0]], dtype=np.float64) / 4.0
_KERNEL_RB = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64) / 4.0


def _vec3(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(3, float(arr))
    if arr.shape != (3,):
        raise ValueError(f"expected 3 per-channel values, got shape {arr.shape}")
    return arr


@dataclass
class CameraProfile:
    raw_nlf_a: np.ndarray
    raw_nlf_b: np.ndarray
    tone_gamma: np.ndarray
    channel_gain: np.ndarray
    color_mix: np.ndarray
    bayer_pattern: str = "RGGB"
    seed: int = 0

    def __post_init__(self):
        self.raw_nlf_a = _vec3(self.raw_nlf_a)
        self.raw_nlf_b = _vec3(self.raw_nlf_b)
        self.tone_gamma = _vec3(self.tone_gamma)
        self.channel_gain = _vec3(self.channel_gain)
        self.color_mix = np.asarray(self.color_mix, dtype=np.float64)
        if self.bayer_pattern != "RGGB":
            raise ValueError(f"only the RGGB pattern is supported, got {self.bayer_pattern!r}")
        if (self.raw_nlf_a < 0).any() or (self.raw_nlf_b < 0).any():
            raise ValueError("NLF coefficients must be non-negative")
        if (self.tone_gamma <= 0).any():
            raise ValueError("tone_gamma must be positive")
        if (self.channel_gain <= 0).any():
            raise ValueError("channel_gain must be positive")
        if self.color_mix.shape != (3, 3):
            raise ValueError(f"color_mix must be 3x3, got {self.color_mix.shape}")
        if (np.diag(self.color_mix) <= 0).any():
            raise ValueError("color_mix needs a positive diagonal")
        cond = np.linalg.cond(self.color_mix)
        if not np.isfinite(cond) or cond > 100:
            raise ValueError(f"color_mix is ill-conditioned (cond={cond:.3g})")

    @classmethod
    def identity(cls, a=0.0, b=0.0) -> "CameraProfile":
        return cls(a, b, 1.0, 1.0, np.eye(3))

    @classmethod
    def default(cls, a=0.02, b=1e-3, gamma=1 / 2.2, seed: int = 0) -> "CameraProfile":
        """The repo's benchmark camera: mild cross-talk, gain below one for headroom."""
        mix = np.array([[0.80, 0.15, 0.05], [0.10, 0.80, 0.10], [0.05, 0.15, 0.80]])
        return cls(a, b, gamma, [0.82, 0.80, 0.78], mix, seed=seed)

    @classmethod
    def elementwise(cls, a=0.02, b=1e-3, gamma=1 / 2.2, gain: float = 0.8, seed: int = 0) -> "CameraProfile":
        """No colour mixing: every developed pixel is a scalar function of its own raw sample."""
        return cls(a, b, gamma, gain, np.eye(3), seed=seed)

    @classmethod
    def random(cls, seed: int) -> "CameraProfile":
        rng = np.random.default_rng(seed)
        gamma = 1.0 / rng.uniform(1.8, 2.4, size=3)
        a = np.exp(rng.uniform(np.log(1e-3), np.log(5e-2)))
        b = np.exp(rng.uniform(np.log(1e-5), np.log(1e-3)))
        off = rng.uniform(0.0, 0.12, size=(3, 3))
        np.fill_diagonal(off, 0.0)
        mix = np.eye(3) * (1.0 - off.sum(axis=1, keepdims=True)) + off
        gain = rng.uniform(0.75, 0.9, size=3)
        return cls(a * rng.uniform(0.8, 1.2, 3), b * rng.uniform(0.8, 1.2, 3), gamma, gain, mix, seed=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, np.ndarray):
                d[k] = v.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CameraProfile":
        return cls(**d)

    # -- per-pixel helpers --------------------------------------------------
    def tone(self, lin: np.ndarray) -> np.ndarray:
        """gain * x**gamma per channel, odd-extended below zero (unclipped)."""
        return self.channel_gain * np.sign(lin) * np.abs(lin) ** self.tone_gamma

    def inverse_tone(self, srgb: np.ndarray) -> np.ndarray:
        return np.sign(srgb) * (np.abs(srgb) / self.channel_gain) ** (1.0 / self.tone_gamma)

    def nlf_std(self, x: np.ndarray, channel: np.ndarray | int) -> np.ndarray:
        """Ground-truth noise standard deviation sqrt(a*x + b) for colour channel(s)."""
        a = self.raw_nlf_a[channel]
        b = self.raw_nlf_b[channel]
        return np.sqrt(np.maximum(a * x + b, 0.0))


@dataclass
class RawImage:
    data: np.ndarray
    pattern: str = "RGGB"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError(f"raw mosaic must be 2-D, got shape {self.data.shape}")
        H, W = self.data.shape
        if H % 2 or W % 2:
            raise ValueError(f"raw mosaic dims must be even, got {H}x{W}")
        if not np.isfinite(self.data).all():
            raise ValueError("raw mosaic contains non-finite values")


def bayer_channels(height: int, width: int) -> np.ndarray:
    """Colour channel index (0=R, 1=G, 2=B) of every RGGB site."""
    ch = np.empty((height, width), dtype=np.int64)
    for (r, c), k in _RGGB_SITES.items():
        ch[r::2, c::2] = k
    return ch


def mosaic(rgb: np.ndarray) -> np.ndarray:
    H, W, _ = rgb.shape
    ch = bayer_channels(H, W)
    return np.take_along_axis(rgb, ch[..., None], axis=2)[..., 0]


def demosaic_bilinear(raw: np.ndarray) -> np.ndarray:
    H, W = raw.shape
    ch = bayer_channels(H, W)
    out = np.empty((H, W, 3), dtype=np.float64)
    for c, kern in ((0, _KERNEL_RB), (1, _KERNEL_G), (2, _KERNEL_RB)):
        masked = np.where(ch == c, raw, 0.0)
        # 'mirror' reflection keeps Bayer parity at the borders
        out[..., c] = ndimage.convolve(masked, kern, mode="mirror")
    return out


def _check_even(img: np.ndarray) -> None:
    if img.shape[0] % 2 or img.shape[1] % 2:
        raise ValueError(f"image dims must be even, got {img.shape[0]}x{img.shape[1]}")


def render_clean_raw(profile: CameraProfile, scene: np.ndarray) -> RawImage:
    """Invert the known ISP on a scene and sample it with the RGGB mosaic."""
    scene = np.asarray(scene, dtype=np.float64)
    if scene.ndim != 3 or scene.shape[2] != 3:
        raise ValueError(f"scene must be HxWx3, got shape {scene.shape}")
    _check_even(scene)
    lin = profile.inverse_tone(np.clip(scene, 0.0, 1.0))
    raw_rgb = lin @ np.linalg.inv(profile.color_mix).T
    return RawImage(mosaic(np.clip(raw_rgb, 0.0, 1.0)))


def add_raw_noise(profile: CameraProfile, clean: RawImage, rng_seed: int) -> RawImage:
    """y = x + sqrt(a*x + b) * n0, i.i.d. standard normal n0; no clipping."""
    x = clean.data
    ch = bayer_channels(*x.shape)
    rng = np.random.default_rng(rng_seed)
    n0 = rng.standard_normal(x.shape)
    return RawImage(x + profile.nlf_std(x, ch) * n0)


def develop(profile: CameraProfile, raw: RawImage) -> np.ndarray:
    """Bilinear demosaic, colour mix, tone curve, clip to [0, 1]."""
    dem = demosaic_bilinear(raw.data)
    lin = dem @ profile.color_mix.T
    return np.clip(profile.tone(lin), 0.0, 1.0)


@dataclass
class SimulatedShot:
    """One scene captured by the simulator, with every hidden intermediate."""

    clean_raw: np.ndarray
    noisy_raw: np.ndarray
    clean_srgb: np.ndarray
    noisy_srgb: np.ndarray


def capture(profile: CameraProfile, scene: np.ndarray, seed: int) -> SimulatedShot:
    clean = render_clean_raw(profile, scene)
    noisy = add_raw_noise(profile, clean, seed)
    return SimulatedShot(clean.data, noisy.data, develop(profile, clean), develop(profile, noisy))


@dataclass
class DatasetManifest:
    seed: int
    profile: dict
    entries: list[dict] = field(default_factory=list)
    oracle: str = "oracle.ckpt"
    schema_version: int = SCHEMA_VERSION

    def role(self, role: str) -> list[dict]:
        return [e for e in self.entries if e["role"] == role]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported manifest schema {d.get('schema_version')!r}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_json(Path(path).read_text())


def generate_dataset(
    profile: CameraProfile,
    scenes: list[np.ndarray],
    out_dir,
    seed: int = 0,
    n_noisy: int | None = None,
) -> DatasetManifest:
    """Write a noisy sRGB set, a disjoint clean sRGB set and a hidden oracle.

    The first ``n_noisy`` scenes (default: half) are captured with noise;
    the rest are developed noise-free and form the unpaired clean set.
    """
    if len(scenes) < 2:
        raise ValueError("need at least two scenes (one noisy, one clean)")
    n_noisy = len(scenes) // 2 if n_noisy is None else n_noisy
    if not 1 <= n_noisy < len(scenes):
        raise ValueError(f"n_noisy={n_noisy} leaves an empty set for {len(scenes)} scenes")
    out = Path(out_dir)
    for sub in ("noisy", "clean"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    seeds = np.random.SeedSequence(seed).generate_state(len(scenes))
    manifest = DatasetManifest(seed=seed, profile=profile.to_dict())
    oracle: dict[str, np.ndarray] = {}
    for idx, scene in enumerate(scenes):
        if idx < n_noisy:
            shot = capture(profile, scene, int(seeds[idx]))
            eid = f"noisy-{idx:03d}"
            rel = f"noisy/{eid}.png"
            imageio.write_png(out / rel, shot.noisy_srgb, bits=16)
            oracle[f"{eid}/clean_raw"] = shot.clean_raw
            oracle[f"{eid}/noisy_raw"] = shot.noisy_raw
            oracle[f"{eid}/clean_srgb"] = shot.clean_srgb
            manifest.entries.append({"id": eid, "role": "noisy", "path": rel, "scene": idx, "seed": int(seeds[idx])})
        else:
            clean = develop(profile, render_clean_raw(profile, scene))
            eid = f"clean-{idx:03d}"
            rel = f"clean/{eid}.png"
            imageio.write_png(out / rel, clean, bits=16)
            manifest.entries.append({"id": eid, "role": "clean", "path": rel, "scene": idx, "seed": None})
    checkpoint.save(out / manifest.oracle, oracle, meta={"profile": profile.to_dict(), "seed": seed})
    manifest.entries.append({"id": "oracle", "role": "oracle", "path": manifest.oracle, "scene": None, "seed": seed})
    try:
        (out / "manifest.json").write_text(manifest.to_json())
    except OSError as exc:
        raise OSError(f"cannot write manifest under {out}: {exc}") from exc
    return manifest
