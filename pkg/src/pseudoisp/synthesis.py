"""Synthetic noisy images from a trained Pseudo-ISP, and empirical checks
that the pseudo raw space behaves like an element-wise warp of the true raw
space with a matching noise level function."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import imageio
from .camera import CameraProfile
from .metrics import psnr
from .pseudo_isp import PseudoIspModel, from_batch, to_batch
from .tensor import Adam, ConvStack, Tensor, checkpoint, mse_loss, no_grad, space_to_depth

# packed [R, G1, G2, B] -> camera colour channel
PACKED_TO_COLOR = np.array([0, 1, 1, 2])


@dataclass
class SyntheticPair:
    clean: np.ndarray
    noisy: np.ndarray
    model_id: str = ""
    seed: int = 0


def _require_usable(model: PseudoIspModel, allow_untrained: bool) -> None:
    if not model.is_finite():
        raise ValueError("Pseudo-ISP model has non-finite parameters")
    if not allow_untrained and model.meta.get("trained_iters", 0) <= 0:
        raise ValueError("Pseudo-ISP model is untrained; train it first or pass allow_untrained=True")


def synthesize_packed(model: PseudoIspModel, clean: np.ndarray, seed: int, noise_scale: float = 1.0):
    """Clean packed pseudo raw, predicted sigma and the noisy packed raw (NCHW arrays)."""
    rng = np.random.default_rng(seed)
    with no_grad():
        x_pack = model.to_packed(clean).data
        sigma = model.estimate_sigma(Tensor(x_pack)).data
    n0 = rng.standard_normal(x_pack.shape).astype(x_pack.dtype)
    y_pack = x_pack + sigma * n0 * x_pack.dtype.type(noise_scale)
    return x_pack, sigma, y_pack


def synthesize_noisy(
    model: PseudoIspModel,
    clean: np.ndarray,
    seed: int,
    model_id: str = "",
    allow_untrained: bool = False,
) -> SyntheticPair:
    """clean -> sRGB2Raw -> CFA -> pack -> + sigma_hat * n0 -> Raw2sRGB -> PSU -> clip."""
    clean = np.asarray(clean, dtype=np.float32)
    if clean.shape[0] % 2 or clean.shape[1] % 2:
        raise ValueError(f"image dims must be even, got {clean.shape[:2]}")
    _require_usable(model, allow_untrained)
    _, _, y_pack = synthesize_packed(model, clean, seed)
    with no_grad():
        noisy = from_batch(model.raw_to_srgb(Tensor(y_pack)))
    return SyntheticPair(clean, np.clip(noisy, 0.0, 1.0), model_id, seed)


def clean_round_trip(model: PseudoIspModel, clean: np.ndarray) -> np.ndarray:
    with no_grad():
        return np.clip(from_batch(model.round_trip(np.asarray(clean, np.float32))), 0.0, 1.0)


# ---------------------------------------------------------------------------
# Element-wise map between true and pseudo raw
# ---------------------------------------------------------------------------


def pack_mosaic(raw: np.ndarray) -> np.ndarray:
    """HxW RGGB mosaic -> (H/2)x(W/2)x4 packed array."""
    raw = np.asarray(raw)
    if raw.ndim != 2:
        raise ValueError(f"expected a 2-D mosaic, got shape {raw.shape}")
    with no_grad():
        return from_batch(space_to_depth(Tensor(raw[None, None]), 2))


@dataclass
class ElementwiseMap:
    """Per-channel scalar maps f (true raw -> pseudo raw) and its inverse,
    each four grouped 1x1 layers of width 32."""

    forward_net: ConvStack
    inverse_net: ConvStack
    history: dict = field(default_factory=dict)

    @classmethod
    def create(cls, seed: int = 0, width: int = 32, dtype=np.float64) -> "ElementwiseMap":
        rng = np.random.default_rng(seed)
        chans = [4, width, width, width, 4]
        return cls(
            ConvStack(chans, 1, rng, groups=4, dtype=dtype, name="f"),
            ConvStack(chans, 1, rng, groups=4, dtype=dtype, name="f_inv"),
        )

    def _apply(self, net: ConvStack, packed: np.ndarray) -> np.ndarray:
        with no_grad():
            out = net(to_batch(packed, dtype=net.weights[0].dtype))
        return from_batch(out)

    def f(self, packed: np.ndarray) -> np.ndarray:
        return self._apply(self.forward_net, packed)

    def f_inv(self, packed: np.ndarray) -> np.ndarray:
        return self._apply(self.inverse_net, packed)

    def derivative(self, packed: np.ndarray, step: float = 1e-3) -> np.ndarray:
        """Central-difference f'(x), channel by channel."""
        return (self.f(packed + step) - self.f(packed - step)) / (2.0 * step)

    def save(self, path) -> None:
        arrays = {**self.forward_net.state_dict(), **self.inverse_net.state_dict()}
        checkpoint.save(path, arrays, {"kind": "elementwise_map", "width": self.forward_net.channels[1]})


def _fit(net: ConvStack, x: np.ndarray, y: np.ndarray, iters: int, lr: float) -> list[float]:
    xt = to_batch(x, dtype=net.weights[0].dtype)
    yt = to_batch(y, dtype=net.weights[0].dtype)
    opt = Adam(net.parameters(), lr=lr)
    hist = []
    for it in range(iters):
        opt.lr = lr if it < iters * 2 // 3 else lr * 0.1
        loss = mse_loss(net(xt), yt)
        opt.zero_grad()
        loss.backward()
        opt.step()
        hist.append(loss.item())
    return hist


def fit_elementwise_map(
    gt_packed: np.ndarray,
    pseudo_packed: np.ndarray,
    iters: int = 3000,
    lr: float = 3e-3,
    seed: int = 0,
) -> ElementwiseMap:
    """Fit f: true noisy raw -> pseudo noisy raw and f^-1 on one aligned patch.

    Both inputs are (h, w, 4) packed arrays of the same noisy capture.
    """
    gt_packed = np.asarray(gt_packed, dtype=np.float64)
    pseudo_packed = np.asarray(pseudo_packed, dtype=np.float64)
    if gt_packed.shape != pseudo_packed.shape or gt_packed.shape[-1] != 4:
        raise ValueError(f"misaligned packed patches: {gt_packed.shape} vs {pseudo_packed.shape}")
    emap = ElementwiseMap.create(seed)
    emap.history["f"] = _fit(emap.forward_net, gt_packed, pseudo_packed, iters, lr)
    emap.history["f_inv"] = _fit(emap.inverse_net, pseudo_packed, gt_packed, iters, lr)
    return emap


def map_fit_quality(emap: ElementwiseMap, gt_packed: np.ndarray, pseudo_packed: np.ndarray) -> dict:
    """PSNRs of f(Y_gt) vs Y_pseudo and of f^-1(f(Y_gt)) vs Y_gt on one patch."""
    f_gt = emap.f(gt_packed)
    return {
        "psnr_f": psnr(f_gt, pseudo_packed),
        "psnr_inverse": psnr(emap.f_inv(pseudo_packed), gt_packed),
        "psnr_round_trip": psnr(emap.f_inv(f_gt), gt_packed),
    }


# ---------------------------------------------------------------------------
# Taylor noise-model verification
# ---------------------------------------------------------------------------


@dataclass
class VerificationReport:
    bin_edges: list[float]
    bins: list[dict]
    median_rel_err: float
    max_rel_err: float
    map_quality: list[dict]
    srgb_psnr: list[float]
    thresholds: dict
    passed: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())


DEFAULT_THRESHOLDS = {
    "nlf_max_rel_err": 0.10,
    "nlf_median_rel_err": 0.20,
    "psnr_f": 35.0,
    "psnr_round_trip": 40.0,
    "psnr_srgb": 30.0,
}


def noise_level_comparison(
    profile: CameraProfile,
    emap: ElementwiseMap,
    model: PseudoIspModel,
    clean_images: list[np.ndarray],
    bin_edges=tuple(np.round(np.linspace(0.1, 0.9, 9), 6)),
    min_count: int = 200,
    step: float = 1e-3,
) -> list[dict]:
    """Bin sigma_hat(X_raw) and h(X_raw) = f'(f^-1(X_raw)) * g(f^-1(X_raw)).

    Bins are over the recovered true-raw intensity f^-1(X_raw), per packed
    channel; bins with fewer than ``min_count`` pixels are dropped.
    """
    us, sig, hs = [], [], []
    for img in clean_images:
        with no_grad():
            x_pack = model.to_packed(np.asarray(img, np.float32))
            sigma = from_batch(model.estimate_sigma(x_pack))
        x_pack = from_batch(x_pack).astype(np.float64)
        u = emap.f_inv(x_pack)
        g = profile.nlf_std(np.maximum(u, 0.0), PACKED_TO_COLOR)
        h = emap.derivative(u, step) * g
        us.append(u.reshape(-1, 4))
        sig.append(sigma.reshape(-1, 4))
        hs.append(h.reshape(-1, 4))
    u, sig, h = (np.concatenate(a) for a in (us, sig, hs))
    rows = []
    for c in range(4):
        for lo, hi in zip(bin_edges[:-1], bin_edges[1:]):
            sel = (u[:, c] >= lo) & (u[:, c] < hi)
            n = int(sel.sum())
            if n < min_count:
                continue
            s_mean = float(sig[sel, c].mean())
            h_mean = float(np.abs(h[sel, c]).mean())
            rows.append(
                {
                    "channel": int(c),
                    "lo": float(lo),
                    "hi": float(hi),
                    "count": n,
                    "sigma_hat": s_mean,
                    "h": h_mean,
                    "rel_err": abs(s_mean - h_mean) / h_mean,
                }
            )
    return rows


def verify_taylor_noise_model(
    profile: CameraProfile,
    emap: ElementwiseMap,
    model: PseudoIspModel,
    clean_images: list[np.ndarray],
    heldout: list[dict] | None = None,
    thresholds: dict | None = None,
    bin_edges=tuple(np.round(np.linspace(0.1, 0.9, 9), 6)),
    min_count: int = 200,
) -> VerificationReport:
    """Compare the learned noise level with the first-order prediction h.

    ``heldout`` holds patches unseen by the map fit, each a dict with
    ``gt_raw`` (true noisy mosaic), ``noisy_srgb`` (its developed image).
    For each one the report records the element-wise map quality and
    PSNR(Raw2sRGB(Y_raw), developed true noisy raw).
    """
    thr = {**DEFAULT_THRESHOLDS, **(thresholds or {})}
    rows = noise_level_comparison(profile, emap, model, clean_images, bin_edges, min_count)
    errs = [r["rel_err"] for r in rows]
    quality, srgb = [], []
    for patch in heldout or []:
        y_pseudo = infer_noisy_packed(model, patch["noisy_srgb"])
        quality.append(map_fit_quality(emap, pack_mosaic(patch["gt_raw"]), y_pseudo))
        with no_grad():
            rec = from_batch(model.raw_to_srgb(to_batch(y_pseudo)))
        srgb.append(psnr(np.clip(rec, 0, 1), patch["noisy_srgb"]))
    med = float(np.median(errs)) if errs else float("nan")
    mx = float(np.max(errs)) if errs else float("nan")
    passed = {
        "nlf_max_rel_err": bool(errs) and mx < thr["nlf_max_rel_err"],
        "nlf_median_rel_err": bool(errs) and med < thr["nlf_median_rel_err"],
    }
    if quality:
        passed["psnr_f"] = all(q["psnr_f"] > thr["psnr_f"] for q in quality)
        passed["psnr_round_trip"] = all(q["psnr_round_trip"] > thr["psnr_round_trip"] for q in quality)
        passed["psnr_srgb"] = all(p > thr["psnr_srgb"] for p in srgb)
    return VerificationReport(list(map(float, bin_edges)), rows, med, mx, quality, srgb, thr, passed)


def infer_noisy_packed(model: PseudoIspModel, noisy_srgb: np.ndarray) -> np.ndarray:
    with no_grad():
        return from_batch(model.to_packed(np.asarray(noisy_srgb, np.float32))).astype(np.float64)


def save_map_panels(out_dir, emap: ElementwiseMap, gt_raw: np.ndarray, noisy_srgb: np.ndarray, model: PseudoIspModel) -> list[Path]:
    """Four mosaics side by side: Y_raw, f(Y_gt), f^-1(Y_raw), Y_gt (each min-max scaled)."""
    from .tensor import depth_to_space

    def unpack(p):
        with no_grad():
            return depth_to_space(to_batch(p, np.float64), 2).data[0, 0]

    y_pseudo = infer_noisy_packed(model, noisy_srgb)
    gt = pack_mosaic(gt_raw)
    panels = {"y_raw": y_pseudo, "f_of_gt": emap.f(gt), "f_inv_of_y": emap.f_inv(y_pseudo), "gt_raw": gt}
    out_dir = Path(out_dir)
    paths = []
    for name, p in panels.items():
        m = unpack(p)
        m = (m - m.min()) / max(m.max() - m.min(), 1e-12)
        path = out_dir / f"panel_{name}.png"
        imageio.write_png(path, np.repeat(m[..., None], 3, axis=2), bits=8)
        paths.append(path)
    return paths
