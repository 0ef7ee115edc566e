"""Pseudo-ISP: sRGB2Raw, Raw2sRGB and a pixel-wise noise estimator.

Tensors are NCHW.  Images enter as HxWx3 (or NxHxWx3) float arrays and are
converted with :func:`to_batch`.  The packed raw layout is ``[R, G1, G2, B]``
taken from offsets ``(0,0), (0,1), (1,0), (1,1)`` of each RGGB block, and
pixel-shuffle maps input channel ``4*c + 2*r + q`` to output channel ``c`` at
block offset ``(r, q)``.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import config as config_io
from .tensor import (
    Adam,
    ConvStack,
    Tensor,
    abs_,
    checkpoint,
    depth_to_space,
    mse_loss,
    mul,
    no_grad,
    scale,
    space_to_depth,
    square,
    sub,
    sum_,
)

log = logging.getLogger(__name__)

SHARING_SCOPES = ("patch", "image", "set")
LOSS_VARIANTS = ("folded", "squared")
INITS = ("kaiming", "passthrough")
SQRT_HALF_PI = math.sqrt(math.pi / 2.0)


class TrainingError(RuntimeError):
    pass


def to_batch(img, dtype=np.float32) -> Tensor:
    """HxWxC or NxHxWxC array -> NCHW tensor (Tensors pass through)."""
    if isinstance(img, Tensor):
        return img
    arr = np.asarray(img, dtype=dtype)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected HxWxC or NxHxWxC image, got shape {arr.shape}")
    return Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def from_batch(t: Tensor | np.ndarray) -> np.ndarray:
    """NCHW -> NxHxWxC (or HxWxC when N == 1)."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    out = arr.transpose(0, 2, 3, 1)
    return out[0] if out.shape[0] == 1 else out


def _check_even(t: Tensor) -> None:
    H, W = t.shape[-2:]
    if H % 2 or W % 2:
        raise ValueError(f"spatial dims must be even, got {H}x{W}")


# ---------------------------------------------------------------------------
# Bayer sampling, packing, pixel shuffle
# ---------------------------------------------------------------------------


def bayer_mask(height: int, width: int, dtype=np.float32) -> np.ndarray:
    """(1, 3, H, W) one-hot RGGB channel selector."""
    m = np.zeros((1, 3, height, width), dtype=dtype)
    m[0, 0, 0::2, 0::2] = 1
    m[0, 1, 0::2, 1::2] = 1
    m[0, 1, 1::2, 0::2] = 1
    m[0, 2, 1::2, 1::2] = 1
    return m


def cfa_sample(dem: Tensor) -> Tensor:
    """(N, 3, H, W) -> (N, 1, H, W) RGGB mosaic; gradient reaches the sampled channel only."""
    _check_even(dem)
    H, W = dem.shape[-2:]
    return sum_(mul(dem, bayer_mask(H, W, dem.dtype)), axis=1, keepdims=True)


def pack(raw: Tensor) -> Tensor:
    """(N, 1, H, W) mosaic -> (N, 4, H/2, W/2) packed [R, G1, G2, B]."""
    _check_even(raw)
    if raw.shape[1] != 1:
        raise ValueError(f"pack expects a single-channel mosaic, got {raw.shape[1]} channels")
    return space_to_depth(raw, 2)


def unpack(packed: Tensor) -> Tensor:
    if packed.shape[1] != 4:
        raise ValueError(f"unpack expects 4 channels, got {packed.shape[1]}")
    return depth_to_space(packed, 2)


def pixel_shuffle(x: Tensor) -> Tensor:
    return depth_to_space(x, 2)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


def _nn_demosaic_readout() -> np.ndarray:
    """(12, 4) map from packed [R, G1, G2, B] to pixel-shuffle channels 4c+2r+q.

    Nearest-neighbour demosaic: every site of a block takes the block's R
    and B; green sites keep their own sample, R/B sites average G1 and G2.
    """
    m = np.zeros((12, 4))
    for r in range(2):
        for q in range(2):
            m[0 * 4 + 2 * r + q, 0] = 1.0
            m[2 * 4 + 2 * r + q, 3] = 1.0
    m[4 + 1, 1] = 1.0  # G at (0, 1) is G1
    m[4 + 2, 2] = 1.0  # G at (1, 0) is G2
    m[4 + 0, 1:3] = 0.5
    m[4 + 3, 1:3] = 0.5
    return m


NN_DEMOSAIC_READOUT = _nn_demosaic_readout()


@dataclass
class TrainConfig:
    patch_size: int = 60
    batch: int = 32
    iters_stage1: int = 1200
    iters_stage2: int = 600
    lr1: float = 1e-4
    lr2: float = 1e-5
    lam: float = 1.0
    sharing_scope: str = "image"
    seed: int = 0
    loss_variant: str = "folded"
    width: int = 128
    sigma_activation: str = "softplus"
    tile_size: int | None = None
    warm_start: bool = False
    init: str = "kaiming"
    noise_lr_scale: float = 100.0

    def __post_init__(self):
        if self.patch_size % 2 or self.patch_size < 16:
            raise ValueError(f"patch_size must be even and >= 16, got {self.patch_size}")
        if self.batch < 1 or self.iters_stage1 < 0 or self.iters_stage2 < 0:
            raise ValueError("batch must be positive and iteration counts non-negative")
        if self.lam <= 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.sharing_scope not in SHARING_SCOPES:
            raise ValueError(f"sharing_scope must be one of {SHARING_SCOPES}")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"loss_variant must be one of {LOSS_VARIANTS}")
        if self.noise_lr_scale <= 0:
            raise ValueError(f"noise_lr_scale must be positive, got {self.noise_lr_scale}")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}, got {self.init!r}")
        if self.width % 4:
            raise ValueError(f"width must be divisible by 4 (grouped noise net), got {self.width}")

    @property
    def iterations(self) -> int:
        return self.iters_stage1 + self.iters_stage2

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainConfig":
        base = dict(iters_stage1=8000, iters_stage2=4000)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        names = {f.name for f in dataclasses.fields(cls)}
        config_io.pick(d, names)
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        return d


class PseudoIspModel:
    """The three subnets plus training metadata.

    Channel widths follow ``[3, w, w, w, w, w, 3]`` (sRGB2Raw, 3x3),
    ``[4, w, w, w, w, w, 12]`` (Raw2sRGB, 3x3) and ``[4, w, ..., 4]`` for the
    1x1 noise estimator with 4 groups, so each packed channel has its own
    pixel-wise noise level function.
    """

    def __init__(
        self,
        width: int = 128,
        lam: float = 1.0,
        sharing_scope: str = "image",
        sigma_activation: str = "softplus",
        seed: int = 0,
        dtype=np.float32,
        init: str = "kaiming",
    ):
        if lam <= 0:
            raise ValueError(f"lambda must be positive, got {lam}")
        if sharing_scope not in SHARING_SCOPES:
            raise ValueError(f"sharing_scope must be one of {SHARING_SCOPES}")
        rng = np.random.default_rng(seed)
        w = width
        self.width = width
        self.dtype = np.dtype(dtype)
        self.lam = float(lam)
        self.sharing_scope = sharing_scope
        self.sigma_activation = sigma_activation
        self.srgb2raw = ConvStack([3, w, w, w, w, w, 3], 3, rng, dtype=dtype, name="srgb2raw")
        self.raw2srgb = ConvStack([4, w, w, w, w, w, 12], 3, rng, dtype=dtype, name="raw2srgb")
        self.noise_net = ConvStack([4, w, w, w, w, w, 4], 1, rng, groups=4, final=sigma_activation, dtype=dtype, name="noise")
        if init not in INITS:
            raise ValueError(f"init must be one of {INITS}, got {init!r}")
        self.init = init
        if init == "passthrough":
            self.srgb2raw.init_passthrough(np.eye(3))
            self.raw2srgb.init_passthrough(NN_DEMOSAIC_READOUT)
        self.meta: dict = {"trained_iters": 0}

    @classmethod
    def from_config(cls, cfg: TrainConfig, seed: int | None = None) -> "PseudoIspModel":
        return cls(cfg.width, cfg.lam, cfg.sharing_scope, cfg.sigma_activation, cfg.seed if seed is None else seed, init=cfg.init)

    def parameters(self) -> list[Tensor]:
        return self.srgb2raw.parameters() + self.raw2srgb.parameters() + self.noise_net.parameters()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {**self.srgb2raw.state_dict(), **self.raw2srgb.state_dict(), **self.noise_net.state_dict()}

    def save(self, path) -> None:
        meta = {
            "kind": "pseudoisp",
            "width": self.width,
            "lambda": self.lam,
            "sharing_scope": self.sharing_scope,
            "sigma_activation": self.sigma_activation,
            "init": self.init,
            **self.meta,
        }
        checkpoint.save(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "PseudoIspModel":
        arrays, meta = checkpoint.load(path)
        if meta.get("kind") != "pseudoisp":
            raise ValueError(f"{path} is not a Pseudo-ISP checkpoint")
        model = cls(meta["width"], meta["lambda"], meta["sharing_scope"], meta["sigma_activation"], dtype=arrays["srgb2raw.0.weight"].dtype)
        for net in (model.srgb2raw, model.raw2srgb, model.noise_net):
            net.load_state_dict(arrays)
        model.init = meta.get("init", "kaiming")
        model.meta = {k: v for k, v in meta.items() if k not in ("kind", "width", "lambda", "sharing_scope", "sigma_activation", "init")}
        return model

    def is_finite(self) -> bool:
        return all(np.isfinite(p.data).all() for p in self.parameters())

    # -- forward pieces -----------------------------------------------------
    def srgb_to_dem(self, image) -> Tensor:
        x = to_batch(image, self.dtype)
        _check_even(x)
        return self.srgb2raw(x)

    def raw_to_srgb(self, packed: Tensor) -> Tensor:
        if packed.shape[1] != 4:
            raise ValueError(f"Raw2sRGB expects 4 packed channels, got {packed.shape[1]}")
        return pixel_shuffle(self.raw2srgb(packed))

    def estimate_sigma(self, packed: Tensor) -> Tensor:
        if packed.shape[1] != 4:
            raise ValueError(f"noise estimator expects 4 packed channels, got {packed.shape[1]}")
        return self.noise_net(packed)

    def to_packed(self, image) -> Tensor:
        """sRGB -> sRGB2Raw -> CFA -> pack."""
        return pack(cfa_sample(self.srgb_to_dem(image)))

    def round_trip(self, image) -> Tensor:
        return self.raw_to_srgb(self.to_packed(image))


@dataclass
class PseudoPair:
    noisy: np.ndarray
    pseudo_clean: np.ndarray
    source_id: str = ""
    coords: tuple[int, int] | None = None

    def __post_init__(self):
        if self.noisy.shape != self.pseudo_clean.shape:
            raise ValueError(f"pair shape mismatch: {self.noisy.shape} vs {self.pseudo_clean.shape}")


@dataclass
class LossTerms:
    total: Tensor
    clean_rec: float
    noisy_rec: float
    noise: float


def joint_loss(model: PseudoIspModel, noisy, pseudo_clean, lam: float | None = None, variant: str = "folded") -> LossTerms:
    """Reconstruction of both streams plus lambda-weighted noise supervision.

    ``variant="folded"`` supervises sigma with sqrt(pi/2)*|Y_pack - X_pack|;
    ``variant="squared"`` compares sigma**2 with (Y_pack - X_pack)**2.
    """
    y = to_batch(noisy, model.dtype)
    x = to_batch(pseudo_clean, model.dtype)
    if y.shape != x.shape:
        raise ValueError(f"noisy/pseudo-clean shape mismatch: {y.shape} vs {x.shape}")
    if variant not in LOSS_VARIANTS:
        raise ValueError(f"loss variant must be one of {LOSS_VARIANTS}")
    lam = model.lam if lam is None else lam
    x_pack = model.to_packed(x)
    y_pack = model.to_packed(y)
    x_star = model.raw_to_srgb(x_pack)
    y_star = model.raw_to_srgb(y_pack)
    sigma = model.estimate_sigma(x_pack)
    resid = sub(y_pack, x_pack)
    if variant == "folded":
        noise_term = mse_loss(sigma, scale(abs_(resid), SQRT_HALF_PI))
    else:
        noise_term = mse_loss(square(sigma), square(resid))
    l_x = mse_loss(x_star, x)
    l_y = mse_loss(y_star, y)
    total = l_x + l_y
    if lam:
        total = total + scale(noise_term, lam)
    return LossTerms(total, l_x.item(), l_y.item(), noise_term.item())


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _pad_to(img: np.ndarray, size: int) -> np.ndarray:
    H, W = img.shape[:2]
    ph, pw = max(0, size - H), max(0, size - W)
    if ph == 0 and pw == 0:
        return img
    return np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect")


class PatchSampler:
    """Uniform random crops with even offsets (keeps the Bayer phase aligned)."""

    def __init__(self, pairs: list[PseudoPair], patch: int, rng: np.random.Generator):
        self.patch = patch
        self.rng = rng
        self.noisy = [_pad_to(np.asarray(p.noisy, np.float32), patch) for p in pairs]
        self.clean = [_pad_to(np.asarray(p.pseudo_clean, np.float32), patch) for p in pairs]

    def sample(self, batch: int) -> tuple[np.ndarray, np.ndarray]:
        p = self.patch
        ys = np.empty((batch, p, p, 3), np.float32)
        xs = np.empty((batch, p, p, 3), np.float32)
        idx = self.rng.integers(0, len(self.noisy), size=batch)
        for b, i in enumerate(idx):
            H, W = self.noisy[i].shape[:2]
            top = 2 * int(self.rng.integers(0, (H - p) // 2 + 1))
            left = 2 * int(self.rng.integers(0, (W - p) // 2 + 1))
            ys[b] = self.noisy[i][top : top + p, left : left + p]
            xs[b] = self.clean[i][top : top + p, left : left + p]
        return ys, xs


def train_pseudoisp(
    pairs: list[PseudoPair],
    cfg: TrainConfig,
    model: PseudoIspModel | None = None,
    seed: int | None = None,
    callback: Callable[[int, LossTerms], None] | None = None,
) -> tuple[PseudoIspModel, list[float]]:
    """Adam-train one Pseudo-ISP on random patches drawn from ``pairs``.

    Returns the model and the per-iteration total loss.
    """
    if not pairs:
        raise ValueError("train_pseudoisp needs at least one pseudo pair")
    seed = cfg.seed if seed is None else seed
    model = model or PseudoIspModel.from_config(cfg, seed=seed)
    rng = np.random.default_rng([seed, 1])
    sampler = PatchSampler(pairs, cfg.patch_size, rng)
    # the noise head gets its own optimizer so its step size can be scaled
    opt = Adam(model.srgb2raw.parameters() + model.raw2srgb.parameters(), lr=cfg.lr1)
    opt_noise = Adam(model.noise_net.parameters(), lr=cfg.lr1 * cfg.noise_lr_scale)
    history: list[float] = []
    for it in range(cfg.iterations):
        opt.lr = cfg.lr1 if it < cfg.iters_stage1 else cfg.lr2
        opt_noise.lr = opt.lr * cfg.noise_lr_scale
        ys, xs = sampler.sample(cfg.batch)
        terms = joint_loss(model, ys, xs, lam=cfg.lam, variant=cfg.loss_variant)
        value = terms.total.item()
        if not np.isfinite(value):
            raise TrainingError(
                f"non-finite Pseudo-ISP loss at iteration {it}: "
                f"clean_rec={terms.clean_rec:.4g} noisy_rec={terms.noisy_rec:.4g} noise={terms.noise:.4g}"
            )
        opt.zero_grad()
        opt_noise.zero_grad()
        terms.total.backward()
        opt.step()
        opt_noise.step()
        history.append(value)
        if callback is not None:
            callback(it, terms)
    model.meta["trained_iters"] = model.meta.get("trained_iters", 0) + cfg.iterations
    model.meta["seed"] = seed
    return model, history


@dataclass
class ScopedModels:
    """Pseudo-ISP models and the pair indices each one was trained on."""

    models: list[PseudoIspModel] = field(default_factory=list)
    members: list[list[int]] = field(default_factory=list)
    histories: list[list[float]] = field(default_factory=list)

    def model_for_clean(self, index: int) -> PseudoIspModel:
        """Clean images are assigned to models round-robin."""
        return self.models[index % len(self.models)]


def split_tiles(pair: PseudoPair, tile: int) -> list[PseudoPair]:
    H, W = pair.noisy.shape[:2]
    tiles = []
    for top in range(0, H - tile + 1, tile):
        for left in range(0, W - tile + 1, tile):
            tiles.append(
                PseudoPair(
                    pair.noisy[top : top + tile, left : left + tile],
                    pair.pseudo_clean[top : top + tile, left : left + tile],
                    pair.source_id,
                    (top, left),
                )
            )
    return tiles or [pair]


def train_scoped(pairs: list[PseudoPair], cfg: TrainConfig, previous: ScopedModels | None = None) -> ScopedModels:
    """One model per patch, per image or for the whole set, per ``cfg.sharing_scope``."""
    if not pairs:
        raise ValueError("train_scoped needs at least one pseudo pair")
    if cfg.sharing_scope == "set":
        groups = [(list(range(len(pairs))), pairs)]
    elif cfg.sharing_scope == "image":
        groups = [([i], [p]) for i, p in enumerate(pairs)]
    else:
        groups = []
        for i, p in enumerate(pairs):
            H, W = p.noisy.shape[:2]
            tile = cfg.tile_size or max(cfg.patch_size, 2 * (min(H, W) // 4))
            groups += [([i], [t]) for t in split_tiles(p, tile)]
    seeds = np.random.SeedSequence(cfg.seed).generate_state(len(groups))
    out = ScopedModels()
    for g, (members, group_pairs) in enumerate(groups):
        init = None
        if cfg.warm_start and previous is not None and len(previous.models) == len(groups):
            init = previous.models[g]
        log.debug("training Pseudo-ISP %d/%d on %d pair(s)", g + 1, len(groups), len(group_pairs))
        model, hist = train_pseudoisp(group_pairs, cfg, model=init, seed=int(seeds[g]))
        out.models.append(model)
        out.members.append(members)
        out.histories.append(hist)
    return out


def infer_packed(model: PseudoIspModel, image: np.ndarray) -> np.ndarray:
    """Packed pseudo raw of an HxWx3 image as an (H/2)x(W/2)x4 array."""
    with no_grad():
        return from_batch(model.to_packed(image))


def infer_sigma(model: PseudoIspModel, packed: np.ndarray) -> np.ndarray:
    with no_grad():
        return from_batch(model.estimate_sigma(to_batch(packed)))
