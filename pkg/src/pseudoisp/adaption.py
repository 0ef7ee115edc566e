"""Alternated unpaired adaption of a denoiser.

Each round regenerates pseudo clean images with the current denoiser, trains
Pseudo-ISP models on the resulting pseudo pairs, synthesizes noisy versions
of an unpaired clean set, and finetunes the denoiser on a stratified mix of
synthetic pairs (target: true clean) and pseudo pairs (target: pseudo clean).
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage

from . import config as config_io
from . import imageio
from .pseudo_isp import PseudoPair, ScopedModels, TrainConfig, from_batch, to_batch, train_scoped
from .synthesis import SyntheticPair, synthesize_noisy
from .tensor import Adam, ConvStack, Tensor, checkpoint, mse_loss, no_grad, sub

log = logging.getLogger(__name__)

DENOISER_KINDS = ("gaussian_blur", "compact_cnn")


class AdaptionError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Denoisers
# ---------------------------------------------------------------------------


def gaussian_kernel1d(size: int = 5, sigma: float = 1.0) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(ax**2) / (2.0 * sigma**2))
    return k / k.sum()


class Denoiser:
    """Either a fixed 5x5 Gaussian blur or a small residual CNN.

    The CNN has ``depth`` 3x3 layers of width ``width`` and predicts the
    noise, which is subtracted from the input.
    """

    def __init__(
        self,
        kind: str = "gaussian_blur",
        kernel_size: int = 5,
        sigma: float = 1.0,
        width: int = 64,
        depth: int = 7,
        seed: int = 0,
        zero_init: bool = True,
    ):
        if kind not in DENOISER_KINDS:
            raise ValueError(f"denoiser kind must be one of {DENOISER_KINDS}, got {kind!r}")
        self.kind = kind
        self.kernel_size = kernel_size
        self.sigma = sigma
        self.width = width
        self.depth = depth
        self.net: ConvStack | None = None
        self.stats: dict = {}
        if kind == "gaussian_blur":
            if kernel_size % 2 == 0 or kernel_size < 1 or sigma <= 0:
                raise ValueError("gaussian_blur needs an odd kernel size and positive sigma")
            self.kernel = gaussian_kernel1d(kernel_size, sigma)
        else:
            if depth < 2:
                raise ValueError(f"compact_cnn depth must be >= 2, got {depth}")
            rng = np.random.default_rng(seed)
            self.net = ConvStack([3] + [width] * (depth - 1) + [3], 3, rng, name="denoiser")
            if zero_init:
                self.net.zero_last_layer()

    @classmethod
    def gaussian_blur(cls, kernel_size: int = 5, sigma: float = 1.0) -> "Denoiser":
        return cls("gaussian_blur", kernel_size=kernel_size, sigma=sigma)

    @classmethod
    def compact_cnn(cls, width: int = 64, depth: int = 7, seed: int = 0, zero_init: bool = True) -> "Denoiser":
        return cls("compact_cnn", width=width, depth=depth, seed=seed, zero_init=zero_init)

    @property
    def trainable(self) -> bool:
        return self.net is not None

    def copy(self) -> "Denoiser":
        out = Denoiser(self.kind, self.kernel_size, self.sigma, self.width, self.depth)
        if self.net is not None:
            out.net.load_state_dict(self.net.state_dict())
        return out

    def forward(self, batch: Tensor) -> Tensor:
        """Unclipped CNN estimate (input minus predicted residual) on NCHW."""
        if self.net is None:
            raise TypeError("gaussian_blur has no trainable forward pass")
        return sub(batch, self.net(batch))

    def save(self, path) -> None:
        meta = {"kind": "denoiser", "denoiser": self.kind, "kernel_size": self.kernel_size, "sigma": self.sigma, "width": self.width, "depth": self.depth}
        checkpoint.save(path, self.net.state_dict() if self.net else {}, meta)

    @classmethod
    def load(cls, path) -> "Denoiser":
        arrays, meta = checkpoint.load(path)
        if meta.get("kind") != "denoiser":
            raise ValueError(f"{path} is not a denoiser checkpoint")
        d = cls(meta["denoiser"], meta["kernel_size"], meta["sigma"], meta["width"], meta["depth"])
        if d.net is not None:
            d.net.load_state_dict(arrays)
        return d


def denoise(d: Denoiser, noisy: np.ndarray) -> np.ndarray:
    """HxWx3 (or NxHxWx3) image in, same shape out."""
    noisy = np.asarray(noisy)
    if d.kind == "gaussian_blur":
        out = np.asarray(noisy, dtype=np.float64)
        axes = (0, 1) if out.ndim == 3 else (1, 2)
        for ax in axes:
            out = ndimage.correlate1d(out, d.kernel, axis=ax, mode="reflect")
        return out
    with no_grad():
        out = d.forward(to_batch(noisy))
    return np.clip(from_batch(out), 0.0, 1.0).astype(np.float64)


def build_pseudo_pairs(d: Denoiser, noisy_set: list[np.ndarray]) -> list[PseudoPair]:
    if len(noisy_set) == 0:
        raise ValueError("build_pseudo_pairs needs a non-empty noisy set")
    return [PseudoPair(np.asarray(y, np.float64), denoise(d, y), f"noisy-{i:03d}") for i, y in enumerate(noisy_set)]


# ---------------------------------------------------------------------------
# Finetuning
# ---------------------------------------------------------------------------


@dataclass
class AdaptionConfig:
    t_max: int = 3
    r: float = 0.5
    finetune_iters: int = 1000
    finetune_lr: float = 1e-4
    batch: int = 16
    patch_size: int = 48
    seed: int = 0
    early_stop: bool = True
    min_gain_db: float = 0.02
    cnn_width: int = 64
    cnn_depth: int = 7
    pseudoisp: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if not 0.0 <= self.r <= 1.0:
            raise ValueError(f"r must lie in [0, 1], got {self.r}")
        if self.t_max < 1:
            raise ValueError(f"t_max must be >= 1, got {self.t_max}")
        if self.batch < 1 or self.finetune_iters < 0 or self.patch_size < 1:
            raise ValueError("batch and patch_size must be positive, finetune_iters non-negative")
        if isinstance(self.pseudoisp, dict):
            self.pseudoisp = TrainConfig.from_dict(self.pseudoisp)

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptionConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        config_io.pick(d, names)
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["pseudoisp"] = self.pseudoisp.to_dict()
        return d


def synthetic_counts(r: float, batch: int, iters: int) -> np.ndarray:
    """Synthetic samples per batch; cumulative rounding keeps the overall fraction at r."""
    cum = np.floor(r * batch * np.arange(iters + 1) + 1e-9).astype(np.int64)
    return np.diff(cum)


def _crop(img: np.ndarray, patch: int, rng: np.random.Generator) -> np.ndarray:
    H, W = img.shape[:2]
    if H < patch or W < patch:
        img = np.pad(img, ((0, max(0, patch - H)), (0, max(0, patch - W)), (0, 0)), mode="reflect")
        H, W = img.shape[:2]
    top = int(rng.integers(0, H - patch + 1))
    left = int(rng.integers(0, W - patch + 1))
    return img[top : top + patch, left : left + patch]


def finetune_denoiser(
    d: Denoiser,
    pseudo: list[PseudoPair],
    synthetic: list[SyntheticPair],
    config: AdaptionConfig,
    seed: int | None = None,
) -> Denoiser:
    """Adam finetuning with stratified synthetic/pseudo batches.

    A gaussian_blur input is replaced by a freshly initialised compact CNN.
    The returned denoiser carries ``stats`` with the loss history and the
    number of synthetic and pseudo samples drawn.
    """
    if not pseudo and not synthetic:
        raise ValueError("finetune_denoiser needs pseudo or synthetic pairs")
    seed = config.seed if seed is None else seed
    if d.trainable:
        out = d.copy()
    else:
        out = Denoiser.compact_cnn(config.cnn_width, config.cnn_depth, seed=seed)
    r = config.r
    if not synthetic:
        r = 0.0
    elif not pseudo:
        r = 1.0
    rng = np.random.default_rng([seed, 7])
    n_syn = synthetic_counts(r, config.batch, config.finetune_iters)
    syn_x = [(np.asarray(s.noisy, np.float32), np.asarray(s.clean, np.float32)) for s in synthetic]
    pse_x = [(np.asarray(p.noisy, np.float32), np.asarray(p.pseudo_clean, np.float32)) for p in pseudo]
    opt = Adam(out.net.parameters(), lr=config.finetune_lr)
    p = config.patch_size
    history, counts = [], {"synthetic": 0, "pseudo": 0}
    for it in range(config.finetune_iters):
        k = int(n_syn[it])
        inp = np.empty((config.batch, p, p, 3), np.float32)
        tgt = np.empty_like(inp)
        for b in range(config.batch):
            src = syn_x if b < k else pse_x
            i = int(rng.integers(0, len(src)))
            crop = _crop(np.concatenate(src[i], axis=2), p, rng)
            inp[b], tgt[b] = crop[..., :3], crop[..., 3:]
        counts["synthetic"] += k
        counts["pseudo"] += config.batch - k
        loss = mse_loss(out.forward(to_batch(inp)), to_batch(tgt))
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite denoiser loss at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(value)
    out.stats = {"loss": history, **counts}
    return out


# ---------------------------------------------------------------------------
# Alternation loop
# ---------------------------------------------------------------------------


@dataclass
class AdaptionState:
    denoiser: Denoiser
    pseudo_pairs: list[PseudoPair] = field(default_factory=list)
    synthetic_pairs: list[SyntheticPair] = field(default_factory=list)
    pseudoisp: ScopedModels | None = None
    metrics: list[dict] = field(default_factory=list)
    log: list[str] = field(default_factory=list)
    rounds_completed: int = 0


STAGES = ("pseudo_pairs", "pseudoisp", "synthesize", "finetune")


def _round_dir(run_dir: Path, t: int) -> Path:
    return run_dir / f"round-{t:02d}"


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _resume_point(run_dir: Path, chash: str, t_max: int) -> tuple[int, Denoiser | None, list[dict]]:
    done, d, metrics = 0, None, []
    for t in range(1, t_max + 1):
        rd = _round_dir(run_dir, t)
        mpath, dpath = rd / "metrics.json", rd / "denoiser.ckpt"
        if not (mpath.exists() and dpath.exists()):
            break
        m = json.loads(mpath.read_text())
        if m.get("config_hash") != chash:
            raise AdaptionError(f"{rd} was produced by a different config (hash {m.get('config_hash')} != {chash})")
        done, d = t, Denoiser.load(dpath)
        metrics = m.get("history", [])
    return done, d, metrics


def run_adaption(
    noisy_set: list[np.ndarray],
    clean_set: list[np.ndarray],
    d0: Denoiser,
    config: AdaptionConfig,
    evaluator: Callable[[Denoiser], dict] | None = None,
    run_dir=None,
) -> AdaptionState:
    """Alternate pseudo-pair generation, Pseudo-ISP training, synthesis and
    finetuning for up to ``config.t_max`` rounds.

    ``evaluator`` maps a denoiser to a metrics dict; when it reports ``psnr``
    the loop stops early once a round gains less than ``config.min_gain_db``
    (unless ``config.early_stop`` is off).  With ``run_dir`` every round is
    written to ``round-NN/`` and completed rounds are reused on rerun.
    """
    if not noisy_set or not clean_set:
        raise ValueError("run_adaption needs non-empty noisy and clean sets")
    noisy_ids = {id(y) for y in noisy_set}
    if any(id(x) in noisy_ids for x in clean_set):
        raise ValueError("noisy and clean sets must be disjoint")
    chash = config_io.config_hash(config.to_dict())
    run_dir = Path(run_dir) if run_dir is not None else None
    state = AdaptionState(d0)
    start = 1
    if evaluator is not None:
        state.metrics.append({"round": 0, **evaluator(d0)})
    if run_dir is not None:
        done, d, prev = _resume_point(run_dir, chash, config.t_max)
        if done:
            state.denoiser, state.rounds_completed, state.metrics = d, done, prev
            state.log.append(f"resumed after round {done}")
            start = done + 1
    seeds = np.random.SeedSequence(config.seed)
    round_seeds = seeds.generate_state(config.t_max + 1)
    previous_models = None
    for t in range(start, config.t_max + 1):
        rs = int(round_seeds[t])
        d = state.denoiser
        stage = STAGES[0]
        try:
            state.pseudo_pairs = build_pseudo_pairs(d, noisy_set)
            state.log.append(f"round {t}: {stage}")
            stage = STAGES[1]
            pcfg = dataclasses.replace(config.pseudoisp, seed=rs)
            models = train_scoped(state.pseudo_pairs, pcfg, previous=previous_models)
            previous_models = models
            state.pseudoisp = models
            state.log.append(f"round {t}: {stage}")
            stage = STAGES[2]
            syn_seeds = np.random.SeedSequence([rs, 3]).generate_state(len(clean_set))
            state.synthetic_pairs = [
                synthesize_noisy(models.model_for_clean(i), x, int(syn_seeds[i]), model_id=f"model-{i % len(models.models):03d}")
                for i, x in enumerate(clean_set)
            ]
            state.log.append(f"round {t}: {stage}")
            stage = STAGES[3]
            d = finetune_denoiser(d, state.pseudo_pairs, state.synthetic_pairs, config, seed=rs)
            state.log.append(f"round {t}: {stage}")
        except Exception as exc:
            raise AdaptionError(f"round {t}, stage {stage}: {exc}") from exc
        state.denoiser = d
        state.rounds_completed = t
        entry = {"round": t, "finetune_loss": float(np.mean(d.stats["loss"][-50:])) if d.stats["loss"] else None}
        if evaluator is not None:
            entry.update(evaluator(d))
        state.metrics.append(entry)
        log.info("round %d: %s", t, entry)
        if run_dir is not None:
            _save_round(run_dir, t, state, chash, config)
        if config.early_stop and evaluator is not None and len(state.metrics) >= 2:
            prev, cur = state.metrics[-2].get("psnr"), entry.get("psnr")
            if prev is not None and cur is not None and cur - prev < config.min_gain_db:
                state.log.append(f"round {t}: early stop (gain {cur - prev:.4f} dB)")
                break
    return state


def _save_round(run_dir: Path, t: int, state: AdaptionState, chash: str, config: AdaptionConfig) -> None:
    rd = _round_dir(run_dir, t)
    ck = rd / "pseudoisp-ckpts"
    ck.mkdir(parents=True, exist_ok=True)
    for k, m in enumerate(state.pseudoisp.models):
        m.save(ck / f"model-{k:03d}.ckpt")
    for i, s in enumerate(state.synthetic_pairs):
        imageio.write_png(rd / "synthetic" / f"clean-{i:03d}.png", s.noisy)
    state.denoiser.save(rd / "denoiser.ckpt")
    _write_json(
        rd / "metrics.json",
        {
            "round": t,
            "config_hash": chash,
            "seed": config.seed,
            "metrics": state.metrics[-1],
            "history": state.metrics,
            "members": state.pseudoisp.members,
        },
    )
