"""Simulator-backed experiments: generate data, adapt, evaluate, tabulate."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as config_io
from .adaption import AdaptionConfig, Denoiser, denoise, run_adaption
from .camera import CameraProfile, DatasetManifest, capture, develop, render_clean_raw
from .imageio import read_png
from .metrics import psnr, ssim
from .scenes import make_scenes
from .tensor import checkpoint

log = logging.getLogger(__name__)

AXES = ("sharing_scope", "r", "t", "loss_variant")


@dataclass
class Benchmark:
    """Noisy set with hidden clean oracles, held-out noisy images, unpaired clean set."""

    noisy: list[np.ndarray]
    noisy_clean: list[np.ndarray]
    heldout: list[np.ndarray]
    heldout_clean: list[np.ndarray]
    clean: list[np.ndarray]


def make_benchmark(profile: CameraProfile, n_noisy: int, n_clean: int, n_heldout: int, size: int, seed: int) -> Benchmark:
    scenes = make_scenes(n_noisy + n_heldout + n_clean, size=size, seed=seed)
    seeds = np.random.SeedSequence([seed, 11]).generate_state(len(scenes))
    shots = [capture(profile, s, int(seeds[i])) for i, s in enumerate(scenes[: n_noisy + n_heldout])]
    clean = [develop(profile, render_clean_raw(profile, s)) for s in scenes[n_noisy + n_heldout :]]
    return Benchmark(
        [s.noisy_srgb for s in shots[:n_noisy]],
        [s.clean_srgb for s in shots[:n_noisy]],
        [s.noisy_srgb for s in shots[n_noisy:]],
        [s.clean_srgb for s in shots[n_noisy:]],
        clean,
    )


def load_benchmark(data_dir) -> Benchmark:
    """Benchmark view of a dataset written by ``generate_dataset`` (no held-out split)."""
    data_dir = Path(data_dir)
    manifest = DatasetManifest.load(data_dir / "manifest.json")
    oracle, _ = checkpoint.load(data_dir / manifest.oracle)
    noisy = [read_png(data_dir / e["path"]) for e in manifest.role("noisy")]
    noisy_clean = [oracle[f"{e['id']}/clean_srgb"] for e in manifest.role("noisy")]
    clean = [read_png(data_dir / e["path"]) for e in manifest.role("clean")]
    return Benchmark(noisy, noisy_clean, [], [], clean)


def evaluate_denoiser(d: Denoiser, noisy: list[np.ndarray], clean: list[np.ndarray]) -> dict:
    outs = [denoise(d, y) for y in noisy]
    return {
        "psnr": float(np.mean([psnr(o, x) for o, x in zip(outs, clean)])),
        "ssim": float(np.mean([ssim(o, x) for o, x in zip(outs, clean)])),
    }


def make_evaluator(bench: Benchmark):
    """PSNR/SSIM on held-out noisy images (falls back to the noisy set itself)."""
    noisy, clean = (bench.heldout, bench.heldout_clean) if bench.heldout else (bench.noisy, bench.noisy_clean)

    def evaluate(d: Denoiser) -> dict:
        m = evaluate_denoiser(d, noisy, clean)
        if bench.heldout:
            m["psnr_noisy_set"] = evaluate_denoiser(d, bench.noisy, bench.noisy_clean)["psnr"]
        return {k: round(v, 6) for k, v in m.items()}

    return evaluate


@dataclass
class ExperimentSpec:
    profile: dict = field(default_factory=lambda: CameraProfile.default().to_dict())
    n_noisy: int = 10
    n_clean: int = 20
    n_heldout: int = 4
    image_size: int = 64
    scene_seed: int = 0
    denoiser: str = "gaussian_blur"
    adaption: AdaptionConfig = field(default_factory=AdaptionConfig)
    axis: str | None = None
    values: list = field(default_factory=list)
    out_dir: str = "experiment-out"

    def __post_init__(self):
        if isinstance(self.adaption, dict):
            self.adaption = AdaptionConfig.from_dict(self.adaption)
        if self.axis is not None and self.axis not in AXES:
            raise ValueError(f"ablation axis must be one of {AXES} or None, got {self.axis!r}")
        if self.axis is None and self.values:
            raise ValueError("values given without an ablation axis")
        if self.axis is not None and not self.values:
            raise ValueError(f"axis {self.axis!r} needs at least one value")
        if self.axis == "t" and any(int(v) < 1 for v in self.values):
            raise ValueError("t values must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        config_io.pick(d, names)
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["adaption"] = self.adaption.to_dict()
        return d


def _initial_denoiser(kind: str, cfg: AdaptionConfig) -> Denoiser:
    if kind == "gaussian_blur":
        return Denoiser.gaussian_blur()
    return Denoiser.compact_cnn(cfg.cnn_width, cfg.cnn_depth, seed=cfg.seed)


def _with_value(cfg: AdaptionConfig, axis: str, value) -> AdaptionConfig:
    if axis == "r":
        return dataclasses.replace(cfg, r=float(value))
    if axis == "sharing_scope":
        return dataclasses.replace(cfg, pseudoisp=dataclasses.replace(cfg.pseudoisp, sharing_scope=str(value)))
    if axis == "loss_variant":
        return dataclasses.replace(cfg, pseudoisp=dataclasses.replace(cfg.pseudoisp, loss_variant=str(value)))
    raise ValueError(f"unsupported axis {axis!r}")


def render_table(header: list[str], rows: list[list]) -> str:
    cells = [header] + [[f"{v:.4f}" if isinstance(v, float) else str(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def run_experiment(spec: ExperimentSpec, bench: Benchmark | None = None) -> dict:
    """Run one adaption per ablation value and write report.json, table.txt and curve.csv."""
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if bench is None:
        profile = CameraProfile.from_dict(spec.profile)
        bench = make_benchmark(profile, spec.n_noisy, spec.n_clean, spec.n_heldout, spec.image_size, spec.scene_seed)
    evaluator = make_evaluator(bench)
    runs: list[tuple[str, AdaptionConfig]] = []
    if spec.axis is None:
        runs.append(("-", spec.adaption))
    elif spec.axis == "t":
        t_max = max(int(v) for v in spec.values)
        runs.append(("t", dataclasses.replace(spec.adaption, t_max=t_max, early_stop=False)))
    else:
        runs += [(str(v), _with_value(spec.adaption, spec.axis, v)) for v in spec.values]

    rows, curve, details = [], [], []
    for label, cfg in runs:
        run_dir = out / f"run-{spec.axis or 'base'}-{label}"
        try:
            state = run_adaption(bench.noisy, bench.clean, _initial_denoiser(spec.denoiser, cfg), cfg, evaluator=evaluator, run_dir=run_dir)
        except Exception as exc:
            raise RuntimeError(f"experiment run {spec.axis}={label}: {exc}") from exc
        for m in state.metrics:
            curve.append([label, m["round"], m.get("psnr"), m.get("ssim")])
        details.append({"value": label, "config_hash": config_io.config_hash(cfg.to_dict()), "metrics": state.metrics})
        if spec.axis == "t":
            by_round = {m["round"]: m for m in state.metrics}
            for v in spec.values:
                m = by_round[int(v)]
                rows.append([int(v), m["psnr"], m["ssim"]])
        else:
            last = state.metrics[-1]
            rows.append([label, last["psnr"], last["ssim"], last["round"]])

    header = [spec.axis or "run", "psnr", "ssim"] + ([] if spec.axis == "t" else ["rounds"])
    base = evaluator(_initial_denoiser(spec.denoiser, spec.adaption))
    report = {
        # the output location is not part of the experiment's identity
        "config_hash": config_io.config_hash({k: v for k, v in spec.to_dict().items() if k != "out_dir"}),
        "seed": spec.adaption.seed,
        "axis": spec.axis,
        "header": header,
        "rows": rows,
        "baseline": base,
        "runs": details,
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out / "table.txt").write_text(render_table(header, rows))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["value", "round", "psnr", "ssim"])
    w.writerows(curve)
    (out / "curve.csv").write_text(buf.getvalue())
    return report
