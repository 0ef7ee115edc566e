"""Command-line entry point: ``pseudoisp <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as config_io
from .adaption import AdaptionConfig, Denoiser, build_pseudo_pairs, run_adaption
from .camera import CameraProfile, capture, generate_dataset
from .experiment import AXES, ExperimentSpec, evaluate_denoiser, load_benchmark, make_evaluator, run_experiment
from .imageio import write_png
from .pseudo_isp import PseudoIspModel, PseudoPair, TrainConfig, train_scoped
from .scenes import make_scenes
from .synthesis import fit_elementwise_map, infer_noisy_packed, pack_mosaic, save_map_panels, synthesize_noisy, verify_taylor_noise_model

log = logging.getLogger("pseudoisp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise UsageError(message)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- config assembly ----------------------------------------------------------


def _load(args) -> dict:
    cfg = config_io.load_config(args.config) if args.config else {}
    config_io.pick(cfg, {"camera", "data", "pseudoisp", "adaption", "experiment"})
    return cfg


def _train_cfg(cfg: dict, args) -> TrainConfig:
    d = dict(cfg.get("pseudoisp", {}))
    if args.seed is not None:
        d["seed"] = args.seed
    return TrainConfig.paper_scale(**d) if args.paper_scale else TrainConfig.from_dict(d)


def _adapt_cfg(cfg: dict, args) -> AdaptionConfig:
    d = dict(cfg.get("adaption", {}))
    if args.seed is not None:
        d["seed"] = args.seed
    d["pseudoisp"] = _train_cfg(cfg, args)
    return AdaptionConfig.from_dict(d)


def _profile(cfg: dict, args, default: str = "default") -> CameraProfile:
    cam = dict(cfg.get("camera", {}))
    kind = cam.pop("profile", default)
    if kind == "random":
        return CameraProfile.random(cam.pop("seed", args.seed or 0))
    if kind == "custom":
        return CameraProfile.from_dict(cam)
    if kind == "elementwise":
        return CameraProfile.elementwise(**cam)
    if kind != "default":
        raise UsageError(f"unknown camera profile {kind!r} (default, elementwise, random, custom)")
    return CameraProfile.default(**cam)


# -- subcommands ---------------------------------------------------------------


def cmd_simulate(args, cfg) -> int:
    data = config_io.pick(cfg.get("data", {}), {"n_scenes", "size", "n_noisy"})
    n = args.n_scenes or data.get("n_scenes", 8)
    size = args.size or data.get("size", 64)
    seed = args.seed or 0
    scenes = make_scenes(n, size=size, seed=seed)
    manifest = generate_dataset(_profile(cfg, args), scenes, args.out, seed=seed, n_noisy=data.get("n_noisy"))
    print(f"wrote {len(manifest.entries) - 1} images to {args.out}")
    return 0


def _pairs(bench, denoiser_kind: str, oracle: bool) -> list[PseudoPair]:
    if oracle:
        return [PseudoPair(y, x, f"noisy-{i:03d}") for i, (y, x) in enumerate(zip(bench.noisy, bench.noisy_clean))]
    return build_pseudo_pairs(Denoiser.gaussian_blur() if denoiser_kind == "gaussian_blur" else Denoiser.load(denoiser_kind), bench.noisy)


def cmd_train(args, cfg) -> int:
    bench = load_benchmark(args.data)
    tcfg = _train_cfg(cfg, args)
    models = train_scoped(_pairs(bench, args.denoiser, args.oracle_clean), tcfg)
    out = Path(args.out)
    for k, m in enumerate(models.models):
        m.save(out / f"model-{k:03d}.ckpt")
    _write_json(out / "train.json", {"config": tcfg.to_dict(), "config_hash": config_io.config_hash(tcfg.to_dict()), "members": models.members, "final_loss": [h[-1] if h else None for h in models.histories]})
    print(f"trained {len(models.models)} Pseudo-ISP model(s) into {out}")
    return 0


def cmd_synthesize(args, cfg) -> int:
    model = PseudoIspModel.load(args.model)
    bench = load_benchmark(args.data)
    seeds = np.random.SeedSequence(args.seed or 0).generate_state(len(bench.clean))
    out = Path(args.out)
    for i, x in enumerate(bench.clean):
        pair = synthesize_noisy(model, x, int(seeds[i]), model_id=Path(args.model).name)
        write_png(out / f"synthetic-{i:03d}.png", pair.noisy)
    print(f"wrote {len(bench.clean)} synthetic noisy images to {out}")
    return 0


def cmd_adapt(args, cfg) -> int:
    bench = load_benchmark(args.data)
    acfg = _adapt_cfg(cfg, args)
    d0 = Denoiser.gaussian_blur() if args.denoiser == "gaussian_blur" else Denoiser.load(args.denoiser)
    out = Path(args.out)
    state = run_adaption(bench.noisy, bench.clean, d0, acfg, evaluator=make_evaluator(bench), run_dir=out)
    state.denoiser.save(out / "denoiser.ckpt")
    _write_json(out / "metrics.json", {"config_hash": config_io.config_hash(acfg.to_dict()), "seed": acfg.seed, "rounds": state.metrics, "psnr": state.metrics[-1]["psnr"], "ssim": state.metrics[-1]["ssim"]})
    print(f"adaption finished after {state.rounds_completed} round(s): PSNR {state.metrics[-1]['psnr']:.3f} dB")
    return 0


def cmd_evaluate(args, cfg) -> int:
    bench = load_benchmark(args.data)
    d = Denoiser.gaussian_blur() if args.denoiser == "gaussian_blur" else Denoiser.load(args.denoiser)
    m = evaluate_denoiser(d, bench.noisy, bench.noisy_clean)
    noisy = evaluate_denoiser(Denoiser.gaussian_blur(kernel_size=1), bench.noisy, bench.noisy_clean)
    _write_json(Path(args.out) / "metrics.json", {"denoiser": args.denoiser, **m, "noisy_input": noisy})
    print(f"PSNR {m['psnr']:.3f} dB  SSIM {m['ssim']:.4f}")
    return 0


def cmd_verify(args, cfg) -> int:
    # an element-wise map can only exist when the camera does not mix channels
    profile = _profile(cfg, args, default="elementwise")
    tcfg = dataclasses.replace(_train_cfg(cfg, args), sharing_scope="set")
    seed = args.seed or 0
    size = args.size or 128
    scenes = make_scenes(args.n_scenes or 6, size=size, seed=seed)
    shots = [capture(profile, s, seed + i) for i, s in enumerate(scenes)]
    pairs = [PseudoPair(s.noisy_srgb, s.clean_srgb, f"noisy-{i:03d}") for i, s in enumerate(shots)]
    model = train_scoped(pairs, tcfg).models[0]
    report, emap = verify_from_shots(profile, model, shots, seed)
    out = Path(args.out)
    report.save(out / "verification.json")
    save_map_panels(out, emap, shots[0].noisy_raw, shots[0].noisy_srgb, model)
    print(json.dumps(report.passed, sort_keys=True))
    return 0


def verify_from_shots(profile, model, shots, seed: int = 0, fit_patch: int = 64, heldout: int = 2):
    """Fit f on the top-left patch of the first shot; hold out the next patches."""
    sh = shots[0]
    p = fit_patch
    gt = pack_mosaic(sh.noisy_raw[:p, :p])
    ys = infer_noisy_packed(model, sh.noisy_srgb[:p, :p])
    emap = fit_elementwise_map(gt, ys, seed=seed)
    H, W = sh.noisy_raw.shape
    corners = [(r, c) for r in range(0, H - p + 1, p) for c in range(0, W - p + 1, p)][1 : 1 + heldout]
    held = [{"gt_raw": sh.noisy_raw[r : r + p, c : c + p], "noisy_srgb": sh.noisy_srgb[r : r + p, c : c + p]} for r, c in corners]
    report = verify_taylor_noise_model(profile, emap, model, [s.clean_srgb for s in shots], held)
    return report, emap


def cmd_experiment(args, cfg) -> int:
    d = dict(cfg.get("experiment", {}))
    d["adaption"] = _adapt_cfg(cfg, args)
    if args.axis:
        d["axis"] = args.axis
    if args.values:
        d["values"] = [float(v) if d.get("axis") == "r" else (int(v) if d.get("axis") == "t" else v) for v in args.values.split(",")]
    d["out_dir"] = args.out
    spec = ExperimentSpec.from_dict(d)
    report = run_experiment(spec)
    print((Path(args.out) / "table.txt").read_text(), end="")
    return 0 if report["rows"] else 2


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML or JSON config file")
    common.add_argument("--seed", type=int, default=None, help="master seed")
    common.add_argument("--paper-scale", action="store_true", help="use the full-size iteration schedule")
    common.add_argument("--out", metavar="DIR", default="out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="pseudoisp", description="Pseudo-ISP noise modeling and denoiser adaption on a simulated camera.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="write a simulated noisy/clean dataset")
    s.add_argument("--n-scenes", type=int)
    s.add_argument("--size", type=int)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train-pseudoisp", parents=[common], help="train Pseudo-ISP model(s) on a dataset")
    s.add_argument("--data", required=True, metavar="DIR")
    s.add_argument("--denoiser", default="gaussian_blur", help="gaussian_blur or a denoiser checkpoint")
    s.add_argument("--oracle-clean", action="store_true", help="use the simulator's clean images as pseudo clean")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("synthesize", parents=[common], help="synthesize noisy versions of a dataset's clean set")
    s.add_argument("--data", required=True, metavar="DIR")
    s.add_argument("--model", required=True, metavar="CKPT")
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("adapt", parents=[common], help="run the alternated adaption loop")
    s.add_argument("--data", required=True, metavar="DIR")
    s.add_argument("--denoiser", default="gaussian_blur", help="gaussian_blur or a denoiser checkpoint")
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("evaluate", parents=[common], help="PSNR/SSIM of a denoiser on a dataset's noisy set")
    s.add_argument("--data", required=True, metavar="DIR")
    s.add_argument("--denoiser", default="gaussian_blur")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("verify-assumptions", parents=[common], help="element-wise map and noise-level checks")
    s.add_argument("--n-scenes", type=int)
    s.add_argument("--size", type=int)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("experiment", parents=[common], help="ablation over one axis")
    s.add_argument("--axis", choices=AXES)
    s.add_argument("--values", help="comma-separated axis values")
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
        return args.func(args, cfg)
    except UsageError as exc:
        sys.stderr.write(f"pseudoisp: usage error: {exc}\n")
        return 1
    except (ValueError, KeyError) as exc:
        if isinstance(exc, ValueError) and "config" in str(exc):
            sys.stderr.write(f"pseudoisp: {exc}\n")
            return 1
        sys.stderr.write(f"pseudoisp: error: {exc}\n")
        return 2
    except Exception as exc:  # noqa: BLE001
        sys.stderr.write(f"pseudoisp: error: {type(exc).__name__}: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
