"""Command-line entry point: ``sparsect <command> [--config FILE] [--seed N] [--out DIR]``.

Every command rebuilds the phantoms it needs from the config (generation
is deterministic and cheap at desk scale) and reads trained models and
selected TV weights from the output directory written by earlier
commands.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline as pl
from .core import save_raw, threads_from_env
from .models import build_detector, build_unet

COMMANDS = (
    "gen",
    "project",
    "recon",
    "tv-sweep",
    "train-unet",
    "train-detector",
    "eval-quality",
    "eval-detect",
    "saliency",
    "time",
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sparsect", description="Sparse-view CT simulation, post-processing and evaluation.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="JSON experiment config (defaults used when omitted)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=Path, help="output directory (overrides output_dir; default ./sparsect_out)")
    p.add_argument("--split", choices=("train", "val", "test"), help="restrict gen/project/recon to one split")
    return p


def load_config(args) -> pl.ExperimentConfig:
    cfg = pl.ExperimentConfig.from_json(args.config) if args.config else pl.ExperimentConfig()
    d = cfg.to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    if args.out is not None:
        d["output_dir"] = str(args.out)
    if d["output_dir"] is None:
        d["output_dir"] = "sparsect_out"
    return pl.ExperimentConfig.from_dict(d)


def _configure_threads():
    n = threads_from_env(1)
    try:
        import numba

        # the portable work-queue layer avoids probing TBB/OpenMP versions
        numba.config.THREADING_LAYER = "workqueue"
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except (ImportError, ValueError):
        pass
    return n


# ------------------------------------------------------------- persistence


def _tv_path(out: Path) -> Path:
    return out / "tv_weights.json"


def load_tv_weights(cfg, out: Path, required: bool):
    path = _tv_path(out)
    if not path.exists():
        if required:
            raise pl.MissingModelError(f"{path} not found; run `sparsect tv-sweep` first")
        return None
    return {int(k): float(v) for k, v in json.loads(path.read_text()).items()}


def load_unets(cfg, out: Path, views, required: bool):
    nets = {}
    for v in views:
        stem = out / "models" / f"unet_{v}"
        if not Path(f"{stem}.json").exists():
            if required:
                raise pl.MissingModelError(f"no U-Net checkpoint {stem}; run `sparsect train-unet` first")
            continue
        nets[v] = build_unet(cfg.unet_config()).load(stem)
    return nets or None


def load_detector(cfg, out: Path):
    stem = out / "models" / "detector"
    if cfg.ensemble_folds:
        members = []
        for k in range(cfg.ensemble_folds):
            path = Path(f"{stem}_fold{k}")
            if not Path(f"{path}.json").exists():
                raise pl.MissingModelError(f"missing ensemble member {path}; run `sparsect train-detector` first")
            members.append(build_detector(cfg.detector_config()).load(path))
        return pl.DetectorEnsemble(members)
    if not Path(f"{stem}.json").exists():
        raise pl.MissingModelError(f"no detector checkpoint {stem}; run `sparsect train-detector` first")
    return build_detector(cfg.detector_config()).load(stem)


# ---------------------------------------------------------------- commands


def _splits(args):
    return (args.split,) if args.split else ("train", "val", "test")


def cmd_gen(cfg, out, args):
    data = pl.generate_splits(cfg)
    data = {k: data[k] for k in _splits(args)}
    for name, path in pl.write_split_manifests(data, out / "data").items():
        print(f"{name}: {len(data[name].samples)} phantoms -> {path}")


def cmd_project(cfg, out, args):
    data = pl.generate_splits(cfg)
    for name in _splits(args):
        pl.simulate_split(data[name], cfg, sinogram_dir=out / "sinograms" / name)
        print(f"{name}: {len(data[name].samples)} sinograms ({cfg.reference_views} views) -> {out / 'sinograms' / name}")


def cmd_recon(cfg, out, args):
    data = pl.generate_splits(cfg)
    for name in _splits(args):
        split = pl.simulate_split(data[name], cfg)
        for v, stack in split.recon.items():
            d = out / "recon" / name / str(v)
            for sid, im in zip(split.ids, stack):
                save_raw(pl.Image2D(im), d / sid)
        print(f"{name}: reconstructions at {sorted(split.recon)} views -> {out / 'recon' / name}")


def cmd_tv_sweep(cfg, out, args):
    val = pl.prepare_data(cfg, ("val",))["val"]
    weights = pl.select_tv_weights(cfg, val, out_dir=out / "tv")
    _tv_path(out).parent.mkdir(parents=True, exist_ok=True)
    _tv_path(out).write_text(json.dumps({str(v): w for v, w in weights.items()}, indent=2))
    for v, w in weights.items():
        print(f"{v} views: weight {w:g}")


def cmd_train_unet(cfg, out, args):
    data = pl.prepare_data(cfg, ("train", "val"))
    _, logs = pl.train_unets(cfg, data["train"], data["val"], out_dir=out / "models")
    for v, log in logs.items():
        print(f"{v} views: final train loss {log[-1]['train_loss']:.6g}")


def cmd_train_detector(cfg, out, args):
    data = pl.prepare_data(cfg, ("train", "val"))
    _, logs = pl.train_detector_stage(cfg, data["train"], data["val"], out_dir=out / "models")
    best = min(min(r["val_loss"] for r in log) for log in logs)
    print(f"detector trained; best validation loss {best:.6g}")


def cmd_eval_quality(cfg, out, args):
    tv = load_tv_weights(cfg, out, "tv" in cfg.methods)
    unets = load_unets(cfg, out, cfg.views, "unet" in cfg.methods)
    test = pl.prepare_data(cfg, ("test",))["test"]
    report = pl.run_quality_experiment(cfg, test, tv, unets, out_dir=out / "reports")
    for r in report["rows"]:
        print(f"{r['views']:>5} {r['method']:<5} ssim {r['ssim']['mean']:.4f}")


def cmd_eval_detect(cfg, out, args):
    tv = load_tv_weights(cfg, out, "tv" in cfg.methods)
    unets = load_unets(cfg, out, cfg.views, "unet" in cfg.methods)
    det = load_detector(cfg, out)
    test = pl.prepare_data(cfg, ("test",))["test"]
    report = pl.run_detection_experiment(cfg, test, det, tv, unets, out_dir=out / "reports")
    for c in report["cells"]:
        print(f"{c['views']:>5} {c['method']:<5} auc {c['auc']:.4f} [{c['ci_lo']:.4f}, {c['ci_hi']:.4f}]")


def cmd_saliency(cfg, out, args):
    det = load_detector(cfg, out)
    unets = load_unets(cfg, out, (cfg.sparsest,), False)
    test = pl.prepare_data(cfg, ("test",))["test"]
    report = pl.run_saliency_experiment(cfg, test, det, unets, out_dir=out / "reports")
    for m, v in report["mean"].items():
        print(f"{m}: mean ratio {v:.4g}")
    if report.get("wilcoxon", {}).get("p") is not None:
        print(f"wilcoxon p = {report['wilcoxon']['p']:.4g}")


def cmd_time(cfg, out, args):
    tv = load_tv_weights(cfg, out, "tv" in cfg.methods)
    unets = load_unets(cfg, out, cfg.views, "unet" in cfg.methods)
    split = pl.generate_splits(cfg)["test"]
    geom = pl.ScanGeometry.for_image(cfg.size, cfg.reference_views)
    sinos = [pl.radon_forward(s.image, geom) for s in split.samples[: cfg.timing_images]]
    report = pl.run_timing_harness(cfg, sinos, tv, unets, out_dir=out / "reports")
    for r in report["rows"]:
        print(f"{r['views']:>5} {r['method']:<5} {r['seconds']['mean'] * 1e3:.3f} ms/image")


HANDLERS = {
    "gen": cmd_gen,
    "project": cmd_project,
    "recon": cmd_recon,
    "tv-sweep": cmd_tv_sweep,
    "train-unet": cmd_train_unet,
    "train-detector": cmd_train_detector,
    "eval-quality": cmd_eval_quality,
    "eval-detect": cmd_eval_detect,
    "saliency": cmd_saliency,
    "time": cmd_time,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args)
    except (UsageError, pl.ConfigError) as exc:
        print(f"sparsect: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _configure_threads()
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](cfg, out, args)
    except pl.ConfigError as exc:
        print(f"sparsect: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"sparsect: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
