"""Data preparation helpers and the end-to-end experiment orchestrator.

The orchestrator works at any scale; the defaults are the desk-scale
setting (64 x 64 phantoms, a 512-view dense reference and the halving
ladder 256 ... 16).  Every stage draws from its own child stream of the
config seed, so reports are reproducible bit for bit at one thread.

Reports are plain dicts that validate against the JSON schemas shipped in
``sparsect/schemas``.  Infinite metric values (self-reference PSNR/SNR)
are written to JSON as the strings ``"inf"`` / ``"-inf"``.
"""

from __future__ import annotations

import gc
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .core import Image2D, Rng, as_array
from .fbp import reconstruct
from .metrics import psnr, snr, ssim, write_metric_rows
from .models import (
    DetectorConfig,
    UNetConfig,
    build_detector,
    build_unet,
    saliency_map,
    saliency_ratio,
    train_detector,
    train_unet,
    write_training_log,
)
from .nn import LrSchedule
from .phantom import make_dataset, write_manifest
from .projector import ScanGeometry, radon_forward, save_sinogram, subsample_views
from .stats import (
    bonferroni,
    bootstrap_mean_ci,
    delong_analysis,
    delong_test,
    gmean_threshold,
    kfold_split,
    roc_curve,
    wald_ci,
    wilcoxon_signed_rank,
)
from .tvdenoise import TvParams, tv_denoise, tv_denoise_stack, tv_weight_sweep, write_sweep_csv

__all__ = [
    "ConfigError",
    "MissingModelError",
    "ExperimentConfig",
    "window_hu",
    "normalize_12bit",
    "bilinear_resize",
    "dose_reduction",
    "SplitData",
    "generate_splits",
    "simulate_split",
    "prepare_data",
    "select_tv_weights",
    "train_unets",
    "train_detector_stage",
    "DetectorEnsemble",
    "detector_input",
    "run_quality_experiment",
    "run_detection_experiment",
    "run_saliency_experiment",
    "run_timing_harness",
    "load_schema",
    "manifest_ids",
    "write_split_manifests",
    "validate_report",
    "write_report",
]

METHODS = ("fbp", "tv", "unet")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class MissingModelError(RuntimeError):
    """A method needs a trained model that is not available."""


# ------------------------------------------------------------ preprocessing


def window_hu(image, lo: float = 0.0, hi: float = 80.0) -> Image2D:
    """Clamp to ``[lo, hi]`` and map affinely onto ``[0, 1]``."""
    if not lo < hi:
        raise ValueError(f"window needs lo < hi, got ({lo}, {hi})")
    x = np.clip(as_array(image), lo, hi)
    return Image2D((x - lo) / (hi - lo), (0.0, 1.0))


def normalize_12bit(image) -> Image2D:
    """Clamp to the 12-bit range ``[0, 4095]`` and divide by 4095."""
    return Image2D(np.clip(as_array(image), 0.0, 4095.0) / 4095.0, (0.0, 1.0))


def _axis_coords(n_in: int, n_out: int) -> np.ndarray:
    # corner-aligned: first and last output samples hit the first and last input pixels
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def bilinear_resize(image, out_w: int, out_h: int) -> Image2D:
    """Bilinear interpolation with corner-aligned sampling.

    A single output row or column samples the centre of the input.
    """
    if out_w < 1 or out_h < 1:
        raise ValueError("output dimensions must be >= 1")
    x = as_array(image)
    h, w = x.shape
    r = _axis_coords(h, out_h)
    c = _axis_coords(w, out_w)
    r0 = np.clip(np.floor(r).astype(int), 0, max(h - 2, 0))
    c0 = np.clip(np.floor(c).astype(int), 0, max(w - 2, 0))
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (r - r0)[:, None]
    fc = (c - c0)[None, :]
    top = x[r0][:, c0] * (1 - fc) + x[r0][:, c1] * fc
    bottom = x[r1][:, c0] * (1 - fc) + x[r1][:, c1] * fc
    out = top * (1 - fr) + bottom * fr
    if isinstance(image, Image2D):
        return image.with_data(out)
    return Image2D(out)


def dose_reduction(views: int, reference_views: int = 4096) -> float:
    """Fractional dose saved by acquiring ``views`` instead of ``reference_views``."""
    if not 0 < views <= reference_views:
        raise ValueError(f"need 0 < views <= {reference_views}, got {views}")
    return 1.0 - views / reference_views


# ------------------------------------------------------------------- config


@dataclass
class ExperimentConfig:
    """Every knob of the experiment loops.  ``from_dict`` rejects unknown keys."""

    size: int = 64
    reference_views: int = 512
    views: tuple[int, ...] = (256, 128, 64, 32, 16)
    methods: tuple[str, ...] = METHODS
    n_train: int = 400
    n_val: int = 100
    n_test: int = 100
    lesion_fraction: float = 0.5
    lesion_contrast: tuple[float, float] = (0.05, 0.1)
    seed: int = 0
    # TV weight sweep on the first ``tv_pairs`` validation images
    tv_grid: tuple[float, float, float] = (0.001, 0.3, 0.001)
    tv_pairs: int = 20
    tv_max_iter: int = 200
    tv_eps: float = 2e-4
    # U-Net
    unet_base_channels: int = 8
    unet_depth: int = 3
    unet_views: tuple[int, ...] | None = None
    unet_pairs: int = 400
    unet_epochs: int = 30
    unet_batch: int = 2
    unet_lr: float = 5e-3
    unet_patch: int | None = None
    # detector
    det_channels: tuple[int, ...] = (8, 16, 32, 32)
    det_input_size: int | None = None
    det_window: tuple[float, float] = (0.2, 0.4)
    det_epochs: int = 60
    det_batch: int = 16
    det_lr: float = 2e-3
    det_min_lr: float = 1e-5
    det_restarts: tuple[int, ...] = (1, 3, 7)
    ensemble_folds: int = 0
    # evaluation
    alpha: float = 0.001
    n_bootstrap: int = 1000
    saliency_samples: int = 50
    timing_images: int = 20
    timing_repeats: int = 5
    timing_warmup: int = 2
    output_dir: str | None = None

    def __post_init__(self):
        for name in ("views", "methods", "lesion_contrast", "tv_grid", "det_channels", "det_window", "det_restarts"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.unet_views is not None:
            self.unet_views = tuple(int(v) for v in self.unet_views)
        self.validate()

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.size >= 8, "size must be >= 8")
        need(self.reference_views >= 1, "reference_views must be positive")
        need(len(self.views) > 0, "views must not be empty")
        for v in self.views:
            need(isinstance(v, (int, np.integer)) and v > 0, f"invalid view count {v!r}")
            need(self.reference_views % v == 0, f"view count {v} does not divide {self.reference_views}")
            need(v < self.reference_views, f"view count {v} must be below the reference {self.reference_views}")
        need(len(set(self.views)) == len(self.views), "duplicate view counts")
        need(set(self.methods) <= set(METHODS) and self.methods, f"methods must be a non-empty subset of {METHODS}")
        need("fbp" in self.methods, "methods must include fbp")
        need(min(self.n_train, self.n_val, self.n_test) >= 1, "dataset sizes must be positive")
        need(0.0 <= self.lesion_fraction <= 1.0, "lesion_fraction must lie in [0, 1]")
        need(len(self.lesion_contrast) == 2 and 0 < self.lesion_contrast[0] <= self.lesion_contrast[1],
             "lesion_contrast must be (lo, hi) with 0 < lo <= hi")
        need(len(self.tv_grid) == 3 and 0 < self.tv_grid[0] <= self.tv_grid[1] and self.tv_grid[2] > 0,
             "tv_grid must be (lo, hi, step)")
        need(1 <= self.tv_pairs <= self.n_val, "tv_pairs must lie in [1, n_val]")
        need(1 <= self.unet_pairs <= self.n_train, "unet_pairs must lie in [1, n_train]")
        for v in self.unet_views or ():
            need(v in self.views, f"unet view count {v} is not in views")
        need(self.unet_epochs >= 1 and self.unet_batch >= 1 and self.unet_lr > 0, "invalid U-Net training settings")
        need(self.det_epochs >= 1 and self.det_batch >= 1 and self.det_lr > self.det_min_lr >= 0,
             "invalid detector training settings")
        need(self.det_window[0] < self.det_window[1], "det_window needs lo < hi")
        need(self.ensemble_folds == 0 or self.ensemble_folds >= 2, "ensemble_folds must be 0 or >= 2")
        need(0 < self.alpha < 1, "alpha must lie in (0, 1)")
        need(self.n_bootstrap >= 1, "n_bootstrap must be positive")
        need(self.saliency_samples >= 1, "saliency_samples must be positive")
        need(self.timing_images >= 1 and self.timing_repeats >= 1 and self.timing_warmup >= 0,
             "invalid timing settings")
        try:
            self.unet_config()
            self.detector_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @property
    def sparsest(self) -> int:
        return min(self.views)

    @property
    def trained_views(self) -> tuple[int, ...]:
        return self.unet_views if self.unet_views is not None else self.views

    def unet_config(self) -> UNetConfig:
        return UNetConfig(self.size, self.unet_base_channels, self.unet_depth)

    def detector_config(self) -> DetectorConfig:
        return DetectorConfig(self.det_input_size or self.size, self.det_channels)

    def stage_rng(self, stage: str) -> Rng:
        """Child stream for a named stage, independent of which other stages run."""
        names = ["train", "val", "test", "unet_init", "unet_train", "det_init", "det_train", "bootstrap", "folds"]
        return Rng(int(Rng(self.seed).random_u64(len(names))[names.index(stage)]))


# --------------------------------------------------------------------- data


@dataclass
class SplitData:
    """Samples of one split with their reconstructions at every view count (reference included)."""

    name: str
    samples: list
    recon: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def ids(self) -> list[str]:
        return [f"{self.name}_{i:05d}" for i in range(len(self.samples))]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=bool)

    @property
    def masks(self) -> list[np.ndarray]:
        return [s.skull_mask.data for s in self.samples]

    def seeds(self) -> list[int]:
        return [int(s.meta["seed"]) for s in self.samples]


def generate_splits(cfg: ExperimentConfig) -> dict[str, SplitData]:
    """Train/val/test phantoms from disjoint seed streams."""
    out = {}
    for name, n in (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)):
        samples = make_dataset(n, cfg.lesion_fraction, cfg.size, cfg.stage_rng(name), contrast=cfg.lesion_contrast)
        out[name] = SplitData(name, samples)
    seen = set()
    for split in out.values():
        seeds = set(split.seeds())
        if seeds & seen or len(seeds) != len(split.samples):
            raise RuntimeError("phantom seed collision between splits")
        seen |= seeds
    return out


def simulate_split(split: SplitData, cfg: ExperimentConfig, sinogram_dir=None) -> SplitData:
    """Dense sinogram per phantom, then FBP at the reference and every sparse view count."""
    geom = ScanGeometry.for_image(cfg.size, cfg.reference_views)
    counts = (cfg.reference_views,) + tuple(cfg.views)
    recon = {v: np.empty((len(split.samples), cfg.size, cfg.size)) for v in counts}
    for i, s in enumerate(split.samples):
        sino = radon_forward(s.image, geom)
        if sinogram_dir is not None:
            save_sinogram(sino, Path(sinogram_dir) / split.ids[i])
        recon[cfg.reference_views][i] = reconstruct(sino, cfg.size).data
        for v in cfg.views:
            recon[v][i] = reconstruct(subsample_views(sino, v), cfg.size).data
    split.recon = recon
    return split


def prepare_data(cfg: ExperimentConfig, splits=("train", "val", "test")) -> dict[str, SplitData]:
    data = generate_splits(cfg)
    return {name: simulate_split(data[name], cfg) for name in splits}


def manifest_ids(data: dict[str, SplitData]) -> dict[str, list[str]]:
    return {name: split.ids for name, split in data.items()}


# ------------------------------------------------------------------- stages


def select_tv_weights(cfg: ExperimentConfig, val: SplitData, out_dir=None) -> dict[int, float]:
    """Sweep-selected TV weight per view count, scored on validation pairs."""
    ref = val.recon[cfg.reference_views]
    weights = {}
    for v in cfg.views:
        pairs = [(val.recon[v][i], ref[i], val.masks[i]) for i in range(cfg.tv_pairs)]
        best, curve = tv_weight_sweep(pairs, cfg.tv_grid, cfg.tv_max_iter, cfg.tv_eps)
        weights[v] = best
        if out_dir is not None:
            write_sweep_csv(curve, Path(out_dir) / f"tv_sweep_{v}.csv")
    return weights


def train_unets(cfg: ExperimentConfig, train: SplitData, val: SplitData | None = None, views=None, out_dir=None):
    """One U-Net per view count, trained on ``(sparse FBP, reference)`` pairs."""
    nets, logs = {}, {}
    ref = train.recon[cfg.reference_views]
    for v in views if views is not None else cfg.trained_views:
        net = build_unet(cfg.unet_config(), cfg.stage_rng("unet_init"))
        pairs = [(train.recon[v][i], ref[i]) for i in range(cfg.unet_pairs)]
        val_pairs = None
        if val is not None:
            val_pairs = [(val.recon[v][i], val.recon[cfg.reference_views][i]) for i in range(min(20, len(val.samples)))]
        log = train_unet(
            net,
            pairs,
            cfg.unet_epochs,
            cfg.unet_batch,
            cfg.stage_rng("unet_train"),
            patch_size=cfg.unet_patch,
            schedule=LrSchedule.reciprocal(cfg.unet_lr),
            val_pairs=val_pairs,
        )
        nets[v], logs[v] = net, log
        if out_dir is not None:
            net.save(Path(out_dir) / f"unet_{v}")
            write_training_log(log, Path(out_dir) / f"unet_{v}_log.csv")
    return nets, logs


def detector_input(images, cfg: ExperimentConfig) -> np.ndarray:
    """Window, (if needed) resize, then centre a ``(n, h, w)`` stack for the detector.

    The window maps onto ``[-1, 1]`` rather than ``[0, 1]``; with uncentred
    inputs the small detector does not pick up the faint lesions.
    """
    lo, hi = cfg.det_window
    target = cfg.det_input_size or cfg.size
    out = []
    for im in np.asarray(images, dtype=np.float64):
        x = window_hu(im, lo, hi)
        if x.shape != (target, target):
            x = bilinear_resize(x, target, target)
        out.append(2.0 * x.data - 1.0)
    return np.stack(out)


def _resize_mask(mask: np.ndarray, target: int) -> np.ndarray:
    if mask.shape == (target, target):
        return mask
    return bilinear_resize(mask.astype(float), target, target).data >= 0.5


class DetectorEnsemble:
    """Arithmetic mean of member probabilities; saliency uses the mean logit."""

    def __init__(self, members):
        self.members = list(members)

    def predict_proba(self, images) -> np.ndarray:
        return np.mean([m.predict_proba(images) for m in self.members], axis=0)

    def forward(self, x):
        return np.mean([m.forward(x) for m in self.members], axis=0)

    def backward(self, g):
        grads = [m.backward(g) for m in self.members]
        return np.mean(grads, axis=0)

    def save(self, path):
        for k, m in enumerate(self.members):
            m.save(f"{path}_fold{k}")


def train_detector_stage(cfg: ExperimentConfig, train: SplitData, val: SplitData, out_dir=None):
    """Train on full-view (reference) reconstructions; optional k-fold ensemble over train + val."""
    schedule = LrSchedule.cosine(cfg.det_lr, cfg.det_min_lr, cfg.det_restarts)
    rng = cfg.stage_rng("det_train")
    x_train = detector_input(train.recon[cfg.reference_views], cfg)
    x_val = detector_input(val.recon[cfg.reference_views], cfg)
    if cfg.ensemble_folds:
        x = np.concatenate([x_train, x_val])
        y = np.concatenate([train.labels, val.labels])
        members, logs = [], []
        for tr, va in kfold_split(len(x), cfg.ensemble_folds, cfg.stage_rng("folds")):
            net = build_detector(cfg.detector_config(), cfg.stage_rng("det_init"))
            net, log = train_detector(net, (x[tr], y[tr]), cfg.det_epochs, cfg.det_batch, rng,
                                      val=(x[va], y[va]), schedule=schedule)
            members.append(net)
            logs.append(log)
        det = DetectorEnsemble(members)
    else:
        net = build_detector(cfg.detector_config(), cfg.stage_rng("det_init"))
        det, log = train_detector(net, (x_train, train.labels), cfg.det_epochs, cfg.det_batch, rng,
                                  val=(x_val, val.labels), schedule=schedule)
        logs = [log]
    if out_dir is not None:
        det.save(Path(out_dir) / "detector")
        for k, log in enumerate(logs):
            write_training_log(log, Path(out_dir) / f"detector_log{k}.csv")
    return det, logs


# ---------------------------------------------------------------- evaluation


def _processed(method, views, images, tv_weights, unets, cfg):
    if method == "fbp":
        return images
    if method == "tv":
        if views not in tv_weights:
            raise MissingModelError(f"no TV weight selected for {views} views")
        return tv_denoise_stack(images, TvParams(tv_weights[views], cfg.tv_max_iter, cfg.tv_eps))
    if method == "unet":
        if unets is None or views not in unets:
            raise MissingModelError(f"no trained U-Net for {views} views")
        return unets[views].predict(images)
    raise ValueError(f"unknown method {method!r}")


def _cell(values, rng, n_resamples) -> dict:
    """``n``, point estimate and bootstrap CI; infinite sentinels pass through unchanged."""
    x = np.asarray(values, dtype=np.float64)
    if np.all(np.isfinite(x)):
        m, lo, hi = bootstrap_mean_ci(x, n_resamples, rng=rng)
    elif np.all(x == x[0]):
        m = lo = hi = float(x[0])
    else:
        idx = rng.integers(x.size, size=(n_resamples, x.size))
        means = x[idx].mean(axis=1)
        m = float(x.mean())
        lo, hi = (float(q) for q in np.percentile(means, [2.5, 97.5], method="nearest"))
    return {"n": int(x.size), "mean": m, "ci_lo": lo, "ci_hi": hi}


def run_quality_experiment(cfg: ExperimentConfig, test: SplitData, tv_weights=None, unets=None, out_dir=None) -> dict:
    """SSIM/PSNR/SNR vs the dense reference per (views, method), with CIs and Wilcoxon tests."""
    if "unet" in cfg.methods:
        missing = [v for v in cfg.views if unets is None or v not in unets]
        if missing:
            raise MissingModelError(f"method unet needs trained U-Nets for views {missing}")
    if "tv" in cfg.methods and (tv_weights is None or any(v not in tv_weights for v in cfg.views)):
        raise MissingModelError("method tv needs a selected weight for every view count")
    rng = cfg.stage_rng("bootstrap")
    ref = test.recon[cfg.reference_views]
    masks = test.masks
    ids = test.ids
    per_image = []
    values = {}

    def score(views, method, images):
        vals = {"ssim": [], "psnr": [], "snr": []}
        for i, im in enumerate(images):
            row = {
                "image_id": ids[i],
                "views": views,
                "method": method,
                "ssim": ssim(im, ref[i], masks[i]),
                "psnr": psnr(im, ref[i], masks[i]),
                "snr": snr(im, ref[i], masks[i]),
            }
            per_image.append(row)
            for k in vals:
                vals[k].append(row[k])
        values[(views, method)] = {k: np.array(v) for k, v in vals.items()}

    score(cfg.reference_views, "fbp", ref)
    for v in cfg.views:
        for method in cfg.methods:
            score(v, method, _processed(method, v, test.recon[v], tv_weights, unets, cfg))

    rows = []
    for (v, method), vals in values.items():
        row = {"views": v, "method": method, "dose_reduction": dose_reduction(v, cfg.reference_views)}
        for k in ("ssim", "psnr", "snr"):
            row[k] = _cell(vals[k], rng, cfg.n_bootstrap)
        rows.append(row)

    tests = []
    alpha = bonferroni(cfg.alpha, 3)
    pairs = [(a, b) for i, a in enumerate(cfg.methods) for b in cfg.methods[i + 1 :]]
    for v in cfg.views:
        for a, b in pairs:
            for k in ("ssim", "psnr", "snr"):
                entry = {"views": v, "metric": k, "a": a, "b": b, "alpha": alpha}
                try:
                    w, p = wilcoxon_signed_rank(values[(v, a)][k], values[(v, b)][k])
                    entry.update(w=w, p=p, significant=bool(p < alpha))
                except ValueError as exc:
                    entry.update(w=None, p=None, significant=False, note=str(exc))
                tests.append(entry)

    report = {
        "kind": "quality",
        "config": cfg.to_dict(),
        "reference_views": cfg.reference_views,
        "tv_weights": {str(v): w for v, w in (tv_weights or {}).items()},
        "rows": rows,
        "tests": tests,
        "per_image": per_image,
    }
    if out_dir is not None:
        write_metric_rows(per_image, Path(out_dir) / "quality_rows.csv")
        _write_quality_table(rows, Path(out_dir) / "quality_table.csv")
        write_report(report, Path(out_dir) / "quality.json")
    return report


def _write_quality_table(rows, path):
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["views,method,dose_reduction,metric,n,mean,ci_lo,ci_hi"]
    for r in rows:
        for k in ("ssim", "psnr", "snr"):
            c = r[k]
            lines.append(f"{r['views']},{r['method']},{r['dose_reduction']},{k},{c['n']},{c['mean']},{c['ci_lo']},{c['ci_hi']}")
    path.write_text("\n".join(lines) + "\n")


def _scores(det, images) -> np.ndarray:
    return np.asarray(det.predict_proba(images), dtype=np.float64)


def run_detection_experiment(cfg: ExperimentConfig, test: SplitData, detector, tv_weights=None, unets=None, out_dir=None) -> dict:
    """AUC with Wald CI per (views, method), DeLong p-value grid and g-mean confusion matrices."""
    if detector is None:
        raise MissingModelError("detection needs a trained detector")
    labels = test.labels
    if labels.all() or not labels.any():
        raise ValueError("test split needs both classes")
    scores = {("full", cfg.reference_views): _scores(detector, detector_input(test.recon[cfg.reference_views], cfg))}
    for v in cfg.views:
        for method in cfg.methods:
            images = _processed(method, v, test.recon[v], tv_weights, unets, cfg)
            scores[(method, v)] = _scores(detector, detector_input(images, cfg))

    cells, analyses = [], {}
    for (method, v), s in scores.items():
        r = delong_analysis(s, labels)
        analyses[(method, v)] = r
        lo, hi = wald_ci(r)
        thr, cm = gmean_threshold(s, labels)
        cells.append(
            {
                "views": v,
                "method": method,
                "n": int(labels.size),
                "auc": r.auc,
                "ci_lo": lo,
                "ci_hi": hi,
                "variance": r.variance,
                "confusion": cm.as_dict(),
                "roc": [list(p) for p in roc_curve(s, labels)],
            }
        )

    p_values = []
    full = scores[("full", cfg.reference_views)]
    pairs = [(a, b) for i, a in enumerate(cfg.methods) for b in cfg.methods[i + 1 :]]
    for v in cfg.views:
        comparisons = [("full", m, bonferroni(cfg.alpha, 6)) for m in cfg.methods]
        comparisons += [(a, b, bonferroni(cfg.alpha, 3)) for a, b in pairs]
        for a, b, alpha in comparisons:
            sa = full if a == "full" else scores[(a, v)]
            z, p = delong_test(sa, scores[(b, v)], labels)
            p_values.append({"views": v, "a": a, "b": b, "z": z, "p": p, "alpha": alpha, "significant": bool(p < alpha)})

    series = {m: [[v, analyses[(m, v)].auc] for v in sorted(cfg.views)] for m in cfg.methods}
    report = {
        "kind": "detection",
        "config": cfg.to_dict(),
        "cells": cells,
        "p_values": p_values,
        "auc_series": series,
        "scores": {f"{m}_{v}": s.tolist() for (m, v), s in scores.items()},
        "labels": labels.astype(int).tolist(),
    }
    if out_dir is not None:
        write_report(report, Path(out_dir) / "detection.json")
        _write_auc_table(cells, Path(out_dir) / "detection_auc.csv")
    return report


def _write_auc_table(cells, path):
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["views,method,n,auc,ci_lo,ci_hi,threshold,tp,fp,fn,tn"]
    for c in cells:
        m = c["confusion"]
        lines.append(
            f"{c['views']},{c['method']},{c['n']},{c['auc']},{c['ci_lo']},{c['ci_hi']},"
            f"{m['threshold']},{m['tp']},{m['fp']},{m['fn']},{m['tn']}"
        )
    path.write_text("\n".join(lines) + "\n")


def run_saliency_experiment(cfg: ExperimentConfig, test: SplitData, detector, unets=None, views=None, out_dir=None) -> dict:
    """Saliency in/out-lesion ratio on lesioned test phantoms, raw FBP vs U-Net-processed."""
    views = cfg.sparsest if views is None else views
    pos = np.flatnonzero(test.labels)[: cfg.saliency_samples]
    if pos.size == 0:
        raise ValueError("saliency needs lesioned test phantoms")
    target = cfg.det_input_size or cfg.size
    images = {"fbp": test.recon[views][pos]}
    if unets is not None and views in unets:
        images["unet"] = unets[views].predict(images["fbp"])
    ratios = {}
    for method, stack in images.items():
        x = detector_input(stack, cfg)
        ratios[method] = np.array(
            [saliency_ratio(saliency_map(detector, x[k]), _resize_mask(test.samples[i].lesion_mask.data, target))
             for k, i in enumerate(pos)]
        )
    report = {
        "kind": "saliency",
        "config": cfg.to_dict(),
        "views": views,
        "ids": [test.ids[i] for i in pos],
        "ratios": {m: r.tolist() for m, r in ratios.items()},
        "mean": {m: float(np.mean(r)) for m, r in ratios.items()},
    }
    if "unet" in ratios:
        try:
            w, p = wilcoxon_signed_rank(ratios["unet"], ratios["fbp"])
            report["wilcoxon"] = {"a": "unet", "b": "fbp", "w": w, "p": p}
        except ValueError as exc:
            report["wilcoxon"] = {"a": "unet", "b": "fbp", "w": None, "p": None, "note": str(exc)}
    if out_dir is not None:
        write_report(report, Path(out_dir) / "saliency.json")
    return report


def run_timing_harness(cfg: ExperimentConfig, sinograms, tv_weights=None, unets=None, methods=None, views=None, out_dir=None) -> dict:
    """Per-image wall-clock time per (views, method).

    ``sinograms`` is a list of dense sinograms.  FBP time covers
    reconstruction from the subsampled sinogram; TV and U-Net times cover
    only the post-processing of the FBP image.  The first
    ``timing_warmup`` calls per cell are discarded, then repeats are
    interleaved across cells with garbage collection paused.
    """
    methods = tuple(methods or cfg.methods)
    views = tuple(views or cfg.views)
    rng = cfg.stage_rng("bootstrap")
    images = list(sinograms)[: cfg.timing_images]
    if not images:
        raise ValueError("timing needs at least one sinogram")
    cells = []
    for v in views:
        sparse = [subsample_views(s, v) for s in images]
        recon = [reconstruct(s, cfg.size).data for s in sparse]
        for method in methods:
            if method == "fbp":
                call = lambda k, sparse=sparse: reconstruct(sparse[k], cfg.size)  # noqa: E731
            elif method == "tv":
                if tv_weights is None or v not in tv_weights:
                    raise MissingModelError(f"no TV weight selected for {v} views")
                params = TvParams(tv_weights[v], cfg.tv_max_iter, cfg.tv_eps)
                call = lambda k, recon=recon, params=params: tv_denoise(recon[k], params)  # noqa: E731
            elif method == "unet":
                if unets is None or v not in unets:
                    raise MissingModelError(f"no trained U-Net for {v} views")
                call = lambda k, recon=recon, net=unets[v]: net.predict(recon[k][None])  # noqa: E731
            else:
                raise ValueError(f"unknown method {method!r}")
            cells.append((v, method, call, []))
    for _, _, call, _ in cells:
        for _ in range(cfg.timing_warmup):
            call(0)
    # Repeats go round-robin over cells so slow drift in process state
    # (allocator, caches) is shared by every cell instead of biasing one.
    gc.collect()
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(cfg.timing_repeats):
            for _, _, call, per_image in cells:
                for k in range(len(images)):
                    t0 = time.perf_counter()
                    call(k)
                    per_image.append(time.perf_counter() - t0)
    finally:
        if was_enabled:
            gc.enable()
    rows = []
    for v, method, _, per_image in cells:
        row = {"views": v, "method": method, "n_images": len(images), "repeats": cfg.timing_repeats}
        row["seconds"] = _cell(per_image, rng, cfg.n_bootstrap)
        rows.append(row)
    report = {"kind": "timing", "config": cfg.to_dict(), "rows": rows}
    if out_dir is not None:
        write_report(report, Path(out_dir) / "timing.json")
    return report


# ------------------------------------------------------------------ reports


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        if math.isnan(x):
            return None
        return x
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    return x


def load_schema(kind: str) -> dict:
    text = resources.files("sparsect").joinpath("schemas", f"{kind}.schema.json").read_text()
    return json.loads(text)


def validate_report(report: dict) -> dict:
    """Validate the JSON form of ``report`` against its schema; returns the JSON form."""
    doc = _jsonable(report)
    jsonschema.validate(doc, load_schema(report["kind"]))
    return doc


def write_report(report: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(validate_report(report), indent=2))
    return path


def write_split_manifests(data: dict[str, SplitData], out_dir) -> dict[str, Path]:
    return {name: write_manifest(split.samples, Path(out_dir) / name, prefix=name) for name, split in data.items()}

