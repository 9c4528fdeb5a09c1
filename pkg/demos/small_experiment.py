"""A shrunken end-to-end run: TV sweep, U-Net, detector, quality and detection reports.

Uses half the desk-scale dataset, two view counts and short U-Net
training so it finishes in several minutes; the numbers are noisier than
the defaults but the pipeline is the same one the CLI drives.

    python3 demos/small_experiment.py
"""

from pathlib import Path

from sparsect.pipeline import (
    ExperimentConfig,
    prepare_data,
    run_detection_experiment,
    run_quality_experiment,
    run_saliency_experiment,
    select_tv_weights,
    train_detector_stage,
    train_unets,
)

cfg = ExperimentConfig(
    views=(64, 16),
    n_train=200,
    n_val=50,
    n_test=60,
    unet_pairs=200,
    unet_epochs=10,
    det_epochs=60,
    saliency_samples=30,
)
out = Path("demo_out/small")

data = prepare_data(cfg)
tv = select_tv_weights(cfg, data["val"])
unets, _ = train_unets(cfg, data["train"], data["val"], out_dir=out / "models")
det, _ = train_detector_stage(cfg, data["train"], data["val"], out_dir=out / "models")

quality = run_quality_experiment(cfg, data["test"], tv, unets, out_dir=out / "reports")
for r in quality["rows"]:
    s = r["ssim"]
    print(f"{r['views']:>4} {r['method']:<5} ssim {s['mean']:.4f} [{s['ci_lo']:.4f}, {s['ci_hi']:.4f}]")

detection = run_detection_experiment(cfg, data["test"], det, tv, unets, out_dir=out / "reports")
for c in detection["cells"]:
    print(f"{c['views']:>4} {c['method']:<5} auc {c['auc']:.3f}")

saliency = run_saliency_experiment(cfg, data["test"], det, unets, out_dir=out / "reports")
print("saliency mean ratio", {m: round(v, 4) for m, v in saliency["mean"].items()})
