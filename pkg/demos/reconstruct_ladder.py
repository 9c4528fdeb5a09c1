"""Streak artifacts grow as views are removed.

Projects one lesioned head phantom with a dense 512-view scan, reconstructs
it by FBP from every rung of the halving ladder and prints the masked SSIM
against the dense reconstruction.  PGM snapshots land in ``demo_out/``.

    python3 demos/reconstruct_ladder.py
"""

from pathlib import Path

from sparsect.core import Rng, export_pgm
from sparsect.fbp import reconstruct
from sparsect.metrics import ssim
from sparsect.phantom import make_dataset
from sparsect.projector import ScanGeometry, radon_forward, subsample_views
from sparsect.tvdenoise import total_variation

N, REFERENCE = 128, 512
out = Path("demo_out")

sample = next(s for s in make_dataset(4, 0.5, N, Rng(7)) if s.label)
sino = radon_forward(sample.image, ScanGeometry.for_image(N, REFERENCE))
ref = reconstruct(sino, N)
export_pgm(ref, (0.2, 0.4), out / "fbp_512.pgm")

print(f"{'views':>6} {'ssim':>7} {'total variation':>16}")
print(f"{REFERENCE:>6} {1.0:7.4f} {total_variation(ref):16.2f}")
for views in (256, 128, 64, 32, 16):
    rec = reconstruct(subsample_views(sino, views), N)
    export_pgm(rec, (0.2, 0.4), out / f"fbp_{views}.pgm")
    print(f"{views:>6} {ssim(rec, ref, sample.skull_mask):7.4f} {total_variation(rec):16.2f}")
