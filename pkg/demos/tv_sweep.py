"""Pick a TV weight by SSIM sweep and compare TV against raw FBP.

    python3 demos/tv_sweep.py
"""

import numpy as np

from sparsect.core import Rng
from sparsect.fbp import reconstruct
from sparsect.metrics import ssim
from sparsect.phantom import make_dataset
from sparsect.projector import ScanGeometry, radon_forward, subsample_views
from sparsect.tvdenoise import TvParams, tv_denoise, tv_weight_sweep

N, REFERENCE, VIEWS = 64, 512, 32
geom = ScanGeometry.for_image(N, REFERENCE)


def pairs(samples):
    out = []
    for s in samples:
        sino = radon_forward(s.image, geom)
        out.append((reconstruct(subsample_views(sino, VIEWS), N), reconstruct(sino, N), s.skull_mask))
    return out


tune = pairs(make_dataset(10, 0.5, N, Rng(1)))
held_out = pairs(make_dataset(10, 0.5, N, Rng(2)))

best, (weights, scores) = tv_weight_sweep(tune, (0.005, 0.3, 0.005))
for w, s in list(zip(weights, scores))[::6]:
    print(f"weight {w:6.3f}  mean ssim {s:.4f}")
print(f"selected weight {best:g}")

fbp = np.mean([ssim(x, ref, m) for x, ref, m in held_out])
tv = np.mean([ssim(tv_denoise(x, TvParams(best)), ref, m) for x, ref, m in held_out])
print(f"held-out mean ssim at {VIEWS} views: fbp {fbp:.4f}, tv {tv:.4f}")
