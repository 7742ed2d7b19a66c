"""
How sensitive is attention near the MASK embedding?
====================================================

Soft embeddings sit close to the MASK row, so small changes in them should
move the attention output only a little.  This compares the spectral bound
c * sigma_V * sigma_QK * eps^2 with measured output/input ratios.
"""

import numpy as np

from lrd.denoiser import Denoiser, DenoiserConfig
from lrd.stability import embedding_norm_stats, run_probe, spectral_norm

model = Denoiser.init(DenoiserConfig(V=11, d=32, n_layers=2, n_heads=2), seed=0, zero_head=False)

# power iteration agrees with the SVD
M = np.random.default_rng(1).standard_normal((5, 3))
est = spectral_norm(M)
print(f"power iteration {est.sigma_max:.10f} in {est.iterations} its, svd {np.linalg.svd(M)[1][0]:.10f}")

mask_norm, token_norm, ratio = embedding_norm_stats(model.table)
print(f"|e_MASK| = {mask_norm:.3f}, mean |e_v| = {token_norm:.3f}, ratio {ratio:.3f}")

# c is calibrated so the bound meets the measured maximum at the smallest radius
for layer in range(2):
    print(f"layer {layer}")
    for r in run_probe(model, layer, head=0, seed=0):
        print(f"  eps={r['epsilon']:<5} bound={r['bound']:.3e} max={r['max_ratio']:.4f} "
              f"median={r['median_ratio']:.5f}")
