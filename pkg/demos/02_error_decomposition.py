# Where quantization error comes from: rounding vs clipping, and how much of
# the rounding part is caused by misaligned channel means.

import numpy as np

from rotquant import (
    clipping_energy,
    gaussian_clip_energy,
    noise_propagation,
    optimal_scale,
    variance_decomposition,
)

rng = np.random.default_rng(0)

# -- clipping: a Gaussian clipped at 2.2 sigma loses ~18.4% of its energy ----
print("two-sided clipped-energy fraction of a standard normal")
for t in (1.5, 2.0, 2.2, 3.0):
    closed = gaussian_clip_energy(t)
    x = rng.standard_normal(400_000)
    mc = clipping_energy(x, -t * x.std(), t * x.std())
    print(f"  t = {t:3.1f} sigma : closed form {closed:.4f}   monte carlo {mc:.4f}")
print()

# -- rounding: the variance-of-means share -----------------------------------
# unit-variance channels plus mean offsets of variance 9: the offsets carry
# 90% of the total variance, hence ~90% of the expected rounding energy
offsets = rng.normal(0.0, 3.0, size=64)
x = rng.normal(size=(20_000, 64)) + offsets
mean_var, var_means, fraction = variance_decomposition(x)
print("variance split of a misaligned activation matrix")
print(f"  mean channel variance  : {mean_var:.3f}")
print(f"  variance of means      : {var_means:.3f}")
print(f"  misalignment share     : {fraction:.1%} of the rounding-error budget")
print()

# -- propagation: quantization noise through a linear layer -------------------
w = rng.normal(size=64)
a = rng.normal(size=64) * 2.0
predicted, empirical = noise_propagation(w, a, s_w=0.1, s_a=0.15, trials=50_000)
print("uniform-noise propagation through w . a")
print(f"  predicted output-noise variance : {predicted:.3e}")
print(f"  simulated                        : {empirical:.3e}")
print()

# -- balancing: the paired channel scale --------------------------------------
s = optimal_scale(w, a)
base, _ = noise_propagation(w / s, a * s, 0.1, 0.1, trials=1)
up, _ = noise_propagation(w / (1.1 * s), a * 1.1 * s, 0.1, 0.1, trials=1)
down, _ = noise_propagation(w / (0.9 * s), a * 0.9 * s, 0.1, 0.1, trials=1)
print("paired scaling equalizes the two dominant noise terms")
print(f"  predicted noise at s        : {base:.4e}")
print(f"  ... at 1.1 s                : {up:.4e}")
print(f"  ... at 0.9 s                : {down:.4e}   (both perturbations hurt)")
