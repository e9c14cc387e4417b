# What a Hadamard rotation does to activation outliers, and what it cannot do.
#
# Activations with a few extreme channels are hard to quantize: one channel
# dictates the dynamic range of every token.  An orthogonal rotation with
# flat +-n^{-1/2} entries spreads each spike across all channels, shrinking
# the per-channel amplitude by sqrt(n).  Channel-mean misalignment, however,
# survives any rotation: the mean vector just rotates, its energy stays.

import numpy as np

from rotquant import SynthSpec, channel_stats, fwht, gen_synthetic, random_hadamard

n = 256
spec = SynthSpec(
    channels=n,
    tokens=2000,
    seed=0,
    outlier_channels=(17, 101),
    amplitudes=(40.0, 25.0),
    base_std=1.0,
)
x = gen_synthetic(spec)

print("raw activations")
print(f"  max |value|            : {np.abs(x).max():8.2f}")
print(f"  99.9th pct |value|     : {np.quantile(np.abs(x), 0.999):8.2f}")

x_rot = fwht(x)
print("after the Hadamard rotation")
print(f"  max |value|            : {np.abs(x_rot).max():8.2f}   (spike energy ~ a/sqrt(n))")
print(f"  99.9th pct |value|     : {np.quantile(np.abs(x_rot), 0.999):8.2f}")

# random sign flips give a different, equally flat rotation
x_rnd = np.asarray(random_hadamard(n, seed=3).apply(x))
print(f"  same with random signs : {np.abs(x_rnd).max():8.2f}")

# now add per-channel mean offsets: rotation does not align them
spec_mis = SynthSpec(
    channels=n,
    tokens=2000,
    seed=0,
    base_std=1.0,
    mean_offsets=np.random.default_rng(1).normal(0.0, 3.0, size=n),
)
y = gen_synthetic(spec_mis)
before = channel_stats(y)
after = channel_stats(np.asarray(fwht(y)))
print("channel-mean misalignment (variance of channel means)")
print(f"  before rotation        : {before.var_of_means:8.3f}")
print(f"  after rotation         : {after.var_of_means:8.3f}   (still there)")
print(f"  mean channel variance  : {before.vars.mean():8.3f} -> {after.vars.mean():.3f} (invariant)")
print()
print("rotations fix amplitude outliers; bias correction has to fix the means.")
