"""Per-channel activation statistics and the variance-of-means split.

All variances are population (biased) so the decomposition

    total_var == mean(channel_vars) + var_of_means

is an exact algebraic identity rather than an approximation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["ChannelStats", "channel_stats"]


@dataclass(frozen=True)
class ChannelStats:
    means: np.ndarray       # per-channel mean
    vars: np.ndarray        # per-channel population variance
    total_var: float        # population variance over all elements
    var_of_means: float     # population variance of the channel means


def channel_stats(x) -> ChannelStats:
    """Population statistics of a [tokens x channels] matrix.

    Channels are columns.  Raises on empty input.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.size == 0:
        raise ValueError("empty input")
    means = x.mean(axis=0)
    variances = x.var(axis=0)
    return ChannelStats(
        means=means,
        vars=variances,
        total_var=float(x.var()),
        var_of_means=float(means.var()),
    )
