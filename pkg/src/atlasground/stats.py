"""One-sided Wilcoxon signed-rank test."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm, rankdata

EXACT_MAX_N = 20


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # sum of ranks of positive differences
    p_value: float
    n: int  # pairs left after dropping zero differences
    method: str


def wilcoxon_signed_rank(x, y, alternative: str = "greater") -> WilcoxonResult:
    """Test whether ``x - y`` is shifted above (``"greater"``) or below (``"less"``) zero.

    Zero differences are dropped and tied magnitudes share average ranks.
    The null distribution is enumerated exactly for n <= 20 and approximated
    by a normal (with tie correction, no continuity correction) above that.
    """
    if alternative not in ("greater", "less"):
        raise ValueError("alternative must be 'greater' or 'less'")
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, "exact")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= EXACT_MAX_N:
        # doubled ranks are integers even with average ties
        r2 = np.rint(2 * ranks).astype(np.int64)
        counts = np.zeros(int(r2.sum()) + 1)
        counts[0] = 1.0
        for r in r2:
            shifted = np.zeros_like(counts)
            shifted[r:] = counts[: len(counts) - r]
            counts = counts + shifted
        probs = counts / counts.sum()
        obs = int(round(2 * w_plus))
        p = probs[obs:].sum() if alternative == "greater" else probs[: obs + 1].sum()
        return WilcoxonResult(w_plus, float(min(p, 1.0)), n, "exact")
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts**3 - tie_counts).sum() / 48.0
    z = (w_plus - mean) / math.sqrt(var)
    p = norm.sf(z) if alternative == "greater" else norm.cdf(z)
    return WilcoxonResult(w_plus, float(p), n, "normal")
