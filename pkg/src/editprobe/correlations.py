"""Rank and linear correlation between predicted scores and MOS.

SRCC is Pearson over average (fractional) ranks, KRCC is tie-corrected
Kendall tau-b via a merge-sort inversion count (O(n log n)), PLCC is raw
Pearson. Degenerate inputs (zero variance) yield None instead of NaN.
All arithmetic runs in float64.
"""

from __future__ import annotations

import numpy as np

from editprobe.errors import ContractError

MIN_SAMPLES = 3


def _prepare(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or x.shape != y.shape:
        raise ContractError(f"need equal-length 1-d inputs, got {x.shape} and {y.shape}")
    if x.size < MIN_SAMPLES:
        raise ContractError(f"need at least {MIN_SAMPLES} samples, got {x.size}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ContractError("inputs must be finite")
    return x, y


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values receive the mean of their rank positions."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def plcc(x, y) -> float | None:
    """Pearson product-moment correlation; None when either input is constant."""
    x, y = _prepare(x, y)
    dx = x - x.mean()
    dy = y - y.mean()
    denom = np.sqrt((dx * dx).sum() * (dy * dy).sum())
    if denom == 0.0:
        return None
    return float((dx * dy).sum() / denom)


def srcc(x, y) -> float | None:
    """Spearman rank correlation with average-rank tie handling."""
    x, y = _prepare(x, y)
    return plcc(average_ranks(x), average_ranks(y))


def _sort_and_count_inversions(values: np.ndarray) -> int:
    """Merge-sort inversion count (pairs out of order)."""
    n = values.size
    work = values.copy()
    buf = np.empty_like(work)
    count = 0
    width = 1
    while width < n:
        for lo in range(0, n, 2 * width):
            mid = min(lo + width, n)
            hi = min(lo + 2 * width, n)
            i, j, k = lo, mid, lo
            while i < mid and j < hi:
                if work[i] <= work[j]:
                    buf[k] = work[i]
                    i += 1
                else:
                    buf[k] = work[j]
                    j += 1
                    count += mid - i
                k += 1
            buf[k:hi] = work[i:mid] if i < mid else work[j:hi]
            work[lo:hi] = buf[lo:hi]
        width *= 2
    return count


def _tie_pair_count(values: np.ndarray) -> int:
    _, counts = np.unique(values, return_counts=True)
    return int((counts * (counts - 1) // 2).sum())


def krcc(x, y) -> float | None:
    """Kendall tau-b: (C - D) / sqrt((C+D+Tx)(C+D+Ty)) with tie corrections."""
    x, y = _prepare(x, y)
    n = x.size
    total = n * (n - 1) // 2

    # Sort by x (ties broken by y); discordant pairs among x-distinct pairs are
    # then inversions of the y sequence.
    order = np.lexsort((y, x))
    xs, ys = x[order], y[order]

    tx = _tie_pair_count(x)
    ty = _tie_pair_count(y)
    txy = 0  # pairs tied in both
    i = 0
    while i < n:
        j = i
        while j + 1 < n and xs[j + 1] == xs[i]:
            j += 1
        if j > i:
            txy += _tie_pair_count(ys[i : j + 1])
        i = j + 1

    discordant = _sort_and_count_inversions(ys)
    # pairs tied only in y: counted neither concordant nor discordant
    ty_only = ty - txy
    concordant = total - discordant - tx - ty_only
    denom = np.sqrt(float(total - tx) * float(total - ty))
    if denom == 0.0:
        return None
    return float((concordant - discordant) / denom)


def correlation_cell(x, y) -> dict:
    """All three coefficients plus the sample count, as report-ready values."""
    x = np.asarray(x, dtype=np.float64)
    return {
        "srcc": srcc(x, y),
        "plcc": plcc(x, y),
        "krcc": krcc(x, y),
        "n": int(x.size),
    }
