"""Offline probing-layer selection from per-layer pooled features.

Three statistics per layer: symmetric Gaussian KL between low/high quality
quantile groups, a Fisher-style discriminability ratio over quality bins, and
mean per-dimension histogram entropy. Each is min-max normalized across
layers and combined with configurable weights; the argmax layer wins, ties
broken toward the lowest index. All statistics run in float64 and are
invariant to sample order (rows are canonicalized by id first).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from editprobe.errors import ConfigError, ContractError, DataError


@dataclass(frozen=True)
class SaliencyConfig:
    alpha: float = 1.0 / 3.0
    beta: float = 1.0 / 3.0
    gamma: float = 1.0 / 3.0
    quality_bins: int = 5
    histogram_bins: int = 64
    split_quantile: float = 0.25
    variance_floor: float = 1e-6
    within_eps: float = 1e-8

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise ConfigError("saliency weights must be nonnegative")
        if self.alpha + self.beta + self.gamma <= 0:
            raise ConfigError("at least one saliency weight must be positive")
        if self.quality_bins < 2 or self.histogram_bins < 2:
            raise ConfigError("bin counts must be >= 2")
        if not 0.0 < self.split_quantile <= 0.5:
            raise ConfigError(f"split quantile must be in (0, 0.5], got {self.split_quantile}")


@dataclass
class LayerStats:
    kl: list[float]
    ldr: list[float]
    entropy: list[float]
    kl_norm: list[float] = field(default_factory=list)
    ldr_norm: list[float] = field(default_factory=list)
    entropy_norm: list[float] = field(default_factory=list)
    saliency: list[float] = field(default_factory=list)
    selected_layer: int = 0  # 1-indexed

    @property
    def n_layers(self) -> int:
        return len(self.kl)

    def to_json(self, config: SaliencyConfig) -> dict:
        per_layer = [
            {
                "layer": l + 1,
                "kl": self.kl[l],
                "ldr": self.ldr[l],
                "entropy": self.entropy[l],
                "kl_norm": self.kl_norm[l],
                "ldr_norm": self.ldr_norm[l],
                "entropy_norm": self.entropy_norm[l],
                "saliency": self.saliency[l],
            }
            for l in range(self.n_layers)
        ]
        return {
            "weights": {"alpha": config.alpha, "beta": config.beta, "gamma": config.gamma},
            "per_layer": per_layer,
            "selected_layer": self.selected_layer,
        }


def _as_features(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError(f"features must be 2-d (samples x dims), got shape {x.shape}")
    return x


def kl_separability(features, labels, config: SaliencyConfig = SaliencyConfig()) -> float:
    """Mean-over-dimensions symmetric KL between bottom-q and top-q label groups.

    Each group is fit with a univariate Gaussian per feature dimension
    (population moments, variance floored). Closed form for the symmetric KL:
    0.5*(KL(P||Q) + KL(Q||P)).
    """
    x = _as_features(features)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != (x.shape[0],):
        raise ContractError(f"labels shape {y.shape} does not match {x.shape[0]} samples")
    n = x.shape[0]
    k = int(np.floor(config.split_quantile * n))
    order = np.argsort(y, kind="stable")
    if k < 2:
        raise DataError(
            f"quantile {config.split_quantile} of {n} samples gives group size {k}; need >= 2"
        )
    low = x[order[:k]]
    high = x[order[-k:]]

    mu_p, mu_q = low.mean(axis=0), high.mean(axis=0)
    var_p = np.maximum(low.var(axis=0), config.variance_floor)
    var_q = np.maximum(high.var(axis=0), config.variance_floor)
    gap = (mu_p - mu_q) ** 2
    sym = 0.25 * ((var_p + gap) / var_q + (var_q + gap) / var_p) - 0.5
    return float(sym.mean())


def fisher_ratio(features, labels, config: SaliencyConfig = SaliencyConfig()) -> float:
    """Between-class over within-class scatter across equal-width label bins.

    Scatters are sample-count-weighted means of per-bin traces; empty bins are
    dropped; the within trace is guarded by a small epsilon.
    """
    x = _as_features(features)
    y = np.asarray(labels, dtype=np.float64)
    lo, hi = y.min(), y.max()
    if hi == lo:
        edges = np.array([lo - 0.5, hi + 0.5])
    else:
        edges = np.linspace(lo, hi, config.quality_bins + 1)
    which = np.clip(np.digitize(y, edges[1:-1]), 0, len(edges) - 2)

    counts, mus, within = [], [], []
    for b in range(len(edges) - 1):
        rows = x[which == b]
        if rows.shape[0] == 0:
            continue
        counts.append(rows.shape[0])
        mus.append(rows.mean(axis=0))
        within.append(rows.var(axis=0).sum())  # trace of per-bin scatter
    if len(counts) < 2:
        raise DataError(f"need at least 2 non-empty quality bins, got {len(counts)}")

    n = sum(counts)
    counts_arr = np.array(counts, dtype=np.float64)
    mus_arr = np.stack(mus)
    overall = (counts_arr[:, None] * mus_arr).sum(axis=0) / n
    between = float((counts_arr * ((mus_arr - overall) ** 2).sum(axis=1)).sum() / n)
    within_tr = float((counts_arr * np.array(within)).sum() / n)
    return between / (within_tr + config.within_eps)


def histogram_entropy(features, config: SaliencyConfig = SaliencyConfig()) -> float:
    """Mean over dimensions of Shannon entropy (nats) of an equal-width histogram.

    Each dimension's histogram spans [min, max] of that dimension; constant
    dimensions contribute zero.
    """
    x = _as_features(features)
    if x.shape[0] < 2:
        raise ContractError(f"entropy needs >= 2 samples, got {x.shape[0]}")
    total = 0.0
    for d in range(x.shape[1]):
        col = x[:, d]
        lo, hi = col.min(), col.max()
        if hi == lo:
            continue
        hist, _ = np.histogram(col, bins=config.histogram_bins, range=(lo, hi))
        p = hist[hist > 0] / col.size
        total += float(-(p * np.log(p)).sum())
    return total / x.shape[1]


def _minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.full_like(values, 0.5)
    return (values - lo) / (hi - lo)


def saliency_and_select(
    kl: list[float],
    ldr: list[float],
    entropy: list[float],
    config: SaliencyConfig = SaliencyConfig(),
) -> LayerStats:
    """Min-max normalize each statistic across layers, combine, pick the argmax.

    Ties break toward the lowest layer index; layers are 1-indexed.
    """
    if not (len(kl) == len(ldr) == len(entropy)) or len(kl) < 1:
        raise ContractError("statistics must be non-empty lists of equal length")
    stats = LayerStats(kl=list(map(float, kl)), ldr=list(map(float, ldr)), entropy=list(map(float, entropy)))
    kl_n = _minmax(np.asarray(kl, dtype=np.float64))
    ldr_n = _minmax(np.asarray(ldr, dtype=np.float64))
    ent_n = _minmax(np.asarray(entropy, dtype=np.float64))
    sal = config.alpha * kl_n + config.beta * ldr_n + config.gamma * ent_n
    stats.kl_norm = kl_n.tolist()
    stats.ldr_norm = ldr_n.tolist()
    stats.entropy_norm = ent_n.tolist()
    stats.saliency = sal.tolist()
    stats.selected_layer = int(np.argmax(sal)) + 1  # argmax returns the first maximum
    return stats


def pooled_layer_features(pairs: np.ndarray) -> np.ndarray:
    """(n, L, 2, d) source/edited pairs -> (n, L, d) averaged features."""
    pairs = np.asarray(pairs)
    if pairs.ndim != 4 or pairs.shape[2] != 2:
        raise ContractError(f"expected (n, L, 2, d) feature pairs, got {pairs.shape}")
    return pairs.astype(np.float64).mean(axis=2)


def analyze_layers(
    pairs: np.ndarray,
    labels,
    ids: list[str] | None = None,
    config: SaliencyConfig = SaliencyConfig(),
) -> LayerStats:
    """Per-layer statistics over pooled features, then saliency selection."""
    pooled = pooled_layer_features(pairs)
    y = np.asarray(labels, dtype=np.float64)
    if not np.isfinite(y).all():
        raise DataError("labels must be finite")
    if ids is not None:
        if len(ids) != pooled.shape[0]:
            raise ContractError("ids length does not match sample count")
        order = np.argsort(np.asarray(ids, dtype=object), kind="stable")
        pooled = pooled[order]
        y = y[order]
    kl, ldr, ent = [], [], []
    for l in range(pooled.shape[1]):
        layer = pooled[:, l, :]
        kl.append(kl_separability(layer, y, config))
        ldr.append(fisher_ratio(layer, y, config))
        ent.append(histogram_entropy(layer, config))
    return saliency_and_select(kl, ldr, ent, config)
