"""Classical full-reference image metrics (MSE, PSNR, SSIM) between source
and edited images, plus the harness correlating them with MOS.

SSIM follows the reference recipe: BT.601 luma, 11x11 Gaussian window with
sigma 1.5 in valid mode, stability constants (0.01*peak)^2 and (0.03*peak)^2.
PSNR of identical images is a distinguished "identical" result (None),
serialized as null and ranked above every finite value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from editprobe.common import ALL_DIMENSIONS
from editprobe.correlations import correlation_cell
from editprobe.errors import DataError

BT601_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    peak: float = 1.0


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"image shapes differ: {a.shape} vs {b.shape}")
    for name, img in (("first", a), ("second", b)):
        if img.min() < -1e-6 or img.max() > 1.0 + 1e-6:
            raise DataError(f"{name} image values outside [0, 1]")
    return a, b


def mse_image(a, b) -> float:
    """Mean squared pixel difference over all channels."""
    a, b = _check_pair(a, b)
    diff = a - b
    return float((diff * diff).mean())


def psnr(a, b, peak: float = 1.0) -> float | None:
    """10*log10(peak^2 / MSE); None marks identical images."""
    err = mse_image(a, b)
    if err == 0.0:
        return None
    return float(10.0 * np.log10(peak * peak / err))


def to_luma(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[2] == 3:
        return image @ BT601_LUMA
    raise DataError(f"expected HxW or HxWx3 image, got shape {image.shape}")


def gaussian_kernel_1d(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(image: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable valid-mode filtering with a normalized 1-d kernel."""
    from numpy.lib.stride_tricks import sliding_window_view

    rows = sliding_window_view(image, g.size, axis=1) @ g  # (H, W-k+1)
    return sliding_window_view(rows, g.size, axis=0) @ g  # (H-k+1, W-k+1)


def ssim(a, b, config: SsimConfig = SsimConfig()) -> float:
    """Mean local SSIM over Gaussian windows on the luma channel."""
    a, b = _check_pair(a, b)
    ya, yb = to_luma(a), to_luma(b)
    if min(ya.shape) < config.window:
        raise DataError(f"image side {ya.shape} smaller than window {config.window}")
    g = gaussian_kernel_1d(config.window, config.sigma)
    mu_a = _filter_valid(ya, g)
    mu_b = _filter_valid(yb, g)
    e_aa = _filter_valid(ya * ya, g)
    e_bb = _filter_valid(yb * yb, g)
    e_ab = _filter_valid(ya * yb, g)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    c1 = (config.k1 * config.peak) ** 2
    c2 = (config.k2 * config.peak) ** 2
    score_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return float(score_map.mean())


METRICS = {
    "mse": lambda a, b: mse_image(a, b),
    "psnr": lambda a, b: psnr(a, b),
    "ssim": lambda a, b: ssim(a, b),
}


def baseline_report(
    pairs: dict[str, tuple[np.ndarray, np.ndarray]],
    mos_table: dict[str, dict],
    metrics: tuple[str, ...] = ("mse", "psnr", "ssim"),
) -> dict:
    """Each metric against each MOS dimension: SRCC/PLCC/KRCC cells.

    Pairs without MOS entries are skipped and listed. PSNR "identical"
    results rank above every finite value (a large finite stand-in is used
    for the linear coefficient).
    """
    unknown = [m for m in metrics if m not in METRICS]
    if unknown:
        raise DataError(f"unknown metrics {unknown}; available: {sorted(METRICS)}")

    usable, skipped = [], []
    for sample_id in sorted(pairs):
        if sample_id in mos_table:
            usable.append(sample_id)
        else:
            skipped.append(sample_id)
    if len(usable) < 3:
        raise DataError(f"need at least 3 pairs with MOS, got {len(usable)}")

    values: dict[str, list] = {m: [] for m in metrics}
    for sample_id in usable:
        a, b = pairs[sample_id]
        for m in metrics:
            values[m].append(METRICS[m](a, b))

    key_of = {"quality": "mos_q", "alignment": "mos_e", "preservation": "mos_p", "overall": "mos_o"}
    report: dict = {"n_pairs": len(usable), "skipped": skipped, "metrics": {}}
    for m in metrics:
        raw = values[m]
        finite = [v for v in raw if v is not None]
        if len(finite) < len(raw):
            stand_in = (max(finite) if finite else 0.0) + 10.0
            filled = np.array([stand_in if v is None else v for v in raw])
        else:
            filled = np.array(raw, dtype=np.float64)
        cells = {}
        for dim in ALL_DIMENSIONS:
            y = np.array([float(mos_table[s][key_of[dim]]) for s in usable])
            cells[dim] = correlation_cell(filled, y)
        report["metrics"][m] = {
            "values": {s: raw[i] for i, s in enumerate(usable)},
            "correlations": cells,
        }
    return report
