"""Image quality and segmentation metrics: SSIM, Otsu, blob filtering, Dice."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.signal import convolve2d

from .imaging import Image


class MetricError(ValueError):
    pass


class DegenerateHistogramError(MetricError):
    pass


@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def weights(self) -> np.ndarray:
        r = np.arange(self.window) - (self.window - 1) / 2
        g = np.exp(-0.5 * (r / self.sigma) ** 2)
        w = np.outer(g, g)
        return w / w.sum()


@dataclass(frozen=True, eq=False)
class BinaryMask:
    bits: np.ndarray
    pixel_pitch: float = 1.0

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2:
            raise ValueError("mask must be 2D")
        object.__setattr__(self, "bits", bits)

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def count(self) -> int:
        return int(self.bits.sum())


def _pixels(x) -> np.ndarray:
    return x.pixels if isinstance(x, Image) else np.asarray(x, dtype=np.float64)


def ssim_map(a, b, cfg: SsimConfig = SsimConfig()) -> np.ndarray:
    """Local SSIM at every window position fully inside the image."""
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < cfg.window:
        raise MetricError(f"image {a.shape} is smaller than the {cfg.window}x{cfg.window} window")
    w = cfg.weights()[::-1, ::-1]

    def filt(x):
        return convolve2d(x, w, mode="valid")

    c1 = (cfg.k1 * cfg.dynamic_range) ** 2
    c2 = (cfg.k2 * cfg.dynamic_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, cfg: SsimConfig = SsimConfig()) -> float:
    return float(ssim_map(a, b, cfg).mean())


# --------------------------------------------------------------------------
# Otsu

N_BINS = 256


def histogram_bins(pixels: np.ndarray) -> np.ndarray:
    """Bin index in 0..255 for values in [0, 1]; 1.0 falls in the last bin."""
    return np.clip(np.floor(np.asarray(pixels) * N_BINS), 0, N_BINS - 1).astype(np.int64)


def _split_score_exact(n0: int, s0: int, n1: int, s1: int):
    # between-class variance up to a positive constant, as an exact (num, den) pair
    return (s0 * n1 - s1 * n0) ** 2, n0 * n1


def otsu_threshold(image) -> float:
    """Otsu threshold over a 256-bin histogram of [0, 1].

    Returns the upper edge ``(k + 1) / 256`` of the last background bin ``k``.
    Exact ties resolve to the lowest threshold.
    """
    px = _pixels(image)
    if px.size == 0:
        raise MetricError("empty image")
    hist = np.bincount(histogram_bins(px).ravel(), minlength=N_BINS)
    idx = np.arange(N_BINS)
    n0 = np.cumsum(hist)[:-1].astype(np.float64)
    s0 = np.cumsum(hist * idx)[:-1].astype(np.float64)
    n_total, s_total = float(hist.sum()), float((hist * idx).sum())
    n1, s1 = n_total - n0, s_total - s0
    valid = (n0 > 0) & (n1 > 0)
    score = np.zeros(N_BINS - 1)
    score[valid] = (s0[valid] * n1[valid] - s1[valid] * n0[valid]) ** 2 / (n0[valid] * n1[valid])
    best = score.max()
    if best <= 0:
        raise DegenerateHistogramError("histogram has no split with positive between-class variance")
    # float scores of exactly tied splits can differ in the last ulp; settle near-ties exactly
    candidates = np.flatnonzero(score >= best * (1 - 1e-9))
    hist_i = [int(v) for v in hist]
    cum_n = np.cumsum(hist_i, dtype=object)
    cum_s = np.cumsum([h * k for k, h in enumerate(hist_i)], dtype=object)
    total_n, total_s = int(cum_n[-1]), int(cum_s[-1])
    winner, w_num, w_den = None, 0, 1
    for k in candidates:
        a_n, a_s = int(cum_n[k]), int(cum_s[k])
        num, den = _split_score_exact(a_n, a_s, total_n - a_n, total_s - a_s)
        if winner is None or num * w_den > w_num * den:
            winner, w_num, w_den = int(k), num, den
    return (winner + 1) / N_BINS


def dark_foreground(image, threshold: float) -> np.ndarray:
    # thresholds are bin edges k/256, so this agrees with the histogram split exactly
    return _pixels(image) < threshold


# --------------------------------------------------------------------------
# components and segmentation

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True, eq=False)
class Regions:
    count: int
    labels: np.ndarray  # 0 = background, 1..count in row-major first-encounter order
    areas: np.ndarray  # areas[i] = pixel count of label i + 1


def connected_components(mask) -> Regions:
    bits = mask.bits if isinstance(mask, BinaryMask) else np.asarray(mask, dtype=bool)
    labels, count = ndimage.label(bits, structure=EIGHT_CONNECTED)
    areas = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    return Regions(int(count), labels, areas)


def area_bounds_px(pixel_pitch: float, min_um2: float = 0.5, max_um2: float = 3.0) -> tuple[int, int]:
    """Inclusive pixel-count range equivalent to ``min_um2 <= a * pitch**2 <= max_um2``."""
    px_area = pixel_pitch ** 2
    lo = int(np.ceil(min_um2 / px_area))
    hi = int(np.floor(max_um2 / px_area))
    return lo, hi


def segment_parasite_regions(image: Image, min_um2: float = 0.5,
                             max_um2: float = 3.0) -> BinaryMask:
    """Otsu dark-foreground mask keeping only blobs whose area is in [min_um2, max_um2]."""
    threshold = otsu_threshold(image)
    regions = connected_components(dark_foreground(image, threshold))
    area_um2 = regions.areas * image.pixel_pitch ** 2
    keep = np.concatenate([[False], (area_um2 >= min_um2) & (area_um2 <= max_um2)])
    return BinaryMask(keep[regions.labels], image.pixel_pitch)


def dice(a, b) -> float:
    a = a.bits if isinstance(a, BinaryMask) else np.asarray(a, dtype=bool)
    b = b.bits if isinstance(b, BinaryMask) else np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise MetricError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total
