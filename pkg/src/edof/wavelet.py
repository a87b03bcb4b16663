"""Periodized 2D DWT and multi-plane wavelet EDoF fusion.

Detail sub-bands are stored per level as ``(HL, LH, HH)``: the first letter is
the filter applied along rows (x), the second along columns (y).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .imaging import Image, ZStack


class WaveletError(ValueError):
    pass


class TooSmallError(WaveletError):
    pass


class LevelOverflowError(WaveletError):
    pass


@dataclass(frozen=True)
class FilterBank:
    name: str
    lowpass: np.ndarray

    @property
    def taps(self) -> int:
        return len(self.lowpass)

    @property
    def highpass(self) -> np.ndarray:
        # quadrature mirror of the lowpass
        h = self.lowpass
        return np.array([(-1) ** k * h[len(h) - 1 - k] for k in range(len(h))])

    def check(self, tol: float = 1e-10) -> None:
        """Raise if the bank is not an orthonormal two-channel lowpass."""
        h = np.asarray(self.lowpass, dtype=np.float64)
        if abs(h.sum() - math.sqrt(2)) > tol:
            raise WaveletError(f"{self.name}: sum of taps {h.sum()} != sqrt(2)")
        if abs((h * h).sum() - 1.0) > tol:
            raise WaveletError(f"{self.name}: filter energy {(h * h).sum()} != 1")
        for m in range(1, len(h) // 2):
            s = float(np.dot(h[:-2 * m], h[2 * m:]))
            if abs(s) > tol:
                raise WaveletError(f"{self.name}: shift-{2 * m} correlation {s} != 0")


HAAR = FilterBank("haar", np.array([1.0, 1.0]) / math.sqrt(2.0))

# Symlet with 8 vanishing moments (16 taps), decomposition lowpass.
SYM8 = FilterBank("sym8", np.array([
    -0.0033824159510061256, -0.0005421323317911481, 0.03169508781149298,
    0.007607487324917605, -0.1432942383508097, -0.061273359067658524,
    0.4813596512583722, 0.7771857517005235, 0.3644418948353314,
    -0.05194583810770904, -0.027219029917056003, 0.049137179673607506,
    0.003808752013890615, -0.01495225833704823, -0.0003029205147213668,
    0.0018899503327594609,
]))

BANKS = {"haar": HAAR, "sym8": SYM8}


def get_bank(name: str) -> FilterBank:
    try:
        return BANKS[name]
    except KeyError:
        raise WaveletError(f"unknown wavelet {name!r}; choose from {sorted(BANKS)}") from None


@dataclass(frozen=True)
class WaveletPyramid:
    approx: np.ndarray
    details: tuple  # details[l - 1] = (HL, LH, HH) at level l, finest first
    shape: tuple[int, int]

    @property
    def levels(self) -> int:
        return len(self.details)

    def coefficient_count(self) -> int:
        return self.approx.size + sum(b.size for lvl in self.details for b in lvl)

    def energy(self) -> float:
        return float((self.approx ** 2).sum()
                     + sum((b ** 2).sum() for lvl in self.details for b in lvl))


@dataclass(frozen=True)
class SelectionMap:
    maps: tuple  # one (h_l, w_l) int array per level, finest first
    n_planes: int


def max_levels(height: int, width: int, taps: int) -> int:
    if min(height, width, taps) < 1:
        raise ValueError("dimensions and tap count must be >= 1")
    support = max(taps - 1, 1)
    if min(height, width) < support:
        raise TooSmallError(
            f"{height}x{width} image is smaller than the {taps}-tap filter support")
    return max(1, int(math.floor(math.log2(min(height, width) / support))))


# --------------------------------------------------------------------------
# 1D periodized analysis / synthesis along an axis

def _analysis(x: np.ndarray, h: np.ndarray, axis: int) -> np.ndarray:
    # out[n] = sum_k h[k] x[(2n + k) mod N]
    x = np.moveaxis(x, axis, -1)
    n = x.shape[-1]
    reps = -(-len(h) // n) + 1
    xp = np.concatenate([x] * reps, axis=-1) if reps > 1 else x
    out = np.zeros(x.shape[:-1] + (n // 2,))
    for k, hk in enumerate(h):
        out += hk * xp[..., k:k + n:2]
    return np.moveaxis(out, -1, axis)


def _synthesis(c: np.ndarray, h: np.ndarray, axis: int) -> np.ndarray:
    # adjoint of _analysis: y[(2n + k) mod N] += h[k] c[n]
    c = np.moveaxis(c, axis, -1)
    half = c.shape[-1]
    n = 2 * half
    taps = len(h)
    ext = np.zeros(c.shape[:-1] + (n + taps,))
    for k, hk in enumerate(h):
        ext[..., k:k + n:2] += hk * c
    y = ext[..., :n].copy()
    tail = ext[..., n:]
    # fold the overhang back onto the periodic signal
    for start in range(0, tail.shape[-1], n):
        chunk = tail[..., start:start + n]
        y[..., :chunk.shape[-1]] += chunk
    return np.moveaxis(y, -1, axis)


def _dwt2_level(x: np.ndarray, bank: FilterBank):
    lo, hi = bank.lowpass, bank.highpass
    row_lo = _analysis(x, lo, axis=-1)
    row_hi = _analysis(x, hi, axis=-1)
    ll = _analysis(row_lo, lo, axis=-2)
    lh = _analysis(row_lo, hi, axis=-2)
    hl = _analysis(row_hi, lo, axis=-2)
    hh = _analysis(row_hi, hi, axis=-2)
    return ll, (hl, lh, hh)


def _idwt2_level(ll, details, bank: FilterBank) -> np.ndarray:
    lo, hi = bank.lowpass, bank.highpass
    hl, lh, hh = details
    row_lo = _synthesis(ll, lo, axis=-2) + _synthesis(lh, hi, axis=-2)
    row_hi = _synthesis(hl, lo, axis=-2) + _synthesis(hh, hi, axis=-2)
    return _synthesis(row_lo, lo, axis=-1) + _synthesis(row_hi, hi, axis=-1)


def dwt2(image, bank: FilterBank, levels: int) -> WaveletPyramid:
    """Multi-level periodized DWT of an Image or 2D array."""
    x = image.pixels if isinstance(image, Image) else np.asarray(image, dtype=np.float64)
    h, w = x.shape
    if levels < 1:
        raise LevelOverflowError("levels must be >= 1")
    if levels > max_levels(h, w, bank.taps):
        raise LevelOverflowError(
            f"{levels} levels exceed the maximum {max_levels(h, w, bank.taps)} for {h}x{w}")
    if h % 2 ** levels or w % 2 ** levels:
        raise LevelOverflowError(f"{h}x{w} is not divisible by 2^{levels}; pad first")
    details = []
    approx = x
    for _ in range(levels):
        approx, d = _dwt2_level(approx, bank)
        details.append(d)
    return WaveletPyramid(approx, tuple(details), (h, w))


def idwt2(pyramid: WaveletPyramid, bank: FilterBank) -> np.ndarray:
    """Inverse of :func:`dwt2`; returns an unclamped float array."""
    approx = np.asarray(pyramid.approx, dtype=np.float64)
    for level in range(pyramid.levels, 0, -1):
        d = pyramid.details[level - 1]
        if any(b.shape != approx.shape for b in d):
            raise WaveletError(
                f"level {level}: sub-band shapes {[b.shape for b in d]} "
                f"do not match approximation {approx.shape}")
        approx = _idwt2_level(approx, d, bank)
    if approx.shape != tuple(pyramid.shape):
        raise WaveletError(f"reconstructed {approx.shape}, pyramid declares {pyramid.shape}")
    return approx


# --------------------------------------------------------------------------
# fusion

def _majority3(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    # two-of-three agreement wins; otherwise the lowest index
    lowest = np.minimum(np.minimum(a, b), c)
    return np.where((a == b) | (a == c), a, np.where(b == c, b, lowest))


def select_max(pyramids):
    """Per-coefficient max-|c| selection across planes.

    Returns the fused pyramid (before any consistency filtering) and the
    per-level plane map obtained by majority vote over the three detail
    sub-bands. The approximation band is the mean over planes.
    """
    pyramids = list(pyramids)
    if not pyramids:
        raise WaveletError("need at least one pyramid")
    ref = pyramids[0]
    for p in pyramids[1:]:
        if p.shape != ref.shape or p.levels != ref.levels:
            raise WaveletError("pyramids differ in shape or level count")
    details, maps = [], []
    for level in range(ref.levels):
        fused_bands, winners = [], []
        for band in range(3):
            coeffs = np.stack([p.details[level][band] for p in pyramids])
            win = np.argmax(np.abs(coeffs), axis=0)
            fused_bands.append(np.take_along_axis(coeffs, win[None], axis=0)[0])
            winners.append(win)
        details.append(tuple(fused_bands))
        maps.append(_majority3(*winners))
    approx = np.mean(np.stack([p.approx for p in pyramids]), axis=0)
    fused = WaveletPyramid(approx, tuple(details), ref.shape)
    return fused, SelectionMap(tuple(maps), len(pyramids))


def consistency_filter(selection: SelectionMap) -> SelectionMap:
    """One pass of a 3x3 modal filter per level (truncated borders, lowest mode wins)."""
    out = []
    footprint = np.ones((3, 3))
    for m in selection.maps:
        counts = np.stack([
            ndimage.correlate((m == p).astype(np.int64), footprint, mode="constant", cval=0)
            for p in range(selection.n_planes)
        ])
        out.append(np.argmax(counts, axis=0))
    return SelectionMap(tuple(out), selection.n_planes)


def gather(pyramids, selection: SelectionMap) -> WaveletPyramid:
    """Build a pyramid taking every detail coefficient from the mapped plane."""
    pyramids = list(pyramids)
    ref = pyramids[0]
    details = []
    for level, m in enumerate(selection.maps):
        bands = []
        for band in range(3):
            coeffs = np.stack([p.details[level][band] for p in pyramids])
            bands.append(np.take_along_axis(coeffs, m[None], axis=0)[0])
        details.append(tuple(bands))
    approx = np.mean(np.stack([p.approx for p in pyramids]), axis=0)
    return WaveletPyramid(approx, tuple(details), ref.shape)


def _padded_size(n: int, levels: int) -> int:
    step = 2 ** levels
    return -(-n // step) * step


def fuse_wavelet(stack: ZStack, bank: FilterBank = SYM8, levels: int = 12) -> Image:
    """Wavelet extended-depth-of-field image of a z-stack.

    ``levels`` is capped at :func:`max_levels` for the plane size; planes are
    symmetric-padded to a multiple of ``2**levels`` and cropped afterwards.
    """
    h, w = stack.shape
    levels = max(1, min(levels, max_levels(h, w, bank.taps)))
    ph, pw = _padded_size(h, levels), _padded_size(w, levels)
    pyramids = []
    for plane in stack.planes:
        x = plane.pixels
        if (ph, pw) != (h, w):
            x = np.pad(x, ((0, ph - h), (0, pw - w)), mode="symmetric")
        pyramids.append(dwt2(x, bank, levels))
    _, selection = select_max(pyramids)
    selection = consistency_filter(selection)
    fused = idwt2(gather(pyramids, selection), bank)[:h, :w]
    return Image(np.clip(fused, 0.0, 1.0), stack.pixel_pitch)
