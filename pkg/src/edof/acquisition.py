"""Low-resolution acquisition scenarios and synthetic z-stacks with known ground truth."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .imaging import Image, ZStack


@dataclass(frozen=True)
class PsfParams:
    numerical_aperture: float = 0.6
    wavelength: float = 0.55
    refractive_index: float = 1.0
    voxel: tuple[float, float, float] | None = None  # (dz, dy, dx) in um

    def __post_init__(self):
        if not 0 < self.numerical_aperture <= 1.5:
            raise ValueError("numerical aperture must lie in (0, 1.5]")
        if self.wavelength <= 0 or self.refractive_index < 1:
            raise ValueError("wavelength must be positive and refractive index >= 1")
        if self.numerical_aperture >= self.refractive_index:
            raise ValueError("numerical aperture must be below the refractive index")
        if self.voxel is not None and min(self.voxel) <= 0:
            raise ValueError(f"degenerate voxel size {self.voxel}")

    @property
    def sigma_lateral(self) -> float:
        return 0.21 * self.wavelength / self.numerical_aperture

    @property
    def sigma_axial(self) -> float:
        return 0.66 * self.wavelength * self.refractive_index / self.numerical_aperture ** 2


@dataclass(frozen=True, eq=False)
class Psf3d:
    kernel: np.ndarray  # (Z, Y, X), odd extents, unit sum
    voxel: tuple[float, float, float]
    profiles: tuple[np.ndarray, np.ndarray, np.ndarray]  # normalized 1D factors per axis


def _gaussian_profile(sigma_um: float, step_um: float, truncation: float) -> np.ndarray:
    half = int(math.ceil(truncation * sigma_um / step_um))
    x = np.arange(-half, half + 1) * step_um
    g = np.exp(-0.5 * (x / sigma_um) ** 2)
    return g / g.sum()


def gaussian_psf3d(params: PsfParams, truncation: float = 3.0) -> Psf3d:
    """Separable Gaussian approximation of a widefield PSF sampled on ``params.voxel``."""
    if truncation < 1:
        raise ValueError("truncation must be >= 1 sigma")
    if params.voxel is None:
        raise ValueError("PsfParams.voxel must be set to sample a kernel")
    dz, dy, dx = params.voxel
    pz = _gaussian_profile(params.sigma_axial, dz, truncation)
    py = _gaussian_profile(params.sigma_lateral, dy, truncation)
    px = _gaussian_profile(params.sigma_lateral, dx, truncation)
    kernel = pz[:, None, None] * py[None, :, None] * px[None, None, :]
    kernel /= kernel.sum()
    return Psf3d(kernel, (dz, dy, dx), (pz, py, px))


def subsample_zstep(stack: ZStack, stride: int) -> ZStack:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return ZStack(stack.planes[::stride], stack.z_step * stride)


def bin_stack(stack: ZStack, factor: int) -> ZStack:
    h, w = stack.shape
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"{h}x{w} planes are not divisible by binning factor {factor}")
    vol = stack.to_array()
    d = vol.shape[0]
    binned = vol.reshape(d, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    return ZStack.from_array(binned, stack.z_step, stack.pixel_pitch * factor)


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    # row i averages source interval [i*s, (i+1)*s) with s = n_in / n_out
    s = n_in / n_out
    edges = np.arange(n_out + 1) * s
    lo, hi = edges[:-1, None], edges[1:, None]
    j = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, j + 1) - np.maximum(lo, j), 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def resampled_dims(height: int, width: int, scale: float) -> tuple[int, int]:
    # round half up, not Python's banker's rounding
    return int(math.floor(height / scale + 0.5)), int(math.floor(width / scale + 0.5))


def resample_area(image: Image, scale: float) -> Image:
    """Box-integration downsampling by a real factor ``scale > 1``."""
    if not scale > 1:
        raise ValueError("scale must be > 1")
    h, w = image.shape
    oh, ow = resampled_dims(h, w, scale)
    if oh < 1 or ow < 1:
        raise ValueError(f"{h}x{w} at scale {scale} leaves no output pixels")
    ay, ax = _area_matrix(h, oh), _area_matrix(w, ow)
    out = ay @ image.pixels @ ax.T
    return Image(np.clip(out, 0.0, 1.0), image.pixel_pitch * w / ow)


def convolve_psf(volume: np.ndarray, psf: Psf3d) -> np.ndarray:
    """Separable 3D convolution: mirrored in-plane boundaries, replicated in z."""
    pz, py, px = psf.profiles
    out = ndimage.convolve1d(volume, pz, axis=0, mode="nearest")
    out = ndimage.convolve1d(out, py, axis=1, mode="reflect")
    return ndimage.convolve1d(out, px, axis=2, mode="reflect")


def simulate_low_mag(stack: ZStack, params: PsfParams, scale: float = 2.5,
                     truncation: float = 3.0) -> ZStack:
    """Blur a stack with a 3D PSF then area-downsample each plane by ``scale``.

    The PSF is sampled on the stack's own voxel grid unless ``params.voxel`` is set.
    ``scale == 1`` skips downsampling.
    """
    if params.voxel is None:
        params = replace(params, voxel=(stack.z_step, stack.pixel_pitch, stack.pixel_pitch))
    psf = gaussian_psf3d(params, truncation)
    blurred = np.clip(convolve_psf(stack.to_array(), psf), 0.0, 1.0)
    planes = [Image(p, stack.pixel_pitch) for p in blurred]
    if scale != 1:
        planes = [resample_area(p, scale) for p in planes]
    return ZStack(tuple(planes), stack.z_step)


# --------------------------------------------------------------------------
# synthetic data

BACKGROUND = 0.85


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    height: int = 128
    width: int = 128
    planes: int = 5
    objects: int = 12
    radius_um: tuple[float, float] = (0.4, 1.0)
    blur_slope: float = 1.5  # Gaussian sigma in pixels per plane of defocus
    noise_sigma: float = 0.005
    pixel_pitch: float = 0.065
    z_step: float = 0.5

    def __post_init__(self):
        if min(self.height, self.width, self.planes, self.objects) < 1:
            raise ValueError("dimensions, plane and object counts must be positive")
        if not 0 < self.radius_um[0] <= self.radius_um[1]:
            raise ValueError("invalid radius range")
        if self.blur_slope < 0 or self.noise_sigma < 0:
            raise ValueError("blur slope and noise sigma must be non-negative")
        if self.pixel_pitch <= 0 or self.z_step <= 0:
            raise ValueError("pixel pitch and z-step must be positive")


@dataclass(frozen=True)
class Blob:
    cy: float
    cx: float
    ry: float  # semi-axes in pixels
    rx: float
    angle: float
    value: float
    home: int


def _sample_blobs(cfg: SynthConfig, rng: np.random.Generator) -> list[Blob]:
    blobs = []
    for _ in range(cfg.objects):
        ry, rx = rng.uniform(*cfg.radius_um, size=2) / cfg.pixel_pitch
        blobs.append(Blob(
            cy=rng.uniform(0, cfg.height), cx=rng.uniform(0, cfg.width),
            ry=ry, rx=rx, angle=rng.uniform(0, np.pi),
            value=rng.uniform(0.15, 0.4), home=int(rng.integers(cfg.planes)),
        ))
    return blobs


def _blob_mask(blob: Blob, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    c, s = math.cos(blob.angle), math.sin(blob.angle)
    dy, dx = yy - blob.cy, xx - blob.cx
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return ((u / blob.rx) ** 2 + (v / blob.ry) ** 2 <= 1.0).astype(np.float64)


def _gaussian_radius(sigma: float, truncate: float = 4.0) -> int:
    # kernel half-width used by scipy.ndimage.gaussian_filter
    return int(truncate * sigma + 0.5)


def render_blobs(cfg: SynthConfig, blobs: list[Blob]):
    """Return (per-plane noiseless renderings, sharp composite).

    Each blob is blurred with zero padding inside a window large enough to
    hold the whole truncated Gaussian response, which equals blurring the
    full frame.
    """
    h, w = cfg.height, cfg.width
    sharp = np.full((h, w), BACKGROUND)
    planes = np.full((cfg.planes, h, w), BACKGROUND)
    max_sigma = cfg.blur_slope * (cfg.planes - 1)
    for blob in blobs:
        reach = max(blob.rx, blob.ry) + _gaussian_radius(max_sigma) + 2
        y0, y1 = max(0, int(blob.cy - reach)), min(h, int(math.ceil(blob.cy + reach)) + 1)
        x0, x1 = max(0, int(blob.cx - reach)), min(w, int(math.ceil(blob.cx + reach)) + 1)
        if y0 >= y1 or x0 >= x1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
        layer = _blob_mask(blob, yy, xx) * (blob.value - BACKGROUND)
        sharp[y0:y1, x0:x1] += layer
        for z in range(cfg.planes):
            sigma = cfg.blur_slope * abs(z - blob.home)
            blurred = ndimage.gaussian_filter(layer, sigma, mode="constant") if sigma > 0 else layer
            planes[z, y0:y1, x0:x1] += blurred
    return np.clip(planes, 0.0, 1.0), np.clip(sharp, 0.0, 1.0)


def gen_synthetic_stack_with_blobs(cfg: SynthConfig):
    """Like :func:`gen_synthetic_stack` but also returns the sampled blobs."""
    rng = np.random.default_rng(cfg.seed)
    blobs = _sample_blobs(cfg, rng)
    planes, sharp = render_blobs(cfg, blobs)
    noisy = np.clip(planes + rng.normal(0.0, cfg.noise_sigma, planes.shape), 0.0, 1.0)
    return ZStack.from_array(noisy, cfg.z_step, cfg.pixel_pitch), Image(sharp, cfg.pixel_pitch), blobs


def gen_synthetic_stack(cfg: SynthConfig) -> tuple[ZStack, Image]:
    """Dark elliptical blobs on a bright field, each in focus on its home plane.

    Returns the noisy stack and the all-in-focus ground truth.
    """
    stack, truth, _ = gen_synthetic_stack_with_blobs(cfg)
    return stack, truth
