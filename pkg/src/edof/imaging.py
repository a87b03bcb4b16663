"""Raster and z-stack data model plus binary PGM / stack-manifest I/O."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class PgmError(ValueError):
    """Base class for PGM decoding failures."""


class UnsupportedFormatError(PgmError):
    pass


class MalformedHeaderError(PgmError):
    pass


class TruncatedPayloadError(PgmError):
    pass


class UnsupportedMaxvalError(PgmError):
    pass


class StackError(ValueError):
    """Raised for inconsistent planes or manifests."""


class DimensionMismatchError(StackError):
    pass


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Image:
    """Single-channel raster with values in [0, 1].

    ``pixels`` is stored as a read-only (H, W) float64 array.
    """

    pixels: np.ndarray
    pixel_pitch: float = 1.0

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.size == 0:
            raise ValueError(f"expected a non-empty 2D raster, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        if not self.pixel_pitch > 0:
            raise ValueError("pixel_pitch must be positive")
        object.__setattr__(self, "pixels", _frozen(px))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True, eq=False)
class ZStack:
    """Ordered focal planes (ascending z) sharing one geometry."""

    planes: tuple[Image, ...]
    z_step: float = 1.0

    def __post_init__(self):
        planes = tuple(self.planes)
        if not planes:
            raise StackError("a z-stack needs at least one plane")
        ref = planes[0]
        for i, p in enumerate(planes[1:], start=1):
            if p.shape != ref.shape:
                raise DimensionMismatchError(
                    f"plane {i} has shape {p.shape}, plane 0 has {ref.shape}")
            if not math.isclose(p.pixel_pitch, ref.pixel_pitch, rel_tol=1e-12):
                raise DimensionMismatchError(
                    f"plane {i} pixel pitch {p.pixel_pitch} != {ref.pixel_pitch}")
        if not self.z_step > 0:
            raise StackError("z_step must be positive")
        object.__setattr__(self, "planes", planes)

    @classmethod
    def from_array(cls, volume, z_step: float = 1.0, pixel_pitch: float = 1.0) -> "ZStack":
        volume = np.asarray(volume, dtype=np.float64)
        if volume.ndim == 2:
            volume = volume[None]
        return cls(tuple(Image(v, pixel_pitch) for v in volume), z_step)

    def __len__(self) -> int:
        return len(self.planes)

    @property
    def shape(self) -> tuple[int, int]:
        return self.planes[0].shape

    @property
    def pixel_pitch(self) -> float:
        return self.planes[0].pixel_pitch

    def to_array(self) -> np.ndarray:
        """(D, H, W) copy of the plane data."""
        return np.stack([p.pixels for p in self.planes])


@dataclass(frozen=True)
class RawImage:
    """Integer samples as stored in a PGM file."""

    samples: np.ndarray
    maxval: int

    @property
    def bit_depth(self) -> int:
        return 8 if self.maxval == 255 else 16

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class StackManifest:
    z_step_um: float
    pixel_pitch_um: float
    plane_paths: tuple[Path, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not self.plane_paths:
            raise StackError("manifest lists no planes")
        if not (self.z_step_um > 0 and self.pixel_pitch_um > 0):
            raise StackError("z_step_um and pixel_pitch_um must be positive")
        object.__setattr__(self, "plane_paths", tuple(Path(p) for p in self.plane_paths))


# --------------------------------------------------------------------------
# PGM

_WHITESPACE = b" \t\n\r\v\f"


def _read_header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos] in _WHITESPACE:
            pos += 1
        if pos < n and data[pos] == ord("#"):
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
            continue
        if pos >= n:
            raise MalformedHeaderError("header ends before all fields were read")
        start = pos
        while pos < n and data[pos] not in _WHITESPACE and data[pos] != ord("#"):
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    if pos >= n or data[pos] not in _WHITESPACE:
        raise MalformedHeaderError("missing whitespace after maxval")
    return tokens, pos + 1


def decode_pgm(data: bytes) -> RawImage:
    if len(data) < 2:
        raise MalformedHeaderError("file too short for a PGM magic number")
    magic = data[:2]
    if magic != b"P5":
        raise UnsupportedFormatError(f"unsupported format {magic!r}; only binary PGM (P5) is read")
    tokens, offset = _read_header_tokens(data[2:], 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise MalformedHeaderError(f"non-integer header field in {tokens!r}") from None
    if width < 1 or height < 1:
        raise MalformedHeaderError(f"invalid dimensions {width}x{height}")
    if maxval not in (255, 65535):
        raise UnsupportedMaxvalError(f"maxval {maxval} not in {{255, 65535}}")
    offset += 2
    nbytes = 1 if maxval == 255 else 2
    expected = width * height * nbytes
    payload = data[offset:offset + expected]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"payload has {len(payload)} bytes, expected {expected}")
    dtype = np.uint8 if nbytes == 1 else np.dtype(">u2")
    samples = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return RawImage(samples.astype(np.uint16 if nbytes == 2 else np.uint8), maxval)


def load_pgm(path) -> RawImage:
    return decode_pgm(Path(path).read_bytes())


def to_unit(raw: RawImage, pixel_pitch: float = 1.0) -> Image:
    if raw.maxval not in (255, 65535):
        raise UnsupportedMaxvalError(f"maxval {raw.maxval} not in {{255, 65535}}")
    return Image(raw.samples.astype(np.float64) / raw.maxval, pixel_pitch)


def quantize(pixels: np.ndarray, bit_depth: int) -> np.ndarray:
    """Round-half-up quantization of [0, 1] values to integer samples."""
    if bit_depth not in (8, 16):
        raise ValueError(f"bit depth must be 8 or 16, got {bit_depth}")
    maxval = 255 if bit_depth == 8 else 65535
    q = np.floor(np.asarray(pixels, dtype=np.float64) * maxval + 0.5)
    return np.clip(q, 0, maxval).astype(np.uint8 if bit_depth == 8 else np.uint16)


def encode_pgm(samples: np.ndarray, maxval: int) -> bytes:
    h, w = samples.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    dtype = np.uint8 if maxval == 255 else np.dtype(">u2")
    return header + np.ascontiguousarray(samples, dtype=dtype).tobytes()


def save_pgm(image: Image, bit_depth: int, path) -> None:
    samples = quantize(image.pixels, bit_depth)
    Path(path).write_bytes(encode_pgm(samples, 255 if bit_depth == 8 else 65535))


def load_image(path, pixel_pitch: float = 1.0) -> Image:
    return to_unit(load_pgm(path), pixel_pitch)


# --------------------------------------------------------------------------
# manifests

def parse_manifest(text: str, base_dir=".") -> StackManifest:
    """Parse manifest text; plane paths are resolved relative to ``base_dir``."""
    z_step = pitch = None
    planes: list[Path] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise StackError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = key.strip(), value.strip()
        if key == "z_step_um":
            z_step = float(value)
        elif key == "pixel_pitch_um":
            pitch = float(value)
        elif key == "plane":
            planes.append(Path(base_dir) / value)
        else:
            raise StackError(f"line {lineno}: unknown key {key!r}")
    if z_step is None or pitch is None:
        raise StackError("manifest must define z_step_um and pixel_pitch_um")
    return StackManifest(z_step, pitch, tuple(planes))


def read_manifest(path) -> StackManifest:
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8"), path.parent)


def write_manifest(path, z_step_um: float, pixel_pitch_um: float,
                   plane_files: Sequence[str]) -> None:
    lines = [
        "# z-stack manifest",
        f"z_step_um={z_step_um!r}",
        f"pixel_pitch_um={pixel_pitch_um!r}",
    ]
    lines += [f"plane={p}" for p in plane_files]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_stack(manifest: StackManifest) -> ZStack:
    planes = []
    for p in manifest.plane_paths:
        if not os.path.exists(p):
            raise FileNotFoundError(f"plane file not found: {p}")
        planes.append(load_image(p, manifest.pixel_pitch_um))
    return ZStack(tuple(planes), manifest.z_step_um)


def save_stack(stack: ZStack, directory, stem: str, bit_depth: int = 16) -> Path:
    """Write planes as ``<stem>_zNN.pgm`` plus ``<stem>.manifest``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, plane in enumerate(stack.planes):
        name = f"{stem}_z{i:02d}.pgm"
        save_pgm(plane, bit_depth, directory / name)
        names.append(name)
    manifest = directory / f"{stem}.manifest"
    write_manifest(manifest, stack.z_step, stack.pixel_pitch, names)
    return manifest
