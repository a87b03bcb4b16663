"""Encoder / residual / decoder fusion networks in plain numpy.

Two variants share the residual trunk and decoder:

* ``max``: a 2D encoder is applied to every focal plane and the feature maps
  are fused by an element-wise maximum across planes.
* ``volumetric``: the encoder is 3D over the whole stack and the feature
  volume is averaged over z.

All spatial tensors are handled as ``(N, C, Z, H, W)``; 2D layers use ``Z = 1``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import Image, ZStack

VARIANTS = ("max", "volumetric")


@dataclass(frozen=True)
class ArchConfig:
    variant: str = "max"
    width: int = 32
    residual_blocks: int = 9
    planes: int = 0  # input depth of the volumetric variant; 0 means unset / max variant

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.width < 1 or self.residual_blocks < 0:
            raise ValueError("width must be >= 1 and residual_blocks >= 0")
        if self.planes < 0:
            raise ValueError("planes must be >= 0")


@dataclass(frozen=True, eq=False)
class NetworkParams:
    tensors: tuple  # architecture order, see param_shapes

    @property
    def dtype(self):
        return self.tensors[0].dtype

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(tuple(t.astype(dtype) for t in self.tensors))

    def copy(self) -> "NetworkParams":
        return NetworkParams(tuple(t.copy() for t in self.tensors))


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1
    patch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.patch_size < 4:
            raise ValueError("invalid training counts")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if self.patch_size % 4:
            raise ValueError("patch size must be divisible by 4")


class ShapeError(ValueError):
    pass


# --------------------------------------------------------------------------
# architecture table

def param_shapes(cfg: ArchConfig) -> list[tuple[int, ...]]:
    """Weight / bias shapes in file order.

    Conv weights are ``(out, in, [kz,] kh, kw)``; transposed-conv weights are
    ``(in, out, kh, kw)``.
    """
    f = cfg.width
    if cfg.variant == "max":
        enc = [(f, 1, 9, 9), (2 * f, f, 3, 3), (4 * f, 2 * f, 3, 3)]
    else:
        enc = [(f, 1, 3, 9, 9), (2 * f, f, 3, 3, 3), (4 * f, 2 * f, 3, 3, 3)]
    shapes = []
    for w in enc:
        shapes += [w, (w[0],)]
    for _ in range(cfg.residual_blocks):
        shapes += [(4 * f, 4 * f, 3, 3), (4 * f,), (4 * f, 4 * f, 3, 3), (4 * f,)]
    shapes += [(4 * f, 2 * f, 3, 3), (2 * f,), (2 * f, f, 3, 3), (f,), (1, f, 9, 9), (1,)]
    return shapes


def init_params(cfg: ArchConfig, seed: int = 0, dtype=np.float64) -> NetworkParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = []
    for shape in param_shapes(cfg):
        if len(shape) == 1:
            tensors.append(np.zeros(shape, dtype=dtype))
            continue
        receptive = int(np.prod(shape[2:]))
        limit = np.sqrt(6.0 / (shape[0] * receptive + shape[1] * receptive))
        tensors.append(rng.uniform(-limit, limit, size=shape).astype(dtype))
    return NetworkParams(tuple(tensors))


def _check_params(params: NetworkParams, cfg: ArchConfig) -> None:
    expected = param_shapes(cfg)
    got = [t.shape for t in params.tensors]
    if got != [tuple(s) for s in expected]:
        raise ShapeError(f"parameter shapes {got} do not match architecture {expected}")


# --------------------------------------------------------------------------
# layer primitives

def _as5(w: np.ndarray) -> np.ndarray:
    return w[:, :, None] if w.ndim == 4 else w


def _out_len(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _window(a: np.ndarray, start, step, count):
    return a[:, :,
             start[0]:start[0] + step[0] * (count[0] - 1) + 1:step[0],
             start[1]:start[1] + step[1] * (count[1] - 1) + 1:step[1],
             start[2]:start[2] + step[2] * (count[2] - 1) + 1:step[2]]


# element budget above which convolutions loop over kernel offsets instead of im2col
_IM2COL_LIMIT = 2_000_000


def _offsets(k):
    return np.ndindex(*k)


def conv_forward(x, w, b, stride=(1, 1, 1), pad=(0, 0, 0)):
    """Cross-correlation of ``x (N,Cin,Z,H,W)`` with ``w (Cout,Cin,kz,kh,kw)``."""
    w = _as5(w)
    k = w.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in pad))
    out_dims = tuple(_out_len(x.shape[2 + i], k[i], stride[i], pad[i]) for i in range(3))
    if x.shape[0] * x.shape[1] * int(np.prod(out_dims)) * int(np.prod(k)) <= _IM2COL_LIMIT:
        # small problems: one contraction over a strided window view
        view = np.lib.stride_tricks.sliding_window_view(xp, k, axis=(2, 3, 4))
        view = view[:, :, ::stride[0], ::stride[1], ::stride[2]]
        acc = np.tensordot(w, view, axes=([1, 2, 3, 4], [1, 5, 6, 7]))
    else:
        acc = np.zeros((w.shape[0], x.shape[0]) + out_dims, dtype=x.dtype)
        for off in _offsets(k):
            patch = _window(xp, off, stride, out_dims)
            acc += np.tensordot(w[(slice(None), slice(None)) + off], patch, axes=([1], [1]))
    out = np.moveaxis(acc, 0, 1) + b.reshape(1, -1, 1, 1, 1)
    return out, xp


def conv_backward(g, xp, w, x_shape, stride=(1, 1, 1), pad=(0, 0, 0)):
    w5 = _as5(w)
    k = w5.shape[2:]
    out_dims = g.shape[2:]
    gw = np.zeros_like(w5)
    gxp = np.zeros_like(xp)
    for off in _offsets(k):
        sl = (slice(None), slice(None)) + off
        patch = _window(xp, off, stride, out_dims)
        gw[sl] = np.tensordot(g, patch, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        contrib = np.moveaxis(np.tensordot(w5[sl], g, axes=([0], [1])), 0, 1)
        _window(gxp, off, stride, out_dims)[...] += contrib
    gb = g.sum(axis=(0, 2, 3, 4))
    gx = gxp[:, :,
             pad[0]:pad[0] + x_shape[2],
             pad[1]:pad[1] + x_shape[3],
             pad[2]:pad[2] + x_shape[4]]
    return gx, gw.reshape(w.shape), gb


def tconv_forward(x, w, b, stride=(1, 2, 2), pad=(0, 1, 1), out_pad=(0, 1, 1)):
    """Transposed convolution; ``w`` is ``(Cin, Cout, kz, kh, kw)``.

    Output length per axis is ``(n - 1) * s - 2 * p + k + out_pad`` with ``out_pad <= p``.
    """
    w = _as5(w)
    k = w.shape[2:]
    in_dims = x.shape[2:]
    full = tuple((in_dims[i] - 1) * stride[i] + k[i] for i in range(3))
    acc = np.zeros((w.shape[1], x.shape[0]) + full, dtype=x.dtype)
    for off in _offsets(k):
        contrib = np.tensordot(w[(slice(None), slice(None)) + off], x, axes=([0], [1]))
        _window(acc, off, stride, in_dims)[...] += contrib
    out_dims = tuple(full[i] - 2 * pad[i] + out_pad[i] for i in range(3))
    if any(op > p for op, p in zip(out_pad, pad)):
        raise ShapeError("output padding larger than padding is not supported")
    acc = acc[:, :,
              pad[0]:pad[0] + out_dims[0],
              pad[1]:pad[1] + out_dims[1],
              pad[2]:pad[2] + out_dims[2]]
    return np.moveaxis(acc, 0, 1) + b.reshape(1, -1, 1, 1, 1)


def tconv_backward(g, x, w, stride=(1, 2, 2), pad=(0, 1, 1)):
    w5 = _as5(w)
    k = w5.shape[2:]
    in_dims = x.shape[2:]
    full = tuple((in_dims[i] - 1) * stride[i] + k[i] for i in range(3))
    gfull = np.zeros(g.shape[:2] + full, dtype=g.dtype)
    gfull[:, :,
          pad[0]:pad[0] + g.shape[2],
          pad[1]:pad[1] + g.shape[3],
          pad[2]:pad[2] + g.shape[4]] = g
    gx = np.zeros_like(x)
    gw = np.zeros_like(w5)
    for off in _offsets(k):
        sl = (slice(None), slice(None)) + off
        gwin = _window(gfull, off, stride, in_dims)
        gx += np.moveaxis(np.tensordot(w5[sl], gwin, axes=([1], [1])), 0, 1)
        gw[sl] = np.tensordot(x, gwin, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    gb = g.sum(axis=(0, 2, 3, 4))
    return gx, gw.reshape(w.shape), gb


def _relu(x):
    return np.maximum(x, 0)


# --------------------------------------------------------------------------
# network

_S1 = (1, 1, 1)
_S2 = (1, 2, 2)


def _encoder_layout(cfg: ArchConfig):
    if cfg.variant == "max":
        return [(_S1, (0, 4, 4)), (_S2, (0, 1, 1)), (_S2, (0, 1, 1))]
    return [(_S1, (1, 4, 4)), (_S2, (1, 1, 1)), (_S2, (1, 1, 1))]


def _encode(tensors, cfg, x):
    caches = []
    for i, (stride, pad) in enumerate(_encoder_layout(cfg)):
        z, xp = conv_forward(x, tensors[2 * i], tensors[2 * i + 1], stride, pad)
        caches.append((x.shape, xp, z))
        x = _relu(z)
    return x, caches


def _encode_backward(tensors, cfg, g, caches, grads):
    for i in reversed(range(3)):
        stride, pad = _encoder_layout(cfg)[i]
        x_shape, xp, z = caches[i]
        g = g * (z > 0)
        g, gw, gb = conv_backward(g, xp, tensors[2 * i], x_shape, stride, pad)
        grads[2 * i] += gw
        grads[2 * i + 1] += gb
    return g


def _validate_input(cfg: ArchConfig, vol: np.ndarray) -> None:
    d, h, w = vol.shape
    if h % 4 or w % 4:
        raise ShapeError(f"plane size {h}x{w} must be divisible by 4")
    if cfg.variant == "volumetric" and d != cfg.planes:
        if cfg.planes == 0:
            raise ShapeError("volumetric model has no plane count set")
        raise ShapeError(f"volumetric model expects {cfg.planes} planes, got {d}")


def forward_array(params: NetworkParams, cfg: ArchConfig, vol: np.ndarray, keep_cache=False):
    """Run the network on a ``(D, H, W)`` array; returns an ``(H, W)`` array in [0, 1]."""
    _check_params(params, cfg)
    vol = np.asarray(vol, dtype=params.dtype)
    _validate_input(cfg, vol)
    t = params.tensors
    cache: dict = {"vol_shape": vol.shape}

    if cfg.variant == "max":
        # one pass per plane keeps each plane's arithmetic independent of plane order
        feats, enc_caches = [], []
        for plane in vol:
            f, c = _encode(t, cfg, plane[None, None, None])
            feats.append(f)
            enc_caches.append(c)
        stacked = np.stack(feats)
        winner = np.argmax(stacked, axis=0)
        h = np.take_along_axis(stacked, winner[None], axis=0)[0]
        cache.update(enc=enc_caches, winner=winner, n_planes=len(feats))
    else:
        f, c = _encode(t, cfg, vol[None, None])
        h = f.mean(axis=2, keepdims=True)
        cache.update(enc=c, depth=f.shape[2])

    pos = 6
    res_caches = []
    for _ in range(cfg.residual_blocks):
        w1, b1, w2, b2 = t[pos:pos + 4]
        z1, xp1 = conv_forward(h, w1, b1, _S1, (0, 1, 1))
        a1 = _relu(z1)
        z2, xp2 = conv_forward(a1, w2, b2, _S1, (0, 1, 1))
        res_caches.append((h.shape, xp1, z1, a1.shape, xp2))
        h = h + z2
        pos += 4
    cache["res"] = res_caches

    wd1, bd1, wd2, bd2, wd3, bd3 = t[pos:pos + 6]
    u1 = tconv_forward(h, wd1, bd1)
    a1 = _relu(u1)
    u2 = tconv_forward(a1, wd2, bd2)
    a2 = _relu(u2)
    z3, xp3 = conv_forward(a2, wd3, bd3, _S1, (0, 4, 4))
    tanh = np.tanh(z3)
    out = (tanh[0, 0, 0] + 1) / 2
    if keep_cache:
        cache.update(dec=(h, u1, a1, u2, a2, xp3), tanh=tanh)
        return out, cache
    return out


def backward_array(params: NetworkParams, cfg: ArchConfig, vol: np.ndarray, target: np.ndarray):
    """Loss and exact gradients of ``mean((forward - target)**2)``."""
    out, cache = forward_array(params, cfg, vol, keep_cache=True)
    target = np.asarray(target, dtype=out.dtype)
    if target.shape != out.shape:
        raise ShapeError(f"target {target.shape} does not match output {out.shape}")
    diff = out - target
    loss = float(np.mean(diff ** 2))
    t = params.tensors
    grads = [np.zeros_like(x) for x in t]

    g_out = 2 * diff / diff.size
    g = (g_out / 2 * (1 - cache["tanh"][0, 0, 0] ** 2))[None, None, None]

    h, u1, a1, u2, a2, xp3 = cache["dec"]
    pos = 6 + 4 * cfg.residual_blocks
    wd1, wd2, wd3 = t[pos], t[pos + 2], t[pos + 4]
    g, grads[pos + 4], grads[pos + 5] = conv_backward(g, xp3, wd3, a2.shape, _S1, (0, 4, 4))
    g = g * (u2 > 0)
    g, grads[pos + 2], grads[pos + 3] = tconv_backward(g, a1, wd2)
    g = g * (u1 > 0)
    g, grads[pos], grads[pos + 1] = tconv_backward(g, h, wd1)

    for r in reversed(range(cfg.residual_blocks)):
        base = 6 + 4 * r
        h_shape, xp1, z1, a1_shape, xp2 = cache["res"][r]
        g_branch, grads[base + 2], grads[base + 3] = conv_backward(
            g, xp2, t[base + 2], a1_shape, _S1, (0, 1, 1))
        g_branch = g_branch * (z1 > 0)
        g_in, grads[base], grads[base + 1] = conv_backward(
            g_branch, xp1, t[base], h_shape, _S1, (0, 1, 1))
        g = g + g_in

    if cfg.variant == "max":
        winner = cache["winner"]
        for p in range(cache["n_planes"]):
            gp = np.where(winner == p, g, 0)
            if np.any(gp):
                _encode_backward(t, cfg, gp, cache["enc"][p], grads)
    else:
        depth = cache["depth"]
        gf = np.repeat(g / depth, depth, axis=2)
        _encode_backward(t, cfg, gf, cache["enc"], grads)
    return NetworkParams(tuple(grads)), loss


def forward(params: NetworkParams, cfg: ArchConfig, stack: ZStack) -> Image:
    out = forward_array(params, cfg, stack.to_array())
    return Image(np.clip(out.astype(np.float64), 0.0, 1.0), stack.pixel_pitch)


def backward(params: NetworkParams, cfg: ArchConfig, stack: ZStack, target):
    """Gradients (same shapes as ``params``) and loss for one stack/target pair."""
    tgt = target.pixels if isinstance(target, Image) else target
    return backward_array(params, cfg, stack.to_array(), tgt)


def mse_loss(pred, target) -> float:
    a = pred.pixels if isinstance(pred, Image) else np.asarray(pred, dtype=np.float64)
    b = target.pixels if isinstance(target, Image) else np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


# --------------------------------------------------------------------------
# input preparation

def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    # corner-aligned: output sample i sits at source coordinate i * (n_in - 1) / (n_out - 1)
    m = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m


def pre_upsample(stack: ZStack, target_h: int, target_w: int) -> ZStack:
    """Corner-aligned bilinear upsampling of every plane to ``target_h x target_w``."""
    h, w = stack.shape
    if target_h < h or target_w < w:
        raise ValueError(f"cannot shrink {h}x{w} to {target_h}x{target_w}")
    if (target_h, target_w) == (h, w):
        return stack
    my, mx = _bilinear_matrix(h, target_h), _bilinear_matrix(w, target_w)
    vol = np.einsum("yi,dij,xj->dyx", my, stack.to_array(), mx)
    pitch = stack.pixel_pitch * w / target_w
    return ZStack.from_array(np.clip(vol, 0.0, 1.0), stack.z_step, pitch)


# --------------------------------------------------------------------------
# training

def _crop_batch(rng, dataset, batch_size, patch):
    items = []
    for _ in range(batch_size):
        i = int(rng.integers(len(dataset)))
        vol, tgt = dataset[i]
        h, w = tgt.shape
        ph, pw = min(patch, h - h % 4), min(patch, w - w % 4)
        y = int(rng.integers(h - ph + 1))
        x = int(rng.integers(w - pw + 1))
        items.append((vol[:, y:y + ph, x:x + pw], tgt[y:y + ph, x:x + pw]))
    return items


def train(params: NetworkParams, cfg: ArchConfig, dataset, tcfg: TrainConfig):
    """Adam on mean-squared error over random patches.

    ``dataset`` holds ``(ZStack, Image)`` pairs already at target resolution.
    Returns the updated parameters and the per-step (pre-update) batch loss.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    arrays = []
    for stack, target in dataset:
        tgt = target.pixels if isinstance(target, Image) else np.asarray(target)
        if stack.shape != tgt.shape:
            raise ShapeError(f"stack {stack.shape} and target {tgt.shape} differ in size")
        arrays.append((stack.to_array(), tgt))

    rng = np.random.default_rng(tcfg.seed)
    theta = [t.copy() for t in params.tensors]
    m = [np.zeros_like(t) for t in theta]
    v = [np.zeros_like(t) for t in theta]
    history = []
    for step in range(1, tcfg.steps + 1):
        batch = _crop_batch(rng, arrays, tcfg.batch_size, tcfg.patch_size)
        current = NetworkParams(tuple(theta))
        total = [np.zeros_like(t) for t in theta]
        loss = 0.0
        for vol, tgt in batch:
            grads, l = backward_array(current, cfg, vol, tgt)
            loss += l / len(batch)
            for acc, g in zip(total, grads.tensors):
                acc += g / len(batch)
        history.append(loss)
        b1c = 1 - tcfg.beta1 ** step
        b2c = 1 - tcfg.beta2 ** step
        for i, g in enumerate(total):
            m[i] = tcfg.beta1 * m[i] + (1 - tcfg.beta1) * g
            v[i] = tcfg.beta2 * v[i] + (1 - tcfg.beta2) * g * g
            theta[i] = theta[i] - tcfg.learning_rate * (m[i] / b1c) / (np.sqrt(v[i] / b2c) + tcfg.eps)
    return NetworkParams(tuple(t.astype(params.dtype) for t in theta)), history


# --------------------------------------------------------------------------
# weights file

MAGIC = b"EDOF"
VERSION = 1


class WeightsFormatError(ValueError):
    pass


class WeightsTruncatedError(WeightsFormatError):
    pass


def save_weights(params: NetworkParams, cfg: ArchConfig, path) -> None:
    """Write ``EDOF`` header then each tensor as rank, dims and float32 LE data."""
    _check_params(params, cfg)
    out = bytearray(MAGIC)
    out += struct.pack("<IBIII", VERSION, VARIANTS.index(cfg.variant), cfg.width,
                       cfg.residual_blocks, cfg.planes if cfg.variant == "volumetric" else 0)
    for t in params.tensors:
        out += struct.pack("<B", t.ndim)
        out += struct.pack(f"<{t.ndim}I", *t.shape)
        out += np.ascontiguousarray(t, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def decode_weights(data: bytes):
    if data[:4] != MAGIC:
        raise WeightsFormatError(f"bad magic {data[:4]!r}")
    head = struct.calcsize("<IBIII")
    if len(data) < 4 + head:
        raise WeightsTruncatedError("header is truncated")
    version, variant, width, blocks, planes = struct.unpack_from("<IBIII", data, 4)
    if version != VERSION:
        raise WeightsFormatError(f"unsupported version {version}")
    if variant >= len(VARIANTS):
        raise WeightsFormatError(f"unknown variant code {variant}")
    cfg = ArchConfig(VARIANTS[variant], width, blocks, planes)
    pos = 4 + head
    tensors = []
    for expected in param_shapes(cfg):
        if pos + 1 > len(data):
            raise WeightsTruncatedError("file ends before all tensors were read")
        rank = data[pos]
        pos += 1
        if pos + 4 * rank > len(data):
            raise WeightsTruncatedError("tensor header is truncated")
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        if tuple(dims) != tuple(expected):
            raise ShapeError(f"tensor shape {dims} does not match header-implied {expected}")
        nbytes = 4 * int(np.prod(dims))
        if pos + nbytes > len(data):
            raise WeightsTruncatedError(
                f"tensor payload needs {nbytes} bytes, {len(data) - pos} remain")
        tensors.append(np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos)
                       .reshape(dims).astype(np.float32))
        pos += nbytes
    if pos != len(data):
        raise WeightsFormatError(f"{len(data) - pos} trailing bytes after last tensor")
    return NetworkParams(tuple(tensors)), cfg


def load_weights(path):
    return decode_weights(Path(path).read_bytes())
