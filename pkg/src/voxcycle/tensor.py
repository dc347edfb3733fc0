"""Differentiable primitives for volumetric networks.

Tensors are plain ``numpy.ndarray`` objects. Volumes use the layout
``[channels, depth, height, width]`` and kernels ``[out, in, k, k, k]``.
Transpose-convolution kernels are stored ``[in, out, k, k, k]`` so that the
same array is the kernel of the adjoint forward convolution.

Every op returns a :class:`GradPair` whose ``backward`` maps the upstream
gradient to a tuple of gradients, one per differentiable argument, in
argument order.
"""

from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from threadpoolctl import threadpool_limits


class ConfigurationError(ValueError):
    """Raised when layer or op parameters cannot produce a valid output."""


class ShapeError(ValueError):
    """Raised when tensor dimensions are incompatible."""


class GradPair(NamedTuple):
    value: np.ndarray
    backward: Callable[[np.ndarray], tuple]


@dataclass(frozen=True)
class ConvParams:
    stride: int = 1
    padding: int = 0
    padding_mode: str = "zero"
    output_padding: int = 0

    def __post_init__(self):
        if self.stride < 1:
            raise ConfigurationError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0 or self.output_padding < 0:
            raise ConfigurationError("padding must be non-negative")
        if self.padding_mode not in ("zero", "reflect"):
            raise ConfigurationError(f"unknown padding mode {self.padding_mode!r}")


ACTIVATIONS = ("relu", "leaky_relu", "tanh", "sigmoid", "none")
LEAKY_SLOPE = 0.2

_AXES = ("depth", "height", "width")


@contextlib.contextmanager
def deterministic(enabled: bool = True):
    """Pin BLAS to one thread so reductions run in a fixed order."""
    if not enabled:
        yield
        return
    with threadpool_limits(limits=1):
        yield


def thread_cap() -> int | None:
    value = os.environ.get("VOXCYCLE_THREADS")
    if not value:
        return None
    cap = int(value)
    if cap < 1:
        raise ConfigurationError("VOXCYCLE_THREADS must be >= 1")
    return cap


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def transpose_output_size(size: int, kernel: int, stride: int, padding: int,
                          output_padding: int = 0) -> int:
    return (size - 1) * stride - 2 * padding + kernel + output_padding


def _check_volume(x: np.ndarray, name: str = "input"):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4D [C, D, H, W], got shape {x.shape}")


# ---------------------------------------------------------------- padding

def pad(x: np.ndarray, width: int, mode: str = "zero") -> GradPair:
    """Pad the three spatial axes of ``x`` by ``width`` on both sides.

    ``reflect`` mirrors about the border voxel without repeating it, so
    ``[1, 2, 3]`` padded by one becomes ``[2, 1, 2, 3, 2]``.
    """
    _check_volume(x)
    if width < 0:
        raise ConfigurationError("pad width must be non-negative")
    if mode not in ("zero", "reflect"):
        raise ConfigurationError(f"unknown padding mode {mode!r}")
    if width == 0:
        return GradPair(x, lambda g: (g,))
    spatial = x.shape[1:]
    if mode == "reflect":
        for axis, n in zip(_AXES, spatial):
            if width >= n:
                raise ConfigurationError(
                    f"reflect pad width {width} must be < {axis} size {n}")
        out = np.pad(x, ((0, 0),) + ((width, width),) * 3, mode="reflect")
    else:
        out = np.pad(x, ((0, 0),) + ((width, width),) * 3)

    def backward(g):
        if mode == "zero":
            return (g[:, width:-width, width:-width, width:-width].copy(),)
        g = g.copy()
        # fold each mirrored border back onto its source voxels, one axis at a time
        for ax in (1, 2, 3):
            n = spatial[ax - 1]
            core = [slice(None)] * 4
            core[ax] = slice(width, width + n)
            inner = g[tuple(core)].copy()
            for k in range(1, width + 1):
                lo = [slice(None)] * 4
                lo[ax] = width - k
                src = [slice(None)] * 4
                src[ax] = k
                inner[tuple(src)] += g[tuple(lo)]
                hi = [slice(None)] * 4
                hi[ax] = width + n - 1 + k
                src[ax] = n - 1 - k
                inner[tuple(src)] += g[tuple(hi)]
            g = inner
        return (g,)

    return GradPair(out, backward)


# ------------------------------------------------------------ convolution

def _window(xp: np.ndarray, i: int, j: int, l: int, stride: int, out_shape):
    do, ho, wo = out_shape
    return xp[:, i:i + stride * (do - 1) + 1:stride,
              j:j + stride * (ho - 1) + 1:stride,
              l:l + stride * (wo - 1) + 1:stride]


_COLS_BUDGET = 1 << 22  # elements per im2col chunk


def _taps(kernel):
    # [A, B, k, k, k] -> contiguous [k^3, A, B]; strided slices would bypass BLAS
    a, b, k = kernel.shape[:3]
    return np.ascontiguousarray(kernel.reshape(a, b, k ** 3).transpose(2, 0, 1))


def _columns(xp: np.ndarray, k: int, stride: int, out_shape):
    """Yield ``(i0, i1, cols)`` im2col blocks over slabs of the first kernel axis.

    ``cols`` has rows ordered (channel, i, j, l), matching
    ``kernel[:, :, i0:i1].reshape(cout, -1)``.
    """
    do, ho, wo = out_shape
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    win = win[:, :stride * (do - 1) + 1:stride, :stride * (ho - 1) + 1:stride,
              :stride * (wo - 1) + 1:stride]
    nvox = do * ho * wo
    slab = max(1, _COLS_BUDGET // max(1, xp.shape[0] * k * k * nvox))
    for i0 in range(0, k, slab):
        i1 = min(k, i0 + slab)
        cols = win[..., i0:i1, :, :].transpose(0, 4, 5, 6, 1, 2, 3)
        yield i0, i1, cols.reshape(-1, nvox)


def _correlate(xp, kernel, stride, out_shape):
    """``[Cout, voxels]`` cross-correlation of already padded ``xp``.

    Large volumes are processed in blocks of output depth planes so the
    temporary buffers stay near ``_COLS_BUDGET`` elements.
    """
    cout, cin, k = kernel.shape[:3]
    do, ho, wo = out_shape
    plane = min(cin, cout) * k ** 3 * ho * wo
    rows = max(1, (4 * _COLS_BUDGET) // max(1, plane))
    if rows >= do:
        return _correlate_block(xp, kernel, stride, out_shape)
    out = np.empty((cout, do, ho * wo), dtype=np.result_type(xp, kernel))
    for d0 in range(0, do, rows):
        d1 = min(do, d0 + rows)
        block = xp[:, d0 * stride:(d1 - 1) * stride + k]
        out[:, d0:d1] = _correlate_block(block, kernel, stride, (d1 - d0, ho, wo)).reshape(
            cout, d1 - d0, ho * wo)
    return out.reshape(cout, -1)


def _correlate_block(xp, kernel, stride, out_shape):
    # with fewer output than input channels it is cheaper to multiply every
    # tap against the whole input and sum shifted views: Cout, not Cin,
    # channels are copied per tap
    cout, cin, k = kernel.shape[:3]
    if cout < cin:
        return _shift_add(xp, kernel, stride, out_shape)
    out = None
    for i0, i1, cols in _columns(xp, k, stride, out_shape):
        part = kernel[:, :, i0:i1].reshape(cout, -1) @ cols
        out = part if out is None else out + part
    return out


def _shift_add(xp, kernel, stride, out_shape):
    cout, cin, k = kernel.shape[:3]
    taps = _taps(kernel)
    spatial = xp.shape[1:]
    flat = xp.reshape(cin, -1)
    out = np.zeros((cout,) + tuple(out_shape), dtype=np.result_type(xp, kernel))
    per = max(1, _COLS_BUDGET // max(1, cout * flat.shape[1]))
    offsets = list(np.ndindex(k, k, k))
    for t0 in range(0, len(offsets), per):
        block = taps[t0:t0 + per]
        y = (block.reshape(-1, cin) @ flat).reshape((len(block), cout) + spatial)
        for n, (i, j, l) in enumerate(offsets[t0:t0 + per]):
            out += _window(y[n], i, j, l, stride, out_shape)
    return out.reshape(cout, -1)


def _correlate_kernel_grad(xp, g2, k, stride, out_shape, kernel_shape):
    """Gradient of ``_correlate`` w.r.t. its kernel, given upstream ``g2``."""
    gk = np.empty(kernel_shape, dtype=np.result_type(xp, g2))
    for i0, i1, cols in _columns(xp, k, stride, out_shape):
        gk[:, :, i0:i1] = (g2 @ cols.T).reshape(kernel_shape[:2] + (i1 - i0, k, k))
    return gk


def _scatter(buf, kernel, src, stride, src_shape):
    """Adjoint of ``_correlate``: col2im of ``kernel^T @ src`` into ``buf``.

    ``kernel`` is ``[A, B, k, k, k]``, ``src`` is ``[A, voxels]`` and ``buf``
    has ``B`` channels.
    """
    a, b, k = kernel.shape[:3]
    slab = max(1, _COLS_BUDGET // max(1, b * k * k * src.shape[1]))
    for i0 in range(0, k, slab):
        i1 = min(k, i0 + slab)
        cols = kernel[:, :, i0:i1].reshape(a, -1).T @ src
        cols = cols.reshape((b, i1 - i0, k, k) + tuple(src_shape))
        for i, j, l in np.ndindex(i1 - i0, k, k):
            _window(buf, i0 + i, j, l, stride, src_shape)[...] += cols[:, i, j, l]


def _full_is_cheaper(cin, cout, n_out, n_padded, copy_cost=30):
    # rough cost model: one strided copy/add ~ copy_cost GEMM multiply-adds
    scatter = cin * n_out * (cout + copy_cost)
    full = n_padded * (cin * cout + copy_cost * min(cin, cout))
    return full < scatter


def conv3d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray,
           params: ConvParams = ConvParams()) -> GradPair:
    """Cross-correlate ``x`` with ``kernel``; backward gives (dx, dkernel, dbias).

    Forward and kernel gradient are chunked im2col GEMMs. At stride 1 the
    input gradient is itself a full correlation with the flipped kernel;
    strided layers scatter tap by tap instead.
    """
    _check_volume(x)
    if kernel.ndim != 5:
        raise ShapeError(f"kernel must be 5D [Cout, Cin, k, k, k], got {kernel.shape}")
    cout, cin, k = kernel.shape[0], kernel.shape[1], kernel.shape[2]
    if kernel.shape[2:] != (k, k, k):
        raise ShapeError(f"kernel must be cubic, got {kernel.shape[2:]}")
    if x.shape[0] != cin:
        raise ShapeError(f"input has {x.shape[0]} channels but kernel expects {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {bias.shape}")
    s, p = params.stride, params.padding
    out_shape = tuple(conv_output_size(n, k, s, p) for n in x.shape[1:])
    for axis, n in zip(_AXES, out_shape):
        if n < 1:
            raise ConfigurationError(
                f"conv3d output {axis} would be {n} for input {x.shape[1:]}, "
                f"kernel {k}, stride {s}, padding {p}")

    padded = pad(x, p, params.padding_mode)
    xp = padded.value
    nvox = int(np.prod(out_shape))
    out = _correlate(xp, kernel, s, out_shape)
    out += bias[:, None]
    value = out.reshape((cout,) + out_shape)

    # stride-1 backward through the zero-extended gradient pays off when the
    # input side has many channels relative to the output side
    via_full = s == 1 and _full_is_cheaper(cin, cout, nvox, int(np.prod(xp.shape[1:])))

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(cout, nvox))
        if via_full:
            gfull = np.pad(g.reshape((cout,) + out_shape), ((0, 0),) + ((k - 1, k - 1),) * 3)
            flipped = np.ascontiguousarray(kernel[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
            gxp = _correlate(gfull, flipped, 1, xp.shape[1:]).reshape(xp.shape)
            # gk[o, c, t] = sum_m xp[c, m] * gfull[o, m + k - 1 - t]
            gflip = _correlate_kernel_grad(gfull, xp.reshape(cin, -1), k, 1, xp.shape[1:],
                                           (cin, cout, k, k, k))
            gk = np.ascontiguousarray(gflip[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        else:
            gk = _correlate_kernel_grad(xp, g2, k, s, out_shape, kernel.shape)
            gxp = np.zeros_like(xp)
            _scatter(gxp, kernel, g2, s, out_shape)
        (gx,) = padded.backward(gxp)
        return gx, gk, g2.sum(axis=1)

    return GradPair(value, backward)


def conv3d_transpose(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray,
                     params: ConvParams = ConvParams()) -> GradPair:
    """Learnable upsampling; the adjoint of :func:`conv3d` in ``x``.

    ``kernel`` has shape ``[Cin, Cout, k, k, k]``. With k=3, stride 2,
    padding 1 and output_padding 1 every spatial axis doubles.
    """
    _check_volume(x)
    if kernel.ndim != 5:
        raise ShapeError(f"kernel must be 5D [Cin, Cout, k, k, k], got {kernel.shape}")
    cin, cout, k = kernel.shape[0], kernel.shape[1], kernel.shape[2]
    if kernel.shape[2:] != (k, k, k):
        raise ShapeError(f"kernel must be cubic, got {kernel.shape[2:]}")
    if x.shape[0] != cin:
        raise ShapeError(f"input has {x.shape[0]} channels but kernel expects {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {bias.shape}")
    s, p, op = params.stride, params.padding, params.output_padding
    if op >= s:
        raise ConfigurationError(
            f"output_padding ({op}) must be smaller than stride ({s})")
    if params.padding_mode != "zero":
        raise ConfigurationError("transpose convolution supports zero padding only")
    in_shape = x.shape[1:]
    out_shape = tuple(transpose_output_size(n, k, s, p, op) for n in in_shape)
    for axis, n in zip(_AXES, out_shape):
        if n < 1:
            raise ConfigurationError(
                f"conv3d_transpose output {axis} would be {n} for input {in_shape}")
    full = tuple(max(o + p, (n - 1) * s + k) for o, n in zip(out_shape, in_shape))
    nvox = int(np.prod(in_shape))
    x2 = np.ascontiguousarray(x.reshape(cin, nvox))
    buf = np.zeros((cout,) + full, dtype=np.result_type(x, kernel))
    _scatter(buf, kernel, x2, s, in_shape)
    crop = (slice(None),) + tuple(slice(p, p + n) for n in out_shape)
    value = buf[crop] + bias[:, None, None, None]

    def backward(g):
        gbuf = np.zeros_like(buf)
        gbuf[crop] = g
        gx = _correlate(gbuf, kernel, s, in_shape)
        gk = _correlate_kernel_grad(gbuf, x2, k, s, in_shape, kernel.shape)
        return gx.reshape(x.shape), gk, g.sum(axis=(1, 2, 3))

    return GradPair(value, backward)


# ---------------------------------------------------------- normalization

def instance_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                  epsilon: float = 1e-5) -> GradPair:
    _check_volume(x)
    c = x.shape[0]
    n = int(np.prod(x.shape[1:]))
    if n < 2:
        raise ConfigurationError(
            "instance_norm needs at least 2 voxels per channel; statistics are degenerate")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    flat = x.reshape(c, n)
    mu = flat.mean(axis=1, keepdims=True)
    xc = flat - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + epsilon)
    xhat = xc * inv
    value = (xhat * gamma[:, None] + beta[:, None]).reshape(x.shape)

    def backward(g):
        g2 = g.reshape(c, n)
        gbeta = g2.sum(axis=1)
        ggamma = (g2 * xhat).sum(axis=1)
        gxhat = g2 * gamma[:, None]
        gx = inv * (gxhat - gxhat.mean(axis=1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=1, keepdims=True))
        return gx.reshape(x.shape), ggamma, gbeta

    return GradPair(value, backward)


# ------------------------------------------------------------ activations

def activation(kind: str, x: np.ndarray) -> GradPair:
    if kind == "none":
        return GradPair(x, lambda g: (g,))
    if kind == "relu":
        mask = x > 0
        return GradPair(np.where(mask, x, 0).astype(x.dtype), lambda g: (g * mask,))
    if kind == "leaky_relu":
        mask = x > 0
        slope = np.where(mask, 1.0, LEAKY_SLOPE).astype(x.dtype)
        return GradPair(x * slope, lambda g: (g * slope,))
    if kind == "tanh":
        y = np.tanh(x)
        return GradPair(y, lambda g: (g * (1 - y * y),))
    if kind == "sigmoid":
        # split by sign so exp never overflows
        e = np.exp(-np.abs(x))
        y = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
        return GradPair(y, lambda g: (g * y * (1 - y),))
    raise ConfigurationError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
