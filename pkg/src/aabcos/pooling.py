"""Downsampling layers: strided subsampling and the two anti-aliased variants.

An anti-aliased reduction replaces ``conv(stride=s)`` by ``conv(stride=1)``
followed by a low-pass-then-subsample pooling layer with stride ``s``.
"""
from __future__ import annotations

import enum
import functools
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, fft2, gather2d, ifft2


class PoolKind(str, enum.Enum):
    STRIDED = "strided"
    BLURPOOL = "blurpool"
    FLC = "flc"


def binomial_kernel(size: int = 3) -> np.ndarray:
    row = np.array([1.0])
    for _ in range(size - 1):
        row = np.convolve(row, [1.0, 1.0])
    row /= row.sum()
    return np.outer(row, row)


@dataclass
class PoolVariant:
    kind: PoolKind = PoolKind.FLC
    stride: int = 2
    blur_kernel: np.ndarray = field(default_factory=binomial_kernel)

    def __post_init__(self):
        self.kind = PoolKind(self.kind)
        self.blur_kernel = np.asarray(self.blur_kernel, dtype=np.float64)
        if self.stride < 2:
            raise ValueError(f"pooling stride must be >= 2, got {self.stride}")
        if np.any(self.blur_kernel < 0) or not np.isclose(self.blur_kernel.sum(), 1.0):
            raise ValueError("blur kernel must be non-negative and sum to 1")

    def __call__(self, x: Tensor) -> Tensor:
        if self.kind is PoolKind.BLURPOOL:
            return blurpool(x, self.blur_kernel, self.stride)
        if self.kind is PoolKind.FLC:
            return flcpool(x, self.stride)
        return strided_reduce(x, self.stride)


def _reflect_index(n: int, before: int, after: int) -> np.ndarray:
    idx = np.arange(-before, n + after)
    period = 2 * (n - 1) if n > 1 else 1
    idx = np.abs(idx) % period if n > 1 else np.zeros_like(idx)
    return np.where(idx >= n, period - idx, idx)


def reflect_pad(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    H, W = x.shape[-2:]
    return gather2d(x, _reflect_index(H, top, bottom), _reflect_index(W, left, right))


def strided_reduce(x: Tensor, stride: int = 2) -> Tensor:
    """Keep every ``stride``-th row and column starting at 0 (no low-pass)."""
    H, W = x.shape[-2:]
    return gather2d(x, np.arange(0, H, stride), np.arange(0, W, stride))


def blurpool(x: Tensor, kernel=None, stride: int = 2) -> Tensor:
    """Depthwise blur with reflect padding, then subsample from index 0.

    Output spatial size is ``ceil(H / stride)``.  Only the retained positions
    are computed.
    """
    kernel = binomial_kernel() if kernel is None else np.asarray(kernel, dtype=np.float64)
    H, W = x.shape[-2:]
    kh, kw = kernel.shape
    padded = reflect_pad(x, (kh - 1) // 2, kh // 2, (kw - 1) // 2, kw // 2)
    h, w = -(-H // stride), -(-W // stride)
    taps = [(i, j, float(kernel[i, j])) for i in range(kh) for j in range(kw) if kernel[i, j] != 0]
    src = padded.data
    out = np.zeros(src.shape[:-2] + (h, w), dtype=src.dtype)
    for i, j, k in taps:
        out += k * src[..., i:i + stride * h:stride, j:j + stride * w:stride]

    def backward(g):
        gp = np.zeros_like(src)
        for i, j, k in taps:
            gp[..., i:i + stride * h:stride, j:j + stride * w:stride] += k * g
        return (gp,)

    return Tensor.from_op(out, (padded,), backward)


def _kept_frequencies(n: int) -> np.ndarray:
    # the ambiguous Nyquist bin of an even target length is dropped
    half = (n - 1) // 2
    return np.arange(-half, half + 1)


@functools.lru_cache(maxsize=64)
def _flc_matrix(n: int, stride: int) -> np.ndarray:
    """Real ``(n/stride, n)`` matrix of the 1-d FLC resampler, built through the FFT."""
    m = n // stride
    f = _kept_frequencies(m)
    spec = np.fft.fft(np.eye(n), axis=0)
    small = np.zeros((m, n), dtype=complex)
    small[f % m] = spec[f % n]
    op = np.fft.ifft(small, axis=0) / stride
    assert np.abs(op.imag).max() < 1e-12, "FLC imaginary residue"
    op = op.real
    op.setflags(write=False)
    return op


def flcpool(x: Tensor, stride: int = 2) -> Tensor:
    """Ideal low-pass in the frequency domain followed by resampling at 1/stride.

    Keeps the centred ``(H/stride) x (W/stride)`` block of the 2-d spectrum,
    inverts at the reduced size and rescales by ``1/stride**2`` so constants are
    preserved.  The retained block is a product of two 1-d bands, so the whole
    operator factors as ``A_rows @ x @ A_cols.T``; the two matrices are built
    once per size through the FFT (see :func:`flcpool_fft` for the direct
    route).  Sizes that are not a multiple of ``stride`` are reflect-padded
    first and the padding is recorded in ``out.meta["pad"]``.
    """
    H, W = x.shape[-2:]
    pad_h = (-H) % stride
    pad_w = (-W) % stride
    if pad_h or pad_w:
        x = reflect_pad(x, 0, pad_h, 0, pad_w)
        H, W = H + pad_h, W + pad_w
    a_r = _flc_matrix(H, stride).astype(x.dtype)
    a_c = _flc_matrix(W, stride).astype(x.dtype)
    out = a_r @ x.data @ a_c.T

    def backward(g):
        return (a_r.T @ g @ a_c,)

    result = Tensor.from_op(out, (x,), backward)
    result.meta["pad"] = (pad_h, pad_w)
    return result


def flcpool_fft(x: np.ndarray, stride: int = 2) -> np.ndarray:
    """Direct 2-d FFT route for :func:`flcpool` (sizes divisible by ``stride``)."""
    x = np.asarray(x, dtype=np.float64)
    H, W = x.shape[-2:]
    h, w = H // stride, W // stride
    fr, fc = _kept_frequencies(h), _kept_frequencies(w)
    spec = fft2(x)
    small = np.zeros(x.shape[:-2] + (h, w), dtype=complex)
    small[..., (fr % h)[:, None], (fc % w)[None, :]] = spec[..., (fr % H)[:, None], (fc % W)[None, :]]
    res = ifft2(small) / (stride * stride)
    if __debug__:
        assert np.linalg.norm(res.imag) <= 1e-6 * np.linalg.norm(res.real) + 1e-12, "FLC imaginary residue"
    return res.real


def highfreq_energy(map_) -> float:
    """Fraction of spectral power above half the Nyquist radius.

    Radial frequency is measured in cycles/pixel, so Nyquist is 0.5 and the
    cut-off radius is 0.25.
    """
    m = np.asarray(map_.data if isinstance(map_, Tensor) else map_, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-d map, got shape {m.shape}")
    if not np.any(m):
        raise ValueError("degenerate map")
    power = np.abs(np.fft.fft2(m)) ** 2
    fy = np.fft.fftfreq(m.shape[0])[:, None]
    fx = np.fft.fftfreq(m.shape[1])[None, :]
    radius = np.sqrt(fy ** 2 + fx ** 2)
    return float(power[radius > 0.25].sum() / power.sum())
