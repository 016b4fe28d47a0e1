"""Radix-2 FFT over the last two axes, exposed as a differentiable op.

Extents are restricted to powers of two; callers pad first (`pad_to_pow2`).
The transform is the standard unnormalized forward DFT. Internally all
butterflies run in complex128 regardless of tensor precision, and results
are cast back to the input dtype at the graph boundary.

The spectrum is returned as two real tensors (real and imaginary planes)
so it can feed straight into ordinary elementwise graph ops. For a real
input x with upstream gradients (Gr, Gi) on the two planes, the input
gradient is Re(FFT2(Gr)) + Im(FFT2(Gi)), which follows from the symmetry
of the DFT matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, _from_op, pad2d
from .errors import ConfigurationError

_rev_cache: dict[int, np.ndarray] = {}
_twiddle_cache: dict[int, np.ndarray] = {}


def _bit_reversal(n: int) -> np.ndarray:
    rev = _rev_cache.get(n)
    if rev is None:
        rev = np.zeros(n, dtype=np.intp)
        for i in range(1, n):
            rev[i] = (rev[i >> 1] >> 1) | ((i & 1) * (n >> 1))
        _rev_cache[n] = rev
    return rev


def _twiddles(m: int) -> np.ndarray:
    tw = _twiddle_cache.get(m)
    if tw is None:
        tw = np.exp(-2j * np.pi * np.arange(m // 2) / m)
        _twiddle_cache[m] = tw
    return tw


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def fft_last_axis(a: np.ndarray) -> np.ndarray:
    """Iterative Cooley-Tukey DFT along the last axis (power-of-two length)."""
    n = a.shape[-1]
    if not _is_pow2(n):
        raise ConfigurationError(f"FFT length {n} is not a power of two")
    out = np.ascontiguousarray(a[..., _bit_reversal(n)], dtype=np.complex128)
    m = 2
    while m <= n:
        half = m // 2
        tw = _twiddles(m)
        b = out.reshape(out.shape[:-1] + (n // m, m))
        even = b[..., :half].copy()
        odd = b[..., half:] * tw
        b[..., :half] = even + odd
        b[..., half:] = even - odd
        m *= 2
    return out


def fft2_array(x: np.ndarray) -> np.ndarray:
    """Unnormalized 2-D forward DFT over the last two axes."""
    f = fft_last_axis(x)
    f = fft_last_axis(np.swapaxes(f, -1, -2))
    return np.swapaxes(f, -1, -2)


def next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def pad_to_pow2(x: Tensor) -> Tensor:
    """Zero-pad the last two axes up to the next power of two."""
    h, w = x.data.shape[-2], x.data.shape[-1]
    hp, wp = next_pow2(h), next_pow2(w)
    if hp == h and wp == w:
        return x
    return pad2d(x, (0, hp - h, 0, wp - w))


@dataclass
class ComplexSpectrum:
    """DFT output split into real and imaginary planes of the source shape."""

    shape: tuple
    real: Tensor
    imag: Tensor


def fft2d(x: Tensor) -> ComplexSpectrum:
    """Differentiable 2-D DFT of a real tensor over its last two axes."""
    h, w = x.data.shape[-2], x.data.shape[-1]
    if not _is_pow2(h) or not _is_pow2(w):
        raise ConfigurationError(
            f"fft2d extents {h}x{w} must be powers of two (see pad_to_pow2)"
        )
    spec = fft2_array(x.data)
    dt = x.data.dtype

    def bwd_real(g):
        return (fft2_array(g).real.astype(dt),)

    def bwd_imag(g):
        return (fft2_array(g).imag.astype(dt),)

    real = _from_op(np.ascontiguousarray(spec.real).astype(dt), (x,), bwd_real, "fft2d.re")
    imag = _from_op(np.ascontiguousarray(spec.imag).astype(dt), (x,), bwd_imag, "fft2d.im")
    return ComplexSpectrum(tuple(x.data.shape), real, imag)
