"""2D Fourier transforms and the log-magnitude frequency features.

The forward transform is an unnormalized radix-2 Cooley-Tukey FFT for
power-of-two sizes with a dense-matrix DFT fallback for everything else;
the fallback doubles as the independent test oracle.  The inverse carries
the 1/(H*W) normalization.

Two differentiable entry points connect the frequency branch to the
autodiff engine:

* ``log_magnitude_features`` -- log(|FFT2(x)| + eps), gradient flows back
  to the spatial input.
* ``zero_phase_inverse`` -- treats a real map as a zero-phase spectrum and
  returns the real part of its inverse transform.  The fused log-magnitude
  map has no phase to attach, so this is the one place that convention
  lives; swap it here to experiment with other phase choices.
"""

from dataclasses import dataclass

import numpy as np

from .config import default_dtype
from .tensor import Tensor, _as_tensor, _make


def _complex_dtype():
    return np.complex64 if default_dtype() == np.float32 else np.complex128


def _is_pow2(n):
    return n >= 1 and (n & (n - 1)) == 0


def _dft_matrix(n, inverse):
    sign = 2j if inverse else -2j
    k = np.arange(n)
    return np.exp(sign * np.pi * np.outer(k, k) / n)


def _fft_last_axis(a, inverse=False):
    """FFT along the last axis of a complex array (any leading dims)."""
    n = a.shape[-1]
    if not _is_pow2(n):
        return a @ _dft_matrix(n, inverse).T.astype(a.dtype)
    # iterative radix-2: bit-reversal permutation, then butterflies
    if n == 1:
        return a.copy()
    levels = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(levels):
        rev |= ((idx >> b) & 1) << (levels - 1 - b)
    out = np.ascontiguousarray(a[..., rev])
    sign = 2j if inverse else -2j
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(sign * np.pi * np.arange(half) / size).astype(a.dtype)
        view = out.reshape(*out.shape[:-1], n // size, size)
        even = view[..., :half].copy()
        odd = view[..., half:] * tw
        view[..., :half] = even + odd
        view[..., half:] = even - odd
        size *= 2
    return out


def _fft2_array(x):
    """Unnormalized 2D DFT over the two trailing axes."""
    a = np.asarray(x, dtype=_complex_dtype())
    a = _fft_last_axis(a)
    a = np.swapaxes(_fft_last_axis(np.swapaxes(a, -1, -2)), -1, -2)
    return a


def _ifft2_array(x):
    """Inverse 2D DFT with 1/(H*W) normalization."""
    a = np.asarray(x, dtype=_complex_dtype())
    h, w = a.shape[-2], a.shape[-1]
    a = _fft_last_axis(a, inverse=True)
    a = np.swapaxes(_fft_last_axis(np.swapaxes(a, -1, -2), inverse=True), -1, -2)
    return a / (h * w)


def naive_dft2d(x, inverse=False):
    """Dense O(N^2) 2D DFT, the independent oracle for the FFT path."""
    a = np.asarray(x, dtype=np.complex128)
    h, w = a.shape[-2], a.shape[-1]
    fh = _dft_matrix(h, inverse)
    fw = _dft_matrix(w, inverse)
    out = fh @ a @ fw.T
    return out / (h * w) if inverse else out


@dataclass
class ComplexSpectrum:
    """Per-channel 2D spectrum, shape (C, H, W), complex values."""

    values: np.ndarray

    @property
    def shape(self):
        return self.values.shape

    @property
    def real(self):
        return self.values.real

    @property
    def imag(self):
        return self.values.imag

    def magnitude(self):
        return np.abs(self.values)


def fft2d(x):
    """Per-channel 2D DFT of a (C,H,W) tensor, unnormalized forward."""
    x = _as_tensor(x)
    if x.ndim != 3:
        raise ValueError("fft2d: expected (C,H,W)")
    return ComplexSpectrum(_fft2_array(x.data))


def ifft2d(spectrum):
    """Inverse 2D DFT; returns the real part as a Tensor."""
    return Tensor(np.ascontiguousarray(_ifft2_array(spectrum.values).real))


def ifft2d_full(spectrum):
    """Inverse transform plus the max imaginary residual (diagnostics)."""
    inv = _ifft2_array(spectrum.values)
    return Tensor(np.ascontiguousarray(inv.real)), float(np.abs(inv.imag).max())


def log_magnitude(spectrum, eps=1e-8):
    """Elementwise log(|X| + eps) of a spectrum, as a plain Tensor."""
    if eps <= 0:
        raise ValueError("log_magnitude: eps must be positive")
    return Tensor(np.log(spectrum.magnitude() + eps))


def log_magnitude_features(x, eps=1e-8):
    """Differentiable log(|FFT2(x)| + eps) for a (C,H,W) spatial tensor.

    Backward maps the cotangent through magnitude and the linear DFT:
    with W = g * X / (|X| (|X|+eps)), grad_x = Re(FFT2(conj(W))).
    """
    if eps <= 0:
        raise ValueError("log_magnitude_features: eps must be positive")
    x = _as_tensor(x)
    if x.ndim != 3:
        raise ValueError("log_magnitude_features: expected (C,H,W)")
    spec = _fft2_array(x.data)
    mag = np.abs(spec)
    out_data = np.log(mag + eps).astype(x.data.dtype)

    def bw(g):
        denom = mag * (mag + eps)
        safe = np.where(denom == 0.0, 1.0, denom)
        w = np.where(denom == 0.0, 0.0, g * spec / safe)
        return (np.ascontiguousarray(_fft2_array(np.conj(w)).real.astype(x.data.dtype)),)

    return _make(out_data, (x,), "log_magnitude_features", bw)


def zero_phase_inverse(m):
    """Differentiable Re(IFFT2(m)) of a real map read as a zero-phase
    spectrum; the self-adjoint-up-to-conjugation DFT gives
    grad_m = Re(IFFT2(g))."""
    m = _as_tensor(m)
    if m.ndim != 3:
        raise ValueError("zero_phase_inverse: expected (C,H,W)")
    out_data = np.ascontiguousarray(_ifft2_array(m.data).real.astype(m.data.dtype))

    def bw(g):
        return (np.ascontiguousarray(_ifft2_array(g).real.astype(m.data.dtype)),)

    return _make(out_data, (m,), "zero_phase_inverse", bw)
