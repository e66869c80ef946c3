"""Composite training objective: content, structure-tensor gradient and
SSIM terms, combined as total = lambda * content + grad + ssim.

Reductions default to per-pixel means so the loss weights do not depend
on image size; pass ``reduction="sum"`` for the literal summed forms.
"""

from dataclasses import dataclass

import numpy as np

from .config import default_dtype
from .tensor import (Tensor, _as_tensor, concat, conv2d, pad_reflect2d, stack,
                     tlog1p, tsqrt, tsum)

SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


@dataclass
class LossWeights:
    content: float = 0.5   # lambda
    ssim_a: float = 0.5    # w1
    ssim_b: float = 0.5    # w2

    def __post_init__(self):
        if self.content < 0 or self.ssim_a < 0 or self.ssim_b < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    content: float
    grad: float
    ssim: float
    total: float


def _reduce(x, reduction):
    if reduction == "mean":
        return x.mean()
    if reduction == "sum":
        return x.sum()
    raise ValueError(f"unknown reduction {reduction!r}")


def content_loss(fused, a, b, reduction="mean"):
    """Per-pixel L2 deviation of the fused image from the source average."""
    fused, a, b = _as_tensor(fused), _as_tensor(a), _as_tensor(b)
    if not (fused.shape == a.shape == b.shape):
        raise ValueError("content_loss: shape mismatch")
    diff = fused - (a + b) * 0.5
    # per-pixel channel-vector norm; for 1-channel images this is |diff|
    norms = tsqrt(tsum(diff * diff, axis=0))
    return _reduce(norms, reduction)


def _sobel_gradients(image):
    """Channelwise Sobel dx/dy with reflect padding; image is (M,H,W)."""
    m = image.shape[0]
    kx = Tensor(SOBEL_X[None, None].astype(default_dtype()))
    ky = Tensor(SOBEL_Y[None, None].astype(default_dtype()))
    padded = pad_reflect2d(image, 1)
    gx = [conv2d(slice_channel(padded, i), kx, padding="valid") for i in range(m)]
    gy = [conv2d(slice_channel(padded, i), ky, padding="valid") for i in range(m)]
    if m == 1:
        return gx[0], gy[0]
    return concat(gx, axis=0), concat(gy, axis=0)


def structure_tensor(image):
    """Per-pixel 2x2 gradient Gram matrix summed over channels.

    Returns an (H, W, 2, 2) tensor; symmetric positive semi-definite at
    every pixel by construction.
    """
    image = _as_tensor(image)
    if image.ndim != 3:
        raise ValueError("structure_tensor: expected (M,H,W)")
    gx, gy = _sobel_gradients(image)
    zxx = tsum(gx * gx, axis=0)
    zxy = tsum(gx * gy, axis=0)
    zyy = tsum(gy * gy, axis=0)
    h, w = zxx.shape
    rows = stack([stack([zxx, zxy], axis=-1), stack([zxy, zyy], axis=-1)], axis=-2)
    return rows.reshape(h, w, 2, 2)


def grad_loss(fused, a, b, reduction="mean"):
    """log(1 + reduced squared Frobenius gap between the structure tensor
    of the fused image and that of the channel-concatenated sources)."""
    fused, a, b = _as_tensor(fused), _as_tensor(a), _as_tensor(b)
    if not (fused.shape == a.shape == b.shape):
        raise ValueError("grad_loss: shape mismatch")
    z_f = structure_tensor(fused)
    z_c = structure_tensor(concat([a, b], axis=0))
    gap = z_f - z_c
    frob2 = tsum(tsum(gap * gap, axis=-1), axis=-1)
    return tlog1p(_reduce(frob2, reduction))


def _gaussian_window(size=11, sigma=1.5):
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return (k / k.sum()).astype(default_dtype())


def ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, peak=1.0):
    """Mean local SSIM over a Gaussian window (valid region only)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError("ssim: shape mismatch")
    if a.ndim != 3:
        raise ValueError("ssim: expected (C,H,W)")
    if a.shape[1] < window or a.shape[2] < window:
        raise ValueError(f"ssim: image smaller than {window}x{window} window")
    c = a.shape[0]
    kern = Tensor(np.broadcast_to(_gaussian_window(window, sigma),
                                  (1, 1, window, window)).copy())

    def blur(x):
        parts = [conv2d(slice_channel(x, i), kern, padding="valid") for i in range(c)]
        return concat(parts, axis=0)

    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    mu_a = blur(a)
    mu_b = blur(b)
    mu_aa = mu_a * mu_a
    mu_bb = mu_b * mu_b
    mu_ab = mu_a * mu_b
    var_a = blur(a * a) - mu_aa
    var_b = blur(b * b) - mu_bb
    cov = blur(a * b) - mu_ab
    num = (2.0 * mu_ab + c1) * (2.0 * cov + c2)
    den = (mu_aa + mu_bb + c1) * (var_a + var_b + c2)
    return (num / den).mean()


def slice_channel(x, i):
    """(C,H,W) -> (1,H,W) view of channel i, differentiable."""
    from .tensor import _make

    def bw(g):
        dx = np.zeros_like(x.data)
        dx[i:i + 1] = g
        return (dx,)

    return _make(np.ascontiguousarray(x.data[i:i + 1]), (x,), "slice_channel", bw)


def ssim_loss(fused, a, b, w1=0.5, w2=0.5):
    """Weighted SSIM dissimilarity against both sources."""
    if w1 < 0 or w2 < 0:
        raise ValueError("ssim_loss: weights must be non-negative")
    return w1 * (1.0 - ssim(fused, a)) + w2 * (1.0 - ssim(fused, b))


def total_loss(fused, a, b, weights=None, reduction="mean", terms=("content", "structure")):
    """Full objective; returns (scalar Tensor, LossReport).

    ``terms`` restricts the objective for ablations: "content",
    "structure", or both.
    """
    weights = weights or LossWeights()
    zero = Tensor(np.zeros(()))
    use_content = "content" in terms
    use_structure = "structure" in terms
    l_content = content_loss(fused, a, b, reduction) if use_content else zero
    l_grad = grad_loss(fused, a, b, reduction) if use_structure else zero
    l_ssim = ssim_loss(fused, a, b, weights.ssim_a, weights.ssim_b) if use_structure else zero
    total = weights.content * l_content + l_grad + l_ssim
    report = LossReport(content=float(l_content.data), grad=float(l_grad.data),
                        ssim=float(l_ssim.data), total=float(total.data))
    return total, report
