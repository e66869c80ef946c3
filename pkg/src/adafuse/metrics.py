"""Fusion-quality metrics: EN, PSNR, MI, CC and DCT-based FMI.

All metrics quantize inputs identically (round half away from zero,
[0,1] -> 0..255) and are pure numpy; scores are comparable only within
this implementation, whose parameter choices are recorded in
``METRIC_PARAMS`` and emitted with every report.
"""

import csv
import io
import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np

PSNR_CEILING_DB = 100.0
HISTOGRAM_BINS = 256
DCT_BLOCK = 8

METRIC_PARAMS = {
    "histogram_bins": HISTOGRAM_BINS,
    "quantization": "round half away from zero, [0,1] -> 0..255",
    "psnr": f"mean vs both sources, peak 255, ceiling {PSNR_CEILING_DB} dB",
    "mi": "sum of joint-histogram MI against each source, log base 2",
    "cc": "mean Pearson correlation vs both sources; constant image -> 0",
    "fmi": f"{DCT_BLOCK}x{DCT_BLOCK} block DCT magnitudes, DC excluded, "
           "MI normalized by mean marginal entropy, averaged over sources",
}


@dataclass
class MetricsReport:
    en: float
    psnr: float
    mi: float
    cc: float
    fmi: float


def quantize(image):
    """[0,1] float image to uint8 levels, round half away from zero."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def _hist(q):
    return np.bincount(q.reshape(-1), minlength=HISTOGRAM_BINS).astype(np.float64)


def _entropy_from_counts(counts):
    p = counts / counts.sum()
    nz = p[p > 0]
    return max(0.0, float(-(nz * np.log2(nz)).sum()))


def _check_shapes(fused, a, b):
    fa, aa, ba = (np.asarray(v) for v in (fused, a, b))
    if not (fa.shape == aa.shape == ba.shape):
        raise ValueError(f"metric inputs disagree in shape: {fa.shape}, {aa.shape}, {ba.shape}")


def entropy(image):
    """Shannon entropy (bits) of the 256-bin intensity histogram."""
    return _entropy_from_counts(_hist(quantize(image)))


def _psnr_pair(qf, qs):
    mse = float(np.mean((qf.astype(np.float64) - qs.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CEILING_DB
    return min(PSNR_CEILING_DB, 10.0 * np.log10(255.0 ** 2 / mse))


def psnr(fused, a, b):
    """Mean PSNR (dB) of the fused image against both sources."""
    _check_shapes(fused, a, b)
    qf = quantize(fused)
    return 0.5 * (_psnr_pair(qf, quantize(a)) + _psnr_pair(qf, quantize(b)))


def _mi_pair(qx, qy):
    joint = np.zeros((HISTOGRAM_BINS, HISTOGRAM_BINS), dtype=np.float64)
    np.add.at(joint, (qx.reshape(-1), qy.reshape(-1)), 1.0)
    joint /= joint.sum()
    px = joint.sum(axis=1)
    py = joint.sum(axis=0)
    nz = joint > 0
    return float((joint[nz] * np.log2(joint[nz] / (np.outer(px, py)[nz]))).sum())


def mutual_info(fused, a, b):
    """MI(F,I1) + MI(F,I2) in bits (fusion-MI convention)."""
    _check_shapes(fused, a, b)
    qf = quantize(fused)
    return _mi_pair(qf, quantize(a)) + _mi_pair(qf, quantize(b))


def _corr_pair(x, y):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    sx, sy = x.std(), y.std()
    if sx == 0.0 or sy == 0.0:
        warnings.warn("correlation of a constant image defined as 0")
        return 0.0
    return float(((x - x.mean()) * (y - y.mean())).mean() / (sx * sy))


def correlation_coeff(fused, a, b):
    """Mean Pearson correlation of the fused image with both sources."""
    _check_shapes(fused, a, b)
    return 0.5 * (_corr_pair(fused, a) + _corr_pair(fused, b))


def _dct_matrix(n):
    k = np.arange(n)
    m = np.cos(np.pi * (2 * k[None, :] + 1) * k[:, None] / (2 * n))
    m[0] *= 1.0 / np.sqrt(2.0)
    return m * np.sqrt(2.0 / n)


_DCT8 = _dct_matrix(DCT_BLOCK)


def dct2_block(block):
    """Orthonormal 2D DCT-II of one square block."""
    return _DCT8 @ block @ _DCT8.T


def _dct_features(image):
    """Blockwise DCT coefficient magnitudes, DC excluded, flattened."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise ValueError("fmi expects single-channel images")
        arr = arr[0]
    h, w = arr.shape
    if h % DCT_BLOCK or w % DCT_BLOCK:
        raise ValueError(f"fmi: size {h}x{w} not divisible by {DCT_BLOCK}")
    blocks = arr.reshape(h // DCT_BLOCK, DCT_BLOCK, w // DCT_BLOCK, DCT_BLOCK)
    blocks = blocks.transpose(0, 2, 1, 3)
    coeff = np.einsum("ij,abjk,lk->abil", _DCT8, blocks, _DCT8)
    mags = np.abs(coeff).reshape(-1, DCT_BLOCK * DCT_BLOCK)[:, 1:]  # drop DC
    return mags.reshape(-1)


def _feature_mi_normalized(fx, fy):
    """Symmetric-normalized MI between two equal-length feature vectors."""
    def digitize(v):
        lo, hi = v.min(), v.max()
        if hi == lo:
            return np.zeros(v.shape, dtype=np.int64)
        scaled = (v - lo) / (hi - lo)
        return np.minimum((scaled * HISTOGRAM_BINS).astype(np.int64), HISTOGRAM_BINS - 1)

    qx, qy = digitize(fx), digitize(fy)
    mi = _mi_pair(qx, qy)
    hx = _entropy_from_counts(np.bincount(qx, minlength=HISTOGRAM_BINS).astype(np.float64))
    hy = _entropy_from_counts(np.bincount(qy, minlength=HISTOGRAM_BINS).astype(np.float64))
    denom = 0.5 * (hx + hy)
    if denom == 0.0:
        return 1.0 if np.array_equal(qx, qy) else 0.0
    return mi / denom


def fmi_dct(fused, a, b):
    """DCT-feature mutual information, averaged over the two sources."""
    _check_shapes(fused, a, b)
    ff = _dct_features(fused)
    return 0.5 * (_feature_mi_normalized(ff, _dct_features(a)) +
                  _feature_mi_normalized(ff, _dct_features(b)))


def evaluate(fused, a, b):
    """All five metrics for one fused/source triple."""
    return MetricsReport(
        en=entropy(fused),
        psnr=psnr(fused, a, b),
        mi=mutual_info(fused, a, b),
        cc=correlation_coeff(fused, a, b),
        fmi=fmi_dct(fused, a, b),
    )


CSV_FIELDS = ["pair_id", "en", "psnr", "mi", "cc", "fmi"]


def reports_to_csv(rows):
    """Rows of (pair_id, MetricsReport) to CSV text."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(CSV_FIELDS)
    for pair_id, rep in rows:
        writer.writerow([pair_id, rep.en, rep.psnr, rep.mi, rep.cc, rep.fmi])
    return buf.getvalue()


def reports_to_json(rows):
    """Rows of (pair_id, MetricsReport) to JSON with a provenance header."""
    return json.dumps({
        "params": METRIC_PARAMS,
        "results": [{"pair_id": pid, **asdict(rep)} for pid, rep in rows],
    }, indent=2)
