"""Image I/O, YCbCr routing for color modalities, dataset manifests and
synthetic pair generation.

Color functional images (PET/SPECT-like) are converted to YCbCr; only the
luminance channel enters the network, and the original chrominance is
reattached to the fused luminance afterwards.  Conversion uses the
BT.601 full-range matrices:

    Y  =  0.299 R + 0.587 G + 0.114 B
    Cb = -0.168736 R - 0.331264 G + 0.5 B + 0.5
    Cr =  0.5 R - 0.418688 G - 0.081312 B + 0.5
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

MODALITIES = ("structural-structural", "functional-structural")

_RGB_TO_YCC = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
])
_YCC_TO_RGB = np.array([
    [1.0, 0.0, 1.402],
    [1.0, -0.344136, -0.714136],
    [1.0, 1.772, 0.0],
])


class ImageDecodeError(ValueError):
    """Raised when a file cannot be decoded as a supported image."""


def load_image(path):
    """Load an 8-bit PNG/PGM/PPM as a float raster in [0,1].

    Grayscale files come back as (H,W); color as (H,W,3).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "RGB"):
                if img.mode in ("I", "I;16", "F", "RGBA", "P"):
                    raise ImageDecodeError(f"{path}: unsupported mode {img.mode}; "
                                           "expected 8-bit grayscale or RGB")
                raise ImageDecodeError(f"{path}: unsupported mode {img.mode}")
            arr = np.asarray(img, dtype=np.float64) / 255.0
    except UnidentifiedImageError as exc:
        raise ImageDecodeError(f"{path}: cannot decode ({exc})") from exc
    return arr


def save_image(path, raster):
    """Save a [0,1] float raster as an 8-bit image (bit-exact round trip)."""
    arr = np.clip(np.asarray(raster, dtype=np.float64), 0.0, 1.0)
    q = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(q, mode="RGB" if q.ndim == 3 else "L").save(path)


@dataclass
class YCbCrImage:
    y: np.ndarray
    cb: np.ndarray
    cr: np.ndarray


def rgb_to_ycbcr(rgb):
    """(H,W,3) RGB in [0,1] -> YCbCrImage, channels clamped to [0,1]."""
    arr = np.asarray(rgb, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("rgb_to_ycbcr: expected (H,W,3)")
    ycc = arr @ _RGB_TO_YCC.T
    ycc[..., 1:] += 0.5
    ycc = np.clip(ycc, 0.0, 1.0)
    return YCbCrImage(y=ycc[..., 0], cb=ycc[..., 1], cr=ycc[..., 2])


def ycbcr_to_rgb(ycc):
    """YCbCrImage -> (H,W,3) RGB clamped to [0,1]."""
    stackd = np.stack([ycc.y, ycc.cb - 0.5, ycc.cr - 0.5], axis=-1)
    return np.clip(stackd @ _YCC_TO_RGB.T, 0.0, 1.0)


def recompose_fused(y_fused, cb, cr):
    """Fused luminance + original chrominance -> RGB."""
    if y_fused.shape != cb.shape or cb.shape != cr.shape:
        raise ValueError("recompose_fused: channel shapes disagree")
    return ycbcr_to_rgb(YCbCrImage(y=np.asarray(y_fused, dtype=np.float64), cb=cb, cr=cr))


def pad_to_multiple(image, multiple=8):
    """Reflect-pad trailing H,W up to the next multiple; returns
    (padded, original (H,W)) for cropping after fusion."""
    arr = np.asarray(image)
    h, w = arr.shape[-2], arr.shape[-1]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return arr, (h, w)
    pad = [(0, 0)] * (arr.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(arr, pad, mode="reflect"), (h, w)


def crop_to(image, size):
    h, w = size
    return np.asarray(image)[..., :h, :w]


@dataclass
class ImagePair:
    pair_id: str
    source_a: np.ndarray  # (H,W) gray or (H,W,3) color
    source_b: np.ndarray  # (H,W) gray
    modality: str = "structural-structural"

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        ha = self.source_a.shape[:2]
        hb = self.source_b.shape[:2]
        if ha != hb:
            raise ValueError(f"pair {self.pair_id}: sizes differ {ha} vs {hb}")

    def network_inputs(self):
        """Two single-channel [0,1] maps for the network, plus chroma to
        carry around it (None for structural pairs)."""
        if self.source_a.ndim == 3:
            ycc = rgb_to_ycbcr(self.source_a)
            return ycc.y, self.source_b, (ycc.cb, ycc.cr)
        return self.source_a, self.source_b, None


def load_manifest(path):
    """JSON manifest [{pair_id, path_a, path_b, modality}] -> ImagePairs."""
    path = Path(path)
    records = json.loads(path.read_text())
    base = path.parent
    pairs = []
    for rec in records:
        pairs.append(ImagePair(
            pair_id=rec["pair_id"],
            source_a=load_image(base / rec["path_a"]),
            source_b=load_image(base / rec["path_b"]),
            modality=rec.get("modality", "structural-structural"),
        ))
    return pairs


def dataset_split(pairs, test_count, seed):
    """Deterministic seeded split into (train, test), order-stable."""
    if test_count >= len(pairs):
        raise ValueError(f"test_count {test_count} >= dataset size {len(pairs)}")
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(pairs))
    test_idx = set(idx[:test_count].tolist())
    train = [p for i, p in enumerate(pairs) if i not in test_idx]
    test = [p for i, p in enumerate(pairs) if i in test_idx]
    return train, test


# -- synthetic pairs ----------------------------------------------------------


def _grid(size):
    c = np.linspace(0.0, 1.0, size)
    return np.meshgrid(c, c, indexing="ij")


def synthetic_pair(kind, size=64, seed=0):
    """One complementary synthetic pair; kinds: halves, edges, blobs."""
    rng = np.random.default_rng(seed)
    yy, xx = _grid(size)
    if kind == "halves":
        # fine texture on one half per source, complementary halves
        texture = 0.5 + 0.35 * np.sin(14.0 * np.pi * xx) * np.sin(10.0 * np.pi * yy)
        base = 0.3 + 0.4 * yy
        left = xx < 0.5
        a = np.where(left, texture, base)
        b = np.where(left, base, texture)
    elif kind == "edges":
        steps_a = (np.floor(xx * 4) / 4.0) * 0.8 + 0.1
        steps_b = (np.floor(yy * 4) / 4.0) * 0.8 + 0.1
        a, b = steps_a, steps_b
    elif kind == "blobs":
        def blobs(n):
            img = np.zeros((size, size))
            for _ in range(n):
                cy, cx = rng.random(2)
                s = 0.03 + 0.08 * rng.random()
                img += rng.random() * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
            return np.clip(img, 0.0, 1.0)
        a, b = blobs(6), blobs(6)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    noise = 0.01 * rng.standard_normal((2, size, size))
    a = np.clip(a + noise[0], 0.0, 1.0)
    b = np.clip(b + noise[1], 0.0, 1.0)
    return ImagePair(pair_id=f"{kind}-{seed}", source_a=a, source_b=b)


def synthetic_dataset(count, size=64, seed=0):
    """Seeded mix of complementary synthetic pairs."""
    kinds = ("halves", "edges", "blobs")
    return [synthetic_pair(kinds[i % 3], size=size, seed=seed + i) for i in range(count)]
