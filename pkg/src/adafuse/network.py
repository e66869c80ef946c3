"""Full fusion network: four-scale conv encoder, per-scale
spatial-frequential fusion (SFF), and the skip-connected decoder.

Each SFF stage runs three CAF blocks: one on the spatial features, one on
the log-magnitude frequency features, and one across the two fused
results.  The frequency branch (FGFB) can be disabled for ablations, in
which case the stage reduces to the spatial CAF alone.

Checkpoints use a portable container: magic "ADFZ", u32 version, u32
JSON header length, JSON header (config + parameter manifest with shapes
and byte offsets), then raw little-endian float32 blobs.
"""

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import CAFBlock, CAFConfig
from .config import default_dtype
from .nn import Conv2d, Module
from .spectral import log_magnitude_features, zero_phase_inverse
from .tensor import Tensor, concat, gelu, maxpool2d, sigmoid, upsample2x

CHECKPOINT_MAGIC = b"ADFZ"
CHECKPOINT_VERSION = 1

NUM_SCALES = 4

FUSION_RULES = ("caf", "avg", "l1", "max")


@dataclass
class ModelConfig:
    channels: tuple = (16, 32, 64, 128)
    input_size: int = 64
    in_channels: int = 1
    kernel: int = 3
    shared_encoder: bool = True
    embed_dim: int = 256
    num_heads: int = 4
    patch_sizes: tuple = (16, 8, 4, 2)
    ffn_ratio: int = 4
    share_caf_branches: bool = True
    complement_rule: str = "residual"
    log_eps: float = 1e-8
    use_fgfb: bool = True
    fusion_rule: str = "caf"

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.patch_sizes = tuple(self.patch_sizes)
        if len(self.channels) != NUM_SCALES:
            raise ValueError(f"exactly {NUM_SCALES} channel counts required")
        if len(self.patch_sizes) != NUM_SCALES:
            raise ValueError(f"exactly {NUM_SCALES} patch sizes required")
        if self.input_size % 8:
            raise ValueError("input size must be divisible by 8")
        if self.fusion_rule not in FUSION_RULES:
            raise ValueError(f"unknown fusion rule {self.fusion_rule!r}")

    def scale_size(self, j):
        return self.input_size // (1 << j)


FULL_CHANNELS = (64, 128, 256, 512)


@dataclass
class FeaturePyramid:
    """Encoder features at four scales: H, H/2, H/4, H/8."""

    scales: list

    def __post_init__(self):
        if len(self.scales) != NUM_SCALES:
            raise ValueError(f"pyramid needs {NUM_SCALES} scales")
        for j in range(1, NUM_SCALES):
            prev, cur = self.scales[j - 1].shape, self.scales[j].shape
            if cur[1] * 2 != prev[1] or cur[2] * 2 != prev[2]:
                raise ValueError(f"pyramid shape broken at scale {j}: {prev} -> {cur}")

    def __getitem__(self, j):
        return self.scales[j]


class Encoder(Module):
    """phi_1 = Conv(I); phi_j = Conv(MP(phi_{j-1})), GELU after each conv."""

    def __init__(self, config, rng):
        self.convs = []
        c_prev = config.in_channels
        for c in config.channels:
            self.convs.append(Conv2d(c_prev, c, rng, config.kernel))
            c_prev = c

    def forward(self, image):
        if image.shape[1] % 8 or image.shape[2] % 8:
            raise ValueError(f"encoder input {image.shape} not divisible by 8")
        feats = []
        x = image
        for j, conv in enumerate(self.convs):
            if j > 0:
                x = maxpool2d(x)
            x = gelu(conv(x))
            feats.append(x)
        return FeaturePyramid(feats)


class SFFStage(Module):
    """Spatial CAF + Fourier-guided CAF + cross-domain CAF at one scale."""

    def __init__(self, config, scale, rng):
        size = config.scale_size(scale)
        caf_cfg = dict(
            patch_size=config.patch_sizes[scale],
            embed_dim=config.embed_dim,
            num_heads=config.num_heads,
            channels=config.channels[scale],
            spatial=size,
            ffn_ratio=config.ffn_ratio,
            share_branches=config.share_caf_branches,
            complement_rule=config.complement_rule,
        )
        self.spatial_caf = CAFBlock(CAFConfig(**caf_cfg), rng)
        self.freq_caf = CAFBlock(CAFConfig(**caf_cfg), rng)
        self.cross_caf = CAFBlock(CAFConfig(**caf_cfg), rng)
        self.log_eps = config.log_eps
        self.use_fgfb = config.use_fgfb

    def forward(self, phi1, phi2):
        fused_spatial = self.spatial_caf(phi1, phi2)
        if not self.use_fgfb:
            return fused_spatial
        freq1 = log_magnitude_features(phi1, self.log_eps)
        freq2 = log_magnitude_features(phi2, self.log_eps)
        fused_freq = zero_phase_inverse(self.freq_caf(freq1, freq2))
        return self.cross_caf(fused_spatial, fused_freq)


def baseline_fuse(phi1, phi2, rule):
    """Hand-designed fusion rules used as ablation baselines.

    AVG: elementwise mean.  MAX: elementwise maximum.  L1: per-pixel
    convex weights from 3x3 box-averaged channelwise L1 activity maps.
    """
    if phi1.shape != phi2.shape:
        raise ValueError("baseline_fuse: shape mismatch")
    if rule == "avg":
        return (phi1 + phi2) * 0.5
    if rule == "max":
        from .tensor import _make
        mask = (phi1.data >= phi2.data).astype(phi1.data.dtype)

        def bw(g):
            return g * mask, g * (1.0 - mask)

        return _make(np.maximum(phi1.data, phi2.data), (phi1, phi2), "max", bw)
    if rule == "l1":
        from .tensor import _as_tensor, conv2d, tabs, tsum
        c = phi1.shape[0]
        box = Tensor(np.full((1, 1, 3, 3), 1.0 / 9.0, dtype=default_dtype()))
        acts = []
        for phi in (phi1, phi2):
            a = tsum(tabs(phi), axis=0).reshape(1, *phi.shape[1:])
            acts.append(conv2d(a, box, padding="same"))
        total = acts[0] + acts[1] + 1e-12
        w1 = acts[0] / total
        w2 = acts[1] / total
        # replicate the (1,H,W) weight map across channels
        w1c = concat([w1] * c, axis=0)
        w2c = concat([w2] * c, axis=0)
        return w1c * phi1 + w2c * phi2
    raise ValueError(f"unknown fusion rule {rule!r}")


class Decoder(Module):
    """Coarse-to-fine reconstruction with channel-concat skip connections;
    final 1-channel conv under a sigmoid keeps the output in [0,1]."""

    def __init__(self, config, rng):
        ch = config.channels
        self.convs = []
        c = ch[3]
        for j in (3, 2, 1):
            self.convs.append(Conv2d(c, ch[j], rng, config.kernel))
            c = ch[j] + ch[j - 1]
        self.convs.append(Conv2d(c, ch[0], rng, config.kernel))
        self.out_conv = Conv2d(ch[0], config.in_channels, rng, config.kernel)

    def forward(self, pyramid):
        x = pyramid[3]
        for j, conv in zip((3, 2, 1), self.convs[:3]):
            x = gelu(conv(x))
            x = concat([upsample2x(x), pyramid[j - 1]], axis=0)
        x = gelu(self.convs[3](x))
        return sigmoid(self.out_conv(x))


class AdaFuseModel(Module):
    """Encoder(s) + per-scale SFF + decoder."""

    def __init__(self, config, seed=0):
        rng = np.random.default_rng(seed)
        self.config = config
        self.encoder = Encoder(config, rng)
        self.encoder2 = None if config.shared_encoder else Encoder(config, rng)
        if config.fusion_rule == "caf":
            self.sff = [SFFStage(config, j, rng) for j in range(NUM_SCALES)]
        else:
            self.sff = []
        self.decoder = Decoder(config, rng)

    def encode(self, image, branch=0):
        enc = self.encoder if (branch == 0 or self.encoder2 is None) else self.encoder2
        return enc(image)

    def fuse_pyramids(self, pyr1, pyr2):
        fused = []
        for j in range(NUM_SCALES):
            if self.config.fusion_rule == "caf":
                fused.append(self.sff[j](pyr1[j], pyr2[j]))
            else:
                fused.append(baseline_fuse(pyr1[j], pyr2[j], self.config.fusion_rule))
        return FeaturePyramid(fused)

    def forward(self, image1, image2):
        if image1.shape != image2.shape:
            raise ValueError("forward: source images differ in shape")
        pyr1 = self.encode(image1, 0)
        pyr2 = self.encode(image2, 1)
        return self.decoder(self.fuse_pyramids(pyr1, pyr2))


# -- checkpoint container -----------------------------------------------------


def _config_to_dict(config):
    d = asdict(config)
    d["channels"] = list(d["channels"])
    d["patch_sizes"] = list(d["patch_sizes"])
    return d


def save_checkpoint(path, model, extra=None):
    """Write model parameters (and optional extra arrays) to an ADFZ file."""
    params = model.named_parameters()
    arrays = {f"param.{k}": v.data for k, v in params.items()}
    if extra:
        arrays.update({f"extra.{k}": np.asarray(v) for k, v in extra.items()})
    manifest = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset,
                         "nbytes": len(blob)})
        offset += len(blob)
        blobs.append(blob)
    header = json.dumps({"config": _config_to_dict(model.config),
                         "manifest": manifest}).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path):
    """Read an ADFZ file into (config dict, {name: float32 array})."""
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not an ADFZ checkpoint")
        version, = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        hlen, = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen))
        payload = fh.read()
    arrays = {}
    for entry in header["manifest"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
    return header["config"], arrays


def load_checkpoint(path):
    """Rebuild a model from an ADFZ file; returns (model, extra arrays)."""
    config_dict, arrays = read_checkpoint(path)
    model = AdaFuseModel(ModelConfig(**config_dict))
    params = model.named_parameters()
    for key, arr in arrays.items():
        if key.startswith("param."):
            name = key[len("param."):]
            if name not in params:
                raise ValueError(f"checkpoint parameter {name} not in model")
            if tuple(arr.shape) != params[name].shape:
                raise ValueError(f"checkpoint shape mismatch for {name}")
            params[name].data = arr.astype(default_dtype())
    missing = set(params) - {k[len("param."):] for k in arrays if k.startswith("param.")}
    if missing:
        raise ValueError(f"checkpoint missing parameters: {sorted(missing)[:3]}...")
    extra = {k[len("extra."):]: v for k, v in arrays.items() if k.startswith("extra.")}
    return model, extra
