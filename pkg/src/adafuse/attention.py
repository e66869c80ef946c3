"""Patch embedding, Transformer encoding and the cross attention fusion
(CAF) block.

A CAF block fuses two same-shape feature maps by patch-embedding each,
running a pre-norm Transformer encoder per branch (shared weights by
default), projecting to Q/K/V, and exchanging key vectors between the
branches so each branch's queries score against the other's keys.  The
four score-weighted value terms are summed and folded back to a feature
map.

The complement term "(1 - s) V" admits two readings when s is a score
matrix; ``complement_rule`` selects one:

* ``"residual"`` (default): (1 - s) V := V - s V, so every complementary
  pair sums exactly to V and fusing a map with itself collapses to 2 V.
* ``"literal"``: elementwise complement, (J - s) V with J all ones.
"""

import math
from dataclasses import dataclass

import numpy as np

from .nn import LayerNorm, Linear, Module, trunc_normal
from .tensor import Tensor, gelu, matmul, reshape, softmax, transpose

COMPLEMENT_RULES = ("residual", "literal")


@dataclass
class CAFConfig:
    patch_size: int
    embed_dim: int
    num_heads: int
    channels: int
    spatial: int
    ffn_ratio: int = 4
    share_branches: bool = True
    complement_rule: str = "residual"

    def __post_init__(self):
        self.patch_size = min(self.patch_size, self.spatial)
        if self.spatial % self.patch_size:
            raise ValueError(
                f"patch size {self.patch_size} does not divide spatial size {self.spatial}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed dim {self.embed_dim} not divisible by {self.num_heads} heads")
        width = self.patch_size * self.patch_size * self.channels
        if width % self.num_heads:
            raise ValueError(f"token width {width} not divisible by {self.num_heads} heads")
        if self.complement_rule not in COMPLEMENT_RULES:
            raise ValueError(f"unknown complement rule {self.complement_rule!r}")

    @property
    def token_width(self):
        return self.patch_size ** 2 * self.channels

    @property
    def tokens(self):
        return (self.spatial // self.patch_size) ** 2


def image_to_tokens(x, p):
    """Tile a (c,h,w) map into ((h/p * w/p), p*p*c) patch tokens."""
    c, h, w = x.shape
    if h % p or w % p:
        raise ValueError(f"patch size {p} does not divide spatial size {h}x{w}")
    t = reshape(x, (c, h // p, p, w // p, p))
    t = transpose(t, (1, 3, 0, 2, 4))  # (h/p, w/p, c, p, p)
    return reshape(t, ((h // p) * (w // p), p * p * c))


def tokens_to_image(tokens, c, h, w, p):
    """Inverse of ``image_to_tokens``."""
    t = reshape(tokens, (h // p, w // p, c, p, p))
    t = transpose(t, (2, 0, 3, 1, 4))  # (c, h/p, p, w/p, p)
    return reshape(t, (c, h, w))


def split_heads(x, heads):
    """(T, d) -> (heads, T, d/heads)."""
    t, d = x.shape
    return transpose(reshape(x, (t, heads, d // heads)), (1, 0, 2))


def merge_heads(x):
    """(heads, T, dh) -> (T, heads*dh)."""
    h, t, dh = x.shape
    return reshape(transpose(x, (1, 0, 2)), (t, h * dh))


class PatchEmbed(Module):
    """Non-overlapping patch tiling followed by a linear projection."""

    def __init__(self, channels, spatial, patch, rng):
        self.channels = channels
        self.spatial = spatial
        self.patch = patch
        width = patch * patch * channels
        self.proj = Linear(width, width, rng)

    def forward(self, x):
        return self.proj(image_to_tokens(x, self.patch))


class MultiHeadSelfAttention(Module):
    def __init__(self, width, heads, rng):
        self.heads = heads
        self.wq = Linear(width, width, rng)
        self.wk = Linear(width, width, rng)
        self.wv = Linear(width, width, rng)
        self.out = Linear(width, width, rng)

    def forward(self, x):
        q = split_heads(self.wq(x), self.heads)
        k = split_heads(self.wk(x), self.heads)
        v = split_heads(self.wv(x), self.heads)
        scale = 1.0 / math.sqrt(q.shape[-1])
        scores = softmax(matmul(q, transpose(k, (0, 2, 1))) * scale)
        return self.out(merge_heads(matmul(scores, v)))


class FeedForward(Module):
    def __init__(self, width, hidden, rng):
        self.fc1 = Linear(width, hidden, rng)
        self.fc2 = Linear(hidden, width, rng)

    def forward(self, x):
        return self.fc2(gelu(self.fc1(x)))


class TransformerEncoderBlock(Module):
    """Pre-norm residual block: t + MSA(LN(t)), then + FFN(LN(.))."""

    def __init__(self, width, heads, rng, ffn_ratio=4):
        self.ln1 = LayerNorm(width)
        self.msa = MultiHeadSelfAttention(width, heads, rng)
        self.ln2 = LayerNorm(width)
        self.ffn = FeedForward(width, ffn_ratio * width, rng)

    def forward(self, tokens):
        f = tokens + self.msa(self.ln1(tokens))
        return f + self.ffn(self.ln2(f))


def transformer_encode(tokens, block):
    """Functional wrapper over a ``TransformerEncoderBlock``."""
    return block(tokens)


def qkv_project(tokens, wq, wk, wv):
    """Project normalized tokens to Q, K, V with bias-free weight matrices."""
    return matmul(tokens, wq), matmul(tokens, wk), matmul(tokens, wv)


def cross_attention_scores(q1, k2, q2, k1, d):
    """Exchanged-key attention scores, row-stochastic per head."""
    if q1.shape[-2] != k2.shape[-2] or q2.shape[-2] != k1.shape[-2]:
        raise ValueError("cross_attention_scores: token counts disagree")
    scale = 1.0 / math.sqrt(d)
    s1 = softmax(matmul(q1, transpose(k2, (0, 2, 1))) * scale)
    s2 = softmax(matmul(q2, transpose(k1, (0, 2, 1))) * scale)
    return s1, s2


class CAFBlock(Module):
    """Cross attention fusion of two (c,h,w) feature maps."""

    def __init__(self, config, rng):
        self.config = config
        width = config.token_width
        self.pe = PatchEmbed(config.channels, config.spatial, config.patch_size, rng)
        self.encoder = TransformerEncoderBlock(width, config.num_heads, rng, config.ffn_ratio)
        if not config.share_branches:
            self.pe2 = PatchEmbed(config.channels, config.spatial, config.patch_size, rng)
            self.encoder2 = TransformerEncoderBlock(width, config.num_heads, rng, config.ffn_ratio)
        self.fuse_ln = LayerNorm(width)
        d = config.embed_dim
        self.wq = Tensor(trunc_normal(rng, (width, d)), requires_grad=True)
        self.wk = Tensor(trunc_normal(rng, (width, d)), requires_grad=True)
        self.wv = Tensor(trunc_normal(rng, (width, d)), requires_grad=True)
        self.inv_proj = Linear(d, width, rng)

    def _branch(self, x, index):
        if self.config.share_branches or index == 0:
            pe, enc = self.pe, self.encoder
        else:
            pe, enc = self.pe2, self.encoder2
        return enc(pe(x))

    def branch_qkv(self, x, index=0):
        """Q, K, V of one branch as per-head (heads, T, d/heads) tensors."""
        tokens = self.fuse_ln(self._branch(x, index))
        q, k, v = qkv_project(tokens, self.wq, self.wk, self.wv)
        h = self.config.num_heads
        return split_heads(q, h), split_heads(k, h), split_heads(v, h)

    def unembed(self, fused_heads, spatial=None):
        """Fold per-head fused value tokens back to a (c,h,w) map."""
        cfg = self.config
        h = w = cfg.spatial if spatial is None else spatial
        tokens = self.inv_proj(merge_heads(fused_heads))
        return tokens_to_image(tokens, cfg.channels, h, w, cfg.patch_size)

    def forward(self, phi1, phi2):
        if phi1.shape != phi2.shape:
            raise ValueError(f"caf_fuse: shape mismatch {phi1.shape} vs {phi2.shape}")
        cfg = self.config
        # weights are per-token, so any square size the patch tiles is fine
        if phi1.shape[0] != cfg.channels or phi1.shape[1] != phi1.shape[2]:
            raise ValueError(f"caf_fuse: input shape {phi1.shape} incompatible with "
                             f"{cfg.channels} channels")
        q1, k1, v1 = self.branch_qkv(phi1, 0)
        q2, k2, v2 = self.branch_qkv(phi2, 1)
        s1, s2 = cross_attention_scores(q1, k2, q2, k1, cfg.embed_dim)
        a1 = matmul(s1, v2)
        a2 = matmul(s2, v1)
        if cfg.complement_rule == "residual":
            c1 = v1 - matmul(s1, v1)
            c2 = v2 - matmul(s2, v2)
        else:
            c1 = matmul(1.0 - s1, v1)
            c2 = matmul(1.0 - s2, v2)
        fused = (c1 + a1) + (c2 + a2)
        return self.unembed(fused, phi1.shape[1])


def caf_fuse(phi1, phi2, block):
    """Functional form of the CAF block forward pass."""
    return block(phi1, phi2)
