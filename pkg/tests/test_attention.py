"""Cross attention fusion block: algebraic identities and shape plumbing."""

import numpy as np
import pytest

from adafuse.attention import (CAFBlock, CAFConfig, caf_fuse, image_to_tokens,
                               merge_heads, split_heads, tokens_to_image)
from adafuse.config import using_dtype
from adafuse.tensor import Tensor, matmul, tsum


@pytest.fixture(autouse=True)
def _float64():
    with using_dtype("float64"):
        yield


def small_config(**kw):
    base = dict(patch_size=4, embed_dim=16, num_heads=2, channels=2, spatial=8)
    base.update(kw)
    return CAFConfig(**base)


class TestTokenization:
    def test_roundtrip(self):
        x = np.random.default_rng(0).standard_normal((3, 8, 8))
        tokens = image_to_tokens(Tensor(x), 4)
        assert tokens.shape == (4, 48)
        back = tokens_to_image(tokens, 3, 8, 8, 4)
        np.testing.assert_array_equal(back.data, x)

    @pytest.mark.parametrize("p", [1, 2, 4, 8])
    def test_token_count(self, p):
        x = Tensor(np.zeros((2, 8, 8)))
        assert image_to_tokens(x, p).shape == ((8 // p) ** 2, p * p * 2)

    def test_indivisible_patch_rejected(self):
        with pytest.raises(ValueError, match="does not divide"):
            image_to_tokens(Tensor(np.zeros((1, 8, 8))), 3)

    def test_head_split_merge_roundtrip(self):
        x = np.random.default_rng(1).standard_normal((6, 8))
        back = merge_heads(split_heads(Tensor(x), 4))
        np.testing.assert_array_equal(back.data, x)


class TestConfig:
    def test_patch_clamped_to_spatial(self):
        cfg = small_config(patch_size=16, spatial=8)
        assert cfg.patch_size == 8

    def test_embed_head_divisibility(self):
        with pytest.raises(ValueError, match="heads"):
            small_config(embed_dim=15)

    def test_unknown_complement_rule(self):
        with pytest.raises(ValueError, match="complement"):
            small_config(complement_rule="mystery")


class TestAlgebra:
    def test_commutativity_and_collapse_many_draws(self):
        worst_comm = worst_collapse = 0.0
        for seed in range(50):
            g = np.random.default_rng(seed)
            block = CAFBlock(small_config(), g)
            a = Tensor(g.standard_normal((2, 8, 8)))
            b = Tensor(g.standard_normal((2, 8, 8)))
            ab, ba = block(a, b).data, block(b, a).data
            worst_comm = max(worst_comm, np.abs(ab - ba).max())
            # fusing a map with itself must collapse to unembed(2 V)
            _, _, v = block.branch_qkv(a, 0)
            twice = block.unembed(2.0 * v).data
            worst_collapse = max(worst_collapse,
                                 np.abs(block(a, a).data - twice).max())
        assert worst_comm < 1e-6
        assert worst_collapse < 1e-6

    def test_commutativity_is_bitwise_under_residual_rule(self):
        g = np.random.default_rng(7)
        block = CAFBlock(small_config(), g)
        a = Tensor(g.standard_normal((2, 8, 8)))
        b = Tensor(g.standard_normal((2, 8, 8)))
        np.testing.assert_array_equal(block(a, b).data, block(b, a).data)

    def test_residual_pairs_sum_to_values(self):
        # under the residual rule, (1-s)V + sV recovers V exactly
        g = np.random.default_rng(3)
        block = CAFBlock(small_config(), g)
        a = Tensor(g.standard_normal((2, 8, 8)))
        q, k, v = block.branch_qkv(a, 0)
        s = Tensor(np.exp(g.standard_normal((2, 4, 4))))
        recon = (v - matmul(s, v)) + matmul(s, v)
        np.testing.assert_allclose(recon.data, v.data, atol=1e-12)

    def test_literal_rule_still_commutes(self):
        g = np.random.default_rng(11)
        block = CAFBlock(small_config(complement_rule="literal"), g)
        a = Tensor(g.standard_normal((2, 8, 8)))
        b = Tensor(g.standard_normal((2, 8, 8)))
        assert np.abs(block(a, b).data - block(b, a).data).max() < 1e-10

    def test_functional_wrapper_matches_block(self):
        g = np.random.default_rng(4)
        block = CAFBlock(small_config(), g)
        a = Tensor(g.standard_normal((2, 8, 8)))
        b = Tensor(g.standard_normal((2, 8, 8)))
        np.testing.assert_array_equal(caf_fuse(a, b, block).data,
                                      block(a, b).data)


class TestBlock:
    def test_output_shape_matches_input(self):
        g = np.random.default_rng(5)
        block = CAFBlock(small_config(), g)
        out = block(Tensor(g.standard_normal((2, 8, 8))),
                    Tensor(g.standard_normal((2, 8, 8))))
        assert out.shape == (2, 8, 8)

    def test_shape_mismatch_rejected(self):
        g = np.random.default_rng(6)
        block = CAFBlock(small_config(), g)
        with pytest.raises(ValueError, match="shape mismatch"):
            block(Tensor(np.zeros((2, 8, 8))), Tensor(np.zeros((2, 4, 4))))

    def test_weights_reused_at_other_sizes(self):
        # token weights are per-patch, so the same block runs at any
        # patch-divisible square size
        g = np.random.default_rng(8)
        block = CAFBlock(small_config(), g)
        out = block(Tensor(g.standard_normal((2, 16, 16))),
                    Tensor(g.standard_normal((2, 16, 16))))
        assert out.shape == (2, 16, 16)

    def test_unshared_branches_have_more_parameters(self):
        g = np.random.default_rng(9)
        shared = CAFBlock(small_config(), g)
        split = CAFBlock(small_config(share_branches=False), g)
        assert len(split.named_parameters()) > len(shared.named_parameters())

    def test_gradients_reach_every_parameter(self):
        g = np.random.default_rng(10)
        block = CAFBlock(small_config(), g)
        a = Tensor(g.standard_normal((2, 8, 8)), requires_grad=True)
        b = Tensor(g.standard_normal((2, 8, 8)))
        tsum(block(a, b) * block(a, b)).backward()
        for name, p in block.named_parameters().items():
            assert p.grad is not None, name
        assert a.grad is not None
