"""Acceptance gate: one test per release criterion, pinned tolerances.

Each test prints a single ``criterion N: PASS/FAIL`` line directly to the
terminal (bypassing capture) so the gate is auditable from the test log.
"""

import time

import numpy as np
import pytest

from adafuse.attention import CAFBlock, CAFConfig
from adafuse.config import using_dtype
from adafuse.data import (load_image, rgb_to_ycbcr, save_image,
                          synthetic_dataset, synthetic_pair, ycbcr_to_rgb)
from adafuse.gradcheck import run_suite
from adafuse.losses import (LossWeights, content_loss, grad_loss, ssim_loss,
                            total_loss)
from adafuse.metrics import (correlation_coeff, entropy, fmi_dct, mutual_info,
                             psnr)
from adafuse.network import AdaFuseModel, ModelConfig, load_checkpoint, \
    save_checkpoint
from adafuse.spectral import fft2d, ifft2d, naive_dft2d
from adafuse.tensor import Tensor, no_grad
from adafuse.train import TrainConfig, evaluate_pairs, train

TOY_MODEL = dict(channels=(8, 16, 32, 64), input_size=64, embed_dim=64,
                 num_heads=2, patch_sizes=(8, 4, 2, 1))


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, detail


def test_criterion_1_gradient_suite(capsys):
    t0 = time.time()
    results = run_suite(seeds=20)
    wall = time.time() - t0
    bad = {k: v for k, v in results.items() if v[0] >= v[1]}
    worst = max(err / tol for err, tol in results.values())
    ok = not bad and wall < 300.0
    report(capsys, 1, ok,
           f"15 ops x 20 seeds, worst err/tol {worst:.2e}, {wall:.0f}s")


def test_criterion_2_spectral_suite(capsys):
    with using_dtype("float64"):
        g = np.random.default_rng(0)
        worst_rt = worst_oracle = worst_parseval = 0.0
        for size in (8, 16):
            x = g.standard_normal((1, size, size))
            worst_rt = max(worst_rt,
                           np.abs(ifft2d(fft2d(x)).data - x).max())
            worst_oracle = max(worst_oracle,
                               np.abs(fft2d(x).values[0] -
                                      naive_dft2d(x[0])).max())
            spec = fft2d(x).values
            spatial = (x ** 2).sum()
            freq = (np.abs(spec) ** 2).sum() / (size * size)
            worst_parseval = max(worst_parseval,
                                 abs(spatial - freq) / spatial)
    ok = worst_rt < 1e-10 and worst_parseval < 1e-9 and worst_oracle < 1e-9
    report(capsys, 2, ok,
           f"roundtrip {worst_rt:.1e}, parseval {worst_parseval:.1e}, "
           f"oracle {worst_oracle:.1e}")


def test_criterion_3_caf_algebra(capsys):
    with using_dtype("float64"):
        worst_comm = worst_collapse = 0.0
        for seed in range(50):
            g = np.random.default_rng(seed)
            cfg = CAFConfig(patch_size=4, embed_dim=16, num_heads=2,
                            channels=2, spatial=8)
            block = CAFBlock(cfg, g)
            a = Tensor(g.standard_normal((2, 8, 8)))
            b = Tensor(g.standard_normal((2, 8, 8)))
            worst_comm = max(worst_comm,
                             np.abs(block(a, b).data - block(b, a).data).max())
            _, _, v = block.branch_qkv(a, 0)
            collapse = np.abs(block(a, a).data -
                              block.unembed(2.0 * v).data).max()
            worst_collapse = max(worst_collapse, collapse)
    ok = worst_comm < 1e-6 and worst_collapse < 1e-6
    report(capsys, 3, ok,
           f"50 draws, commutativity {worst_comm:.1e}, "
           f"collapse {worst_collapse:.1e}")


def test_criterion_4_loss_zero_cases(capsys):
    with using_dtype("float64"):
        g = np.random.default_rng(1)
        a = Tensor(g.random((1, 16, 16)))
        b = Tensor(g.random((1, 16, 16)))
        content_zero = abs(float(content_loss((a + b) * 0.5, a, b).data))
        const = Tensor(np.full((1, 16, 16), 0.5))
        grad_zero = abs(float(grad_loss(const, const, const).data))
        ssim_zero = abs(float(ssim_loss(const, const, const).data))
        f = Tensor(g.random((1, 16, 16)))
        loss, rep = total_loss(f, a, b, LossWeights(0.5, 0.5, 0.5))
        recomb = abs(rep.total - (0.5 * rep.content + rep.grad + rep.ssim))
    ok = (content_zero == 0.0 and grad_zero == 0.0 and ssim_zero < 1e-12
          and recomb < 1e-12)
    report(capsys, 4, ok,
           f"zeros {content_zero:.1e}/{grad_zero:.1e}/{ssim_zero:.1e}, "
           f"recombination {recomb:.1e}")


def test_criterion_5_metric_oracles(capsys):
    ramp = np.arange(256, dtype=np.float64).reshape(16, 16) / 255.0
    en = entropy(ramp)
    mi_gap = abs(mutual_info(ramp, ramp, ramp) - 2 * entropy(ramp))
    cc_gap = abs(correlation_coeff(ramp, ramp, ramp) - 1.0)
    a = np.full((16, 16), 100 / 255.0)
    f = np.full((16, 16), 101 / 255.0)
    psnr_gap = abs(psnr(f, a, a) - 20 * np.log10(255.0))
    fmi_gap = abs(fmi_dct(ramp, ramp, ramp) - 1.0)
    ok = (en == 8.0 and mi_gap < 1e-9 and cc_gap < 1e-12
          and psnr_gap < 1e-9 and fmi_gap < 1e-9)
    report(capsys, 5, ok,
           f"EN {en}, MI gap {mi_gap:.1e}, CC gap {cc_gap:.1e}, "
           f"PSNR gap {psnr_gap:.1e}, FMI gap {fmi_gap:.1e}")


def _smoke_train(steps, seed, tmp, pairs=None, fusion="caf", max_wall=None):
    cfg = TrainConfig(model=ModelConfig(**{**TOY_MODEL,
                                           "fusion_rule": fusion}),
                      epochs=10 ** 9, max_steps=steps, batch_size=4,
                      seed=seed, early_stop_patience=10 ** 9)
    data = pairs if pairs is not None else [synthetic_pair("halves", 64, seed)]
    model, curve = train(cfg, data, tmp, log=lambda *a: None)
    return model, curve, data


def test_criterion_6_overfit_smoke(capsys, tmp_path):
    t0 = time.time()
    # determinism probe: two independent 3-step runs must match bit-for-bit
    _, c1, _ = _smoke_train(3, 0, tmp_path / "d1")
    _, c2, _ = _smoke_train(3, 0, tmp_path / "d2")
    deterministic = all(r1["total"] == r2["total"] for r1, r2 in zip(c1, c2))
    # the pinned 200-step overfit run
    _, curve, _ = _smoke_train(200, 0, tmp_path / "full")
    drop = 1.0 - curve[-1]["total"] / curve[0]["total"]
    wall = time.time() - t0
    ok = deterministic and drop >= 0.60 and wall < 600.0
    report(capsys, 6, ok,
           f"loss drop {drop:.1%} (bar 60%), deterministic {deterministic}, "
           f"{wall:.0f}s")


def test_criterion_7_ablation_ordering(capsys, tmp_path):
    def means(rows):
        return (float(np.mean([r.mi for _, r in rows])),
                float(np.mean([r.fmi for _, r in rows])))

    data = synthetic_dataset(10, size=64, seed=0)
    model_caf, _, _ = _smoke_train(200, 0, tmp_path / "caf", pairs=data)
    model_avg, _, _ = _smoke_train(200, 0, tmp_path / "avg", pairs=data,
                                   fusion="avg")
    mi_c, fmi_c = means(evaluate_pairs(model_caf, data))
    mi_a, fmi_a = means(evaluate_pairs(model_avg, data))
    ok = mi_c >= mi_a and fmi_c >= fmi_a
    report(capsys, 7, ok,
           f"caf MI {mi_c:.3f} FMI {fmi_c:.3f} vs avg MI {mi_a:.3f} "
           f"FMI {fmi_a:.3f}")


def test_criterion_8_non_reproduction_statement(capsys):
    statement = ("full-scale published results (proprietary clinical dataset, "
                 "2000-epoch GPU training) are out of scope at desk scale; "
                 "criteria 1-7 substitute property- and oracle-based checks")
    report(capsys, 8, True, statement)


def test_criterion_9_engineering_roundtrips(capsys, tmp_path):
    # checkpoint: save -> load -> forward bit-identical
    model = AdaFuseModel(ModelConfig(channels=(2, 4, 4, 4), input_size=16,
                                     embed_dim=8, num_heads=2,
                                     patch_sizes=(4, 2, 2, 1), ffn_ratio=2))
    g = np.random.default_rng(0)
    a, b = Tensor(g.random((1, 16, 16))), Tensor(g.random((1, 16, 16)))
    with no_grad():
        before = model.forward(a, b).data
    save_checkpoint(tmp_path / "m.adfz", model)
    loaded, _ = load_checkpoint(tmp_path / "m.adfz")
    with no_grad():
        after = loaded.forward(a, b).data
    ckpt_exact = np.array_equal(before, after)

    # 8-bit image I/O bit-exact
    img = g.integers(0, 256, (9, 7)) / 255.0
    save_image(tmp_path / "i.png", img)
    io_exact = np.array_equal(load_image(tmp_path / "i.png"), img)

    # color round trip within 2 digital levels
    rgb = g.random((8, 8, 3))
    color_gap = np.abs(ycbcr_to_rgb(rgb_to_ycbcr(rgb)) - rgb).max()

    # fixed-seed curve bit-identical
    data = synthetic_dataset(2, size=16, seed=0)
    cfg = dict(model=ModelConfig(channels=(2, 4, 4, 4), input_size=16,
                                 embed_dim=8, num_heads=2,
                                 patch_sizes=(4, 2, 2, 1), ffn_ratio=2),
               epochs=10, max_steps=3, batch_size=2, seed=0)
    _, c1 = train(TrainConfig(**cfg), data, tmp_path / "r1",
                  log=lambda *a: None)
    _, c2 = train(TrainConfig(**cfg), data, tmp_path / "r2",
                  log=lambda *a: None)
    curve_exact = all(r1["total"] == r2["total"] and
                      r1["content"] == r2["content"] for r1, r2 in zip(c1, c2))

    ok = ckpt_exact and io_exact and color_gap <= 2.0 / 255.0 and curve_exact
    report(capsys, 9, ok,
           f"checkpoint {ckpt_exact}, image io {io_exact}, "
           f"color gap {color_gap * 255:.2f}/255, curve {curve_exact}")
