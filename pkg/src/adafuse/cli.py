"""Command-line interface: train, fuse, eval, ablate, gradcheck, selftest.

Exit codes: 0 success, 1 usage error, 2 runtime failure.  With ``--json``
errors are emitted as a machine-readable JSON object on stderr.
"""

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import gradcheck as gradcheck_mod
from . import metrics as metrics_mod
from .config import using_dtype
from .data import (ImagePair, load_image, load_manifest, save_image,
                   synthetic_dataset)
from .losses import LossWeights
from .network import AdaFuseModel, ModelConfig, load_checkpoint
from .train import TrainConfig, evaluate_pairs, fuse_pair, rgb_luma, train

CONFIG_SCHEMA_VERSION = 1

LOSS_TERM_CHOICES = {
    "content": ("content",),
    "structure": ("structure",),
    "both": ("content", "structure"),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so usage errors map to 1."""

    def error(self, message):
        raise UsageError(message)


def toy_model_config(**overrides):
    """Small configuration used for smoke training and ablations."""
    base = dict(channels=(8, 16, 32, 64), input_size=64, embed_dim=64,
                num_heads=2, patch_sizes=(8, 4, 2, 1))
    base.update(overrides)
    return ModelConfig(**base)


def load_train_config(path):
    """Read a versioned JSON config file into a TrainConfig."""
    raw = json.loads(Path(path).read_text())
    version = raw.get("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported config schema version {version}")
    model = ModelConfig(**raw.get("model", {}))
    train_kwargs = dict(raw.get("train", {}))
    if "loss_weights" in train_kwargs:
        train_kwargs["loss_weights"] = LossWeights(**train_kwargs["loss_weights"])
    if "loss_terms" in train_kwargs:
        train_kwargs["loss_terms"] = tuple(train_kwargs["loss_terms"])
    return TrainConfig(model=model, **train_kwargs)


def _build_parser():
    parser = _Parser(prog="adafuse", description=__doc__)
    parser.add_argument("--json", action="store_true",
                        help="emit errors as JSON on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--data", help="dataset manifest (JSON)")
    p.add_argument("--synthetic", type=int, default=0,
                   help="train on N synthetic pairs instead of a manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("fuse", help="fuse two images with a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("input_a")
    p.add_argument("input_b")
    p.add_argument("--output", required=True)
    p.add_argument("--color", action="store_true",
                   help="treat input A as a color functional image: fuse its "
                        "luminance and reattach the chrominance")

    p = sub.add_parser("eval", help="evaluate fused outputs over a manifest")
    p.add_argument("--manifest", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint", help="fuse with this model, then score")
    group.add_argument("--fused-dir", help="score pre-fused images named <pair_id>.png")
    p.add_argument("--csv", help="write metrics CSV here")
    p.add_argument("--json-out", help="write metrics JSON here")

    p = sub.add_parser("ablate", help="train and score an ablation variant")
    p.add_argument("--fusion", choices=("avg", "l1", "max", "caf"), default="caf")
    p.add_argument("--no-fgfb", action="store_true", help="disable the frequency branch")
    p.add_argument("--loss", choices=sorted(LOSS_TERM_CHOICES), default="both")
    p.add_argument("--pairs", type=int, default=10)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)

    sub.add_parser("selftest", help="run the full invariant suite")
    return parser


# -- subcommands --------------------------------------------------------------


def _cmd_train(args):
    config = load_train_config(args.config) if args.config else TrainConfig()
    for name in ("epochs", "max_steps", "seed"):
        value = getattr(args, name)
        if value is not None:
            setattr(config, name, value)
    if args.synthetic:
        dataset = synthetic_dataset(args.synthetic, size=config.model.input_size,
                                    seed=config.seed)
    elif args.data:
        dataset = load_manifest(args.data)
    else:
        raise UsageError("train: provide --data or --synthetic")
    train(config, dataset, args.out, resume_from=args.resume)
    print(f"trained model written to {args.out}")
    return 0


def _load_fuse_pair(args):
    a = load_image(args.input_a)
    b = load_image(args.input_b)
    if b.ndim == 3:
        b = rgb_luma(b)
    if a.ndim == 3 and not args.color:
        a = rgb_luma(a)
    modality = "functional-structural" if (args.color and a.ndim == 3) \
        else "structural-structural"
    return ImagePair(pair_id="cli", source_a=a, source_b=b, modality=modality)


def _cmd_fuse(args):
    model, _ = load_checkpoint(args.checkpoint)
    pair = _load_fuse_pair(args)
    fused = fuse_pair(model, pair)
    save_image(args.output, fused)
    print(f"fused image written to {args.output}")
    return 0


def _cmd_eval(args):
    pairs = load_manifest(args.manifest)
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        rows = evaluate_pairs(model, pairs)
    else:
        fused_dir = Path(args.fused_dir)
        rows = []
        for pair in pairs:
            fused = load_image(fused_dir / f"{pair.pair_id}.png")
            y_f = fused if fused.ndim == 2 else rgb_luma(fused)
            y_a, y_b, _ = pair.network_inputs()
            rows.append((pair.pair_id, metrics_mod.evaluate(y_f, y_a, y_b)))
    csv_text = metrics_mod.reports_to_csv(rows)
    if args.csv:
        Path(args.csv).write_text(csv_text)
    if args.json_out:
        Path(args.json_out).write_text(metrics_mod.reports_to_json(rows))
    if not args.csv and not args.json_out:
        sys.stdout.write(csv_text)
    print(f"evaluated {len(rows)} pairs")
    return 0


def run_ablation(fusion="caf", use_fgfb=True, loss="both", pairs=10,
                 steps=200, seed=0, out_dir=None, log=print):
    """Smoke-train one variant on synthetic pairs and score the result.

    Returns (per-pair metric rows, mean metrics dict).
    """
    model_cfg = toy_model_config(fusion_rule=fusion, use_fgfb=use_fgfb)
    config = TrainConfig(model=model_cfg, epochs=10 ** 9, max_steps=steps,
                         seed=seed, loss_terms=LOSS_TERM_CHOICES[loss],
                         early_stop_patience=10 ** 9)
    dataset = synthetic_dataset(pairs, size=model_cfg.input_size, seed=seed)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        model, _ = train(config, dataset, out_dir, log=log)
    else:
        model, _ = _train_in_tmp(config, dataset, log)
    rows = evaluate_pairs(model, dataset)
    mean = {name: float(np.mean([getattr(rep, name) for _, rep in rows]))
            for name in ("en", "psnr", "mi", "cc", "fmi")}
    if out_dir:
        for pair in dataset:
            save_image(out_dir / f"{pair.pair_id}.png", fuse_pair(model, pair))
        (out_dir / "metrics.json").write_text(metrics_mod.reports_to_json(rows))
    return rows, mean


def _train_in_tmp(config, dataset, log):
    import tempfile
    with tempfile.TemporaryDirectory() as tmp:
        return train(config, dataset, tmp, log=log)


def _cmd_ablate(args):
    rows, mean = run_ablation(fusion=args.fusion, use_fgfb=not args.no_fgfb,
                              loss=args.loss, pairs=args.pairs, steps=args.steps,
                              seed=args.seed, out_dir=args.out)
    print(f"ablation fusion={args.fusion} fgfb={not args.no_fgfb} loss={args.loss}")
    for name, value in mean.items():
        print(f"  mean {name}: {value:.6f}")
    return 0


def _cmd_gradcheck(args):
    results = gradcheck_mod.run_suite(seeds=args.seeds, log=print)
    return 0 if all(err < tol for err, tol in results.values()) else 2


def _cmd_selftest(args):
    failures = []

    def check(name, ok):
        print(f"{name:40s} {'ok' if ok else 'FAIL'}")
        if not ok:
            failures.append(name)

    with using_dtype("float64"):
        from . import spectral
        from .attention import CAFBlock, CAFConfig
        from .losses import content_loss, grad_loss, ssim_loss
        from .tensor import Tensor

        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 16, 16))
        rt = spectral.ifft2d(spectral.fft2d(x)).data
        check("fft round trip", np.abs(rt - x).max() < 1e-10)
        spec = spectral.fft2d(x)
        energy = (np.abs(spec.values) ** 2).sum() / (16 * 16)
        check("parseval", abs(energy - (x ** 2).sum()) / (x ** 2).sum() < 1e-9)

        cfg = CAFConfig(patch_size=4, embed_dim=16, num_heads=2, channels=2, spatial=8)
        block = CAFBlock(cfg, rng)
        a = Tensor(rng.standard_normal((2, 8, 8)))
        b = Tensor(rng.standard_normal((2, 8, 8)))
        check("caf commutativity",
              np.abs(block(a, b).data - block(b, a).data).max() < 1e-6)

        i1 = Tensor(rng.random((1, 8, 8)))
        i2 = Tensor(rng.random((1, 8, 8)))
        avg = (i1 + i2) * 0.5
        check("content loss zero case",
              abs(float(content_loss(avg, i1, i2).data)) < 1e-12)
        const = Tensor(np.full((1, 16, 16), 0.5))
        check("grad loss zero case",
              abs(float(grad_loss(const, const, const).data)) < 1e-12)
        check("ssim loss zero case",
              abs(float(ssim_loss(const, const, const).data)) < 1e-12)

        ramp = np.arange(256, dtype=np.float64).reshape(16, 16) / 255.0
        check("entropy oracle", metrics_mod.entropy(ramp) == 8.0)
        check("fmi self oracle",
              abs(metrics_mod.fmi_dct(ramp, ramp, ramp) - 1.0) < 1e-9)

    # checkpoint round trip runs at the float32 storage precision
    import tempfile
    from .network import save_checkpoint
    from .tensor import Tensor, no_grad
    rng = np.random.default_rng(1)
    model = AdaFuseModel(toy_model_config(), seed=0)
    u = Tensor(rng.random((1, 64, 64)))
    v = Tensor(rng.random((1, 64, 64)))
    with no_grad():
        before = model.forward(u, v).data
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.adfz"
        save_checkpoint(path, model)
        model2, _ = load_checkpoint(path)
        with no_grad():
            after = model2.forward(Tensor(u.data), Tensor(v.data)).data
    check("checkpoint bit-exact forward", np.array_equal(before, after))

    print(f"selftest: {len(failures)} failure(s)")
    return 0 if not failures else 2


_COMMANDS = {
    "train": _cmd_train,
    "fuse": _cmd_fuse,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
    "selftest": _cmd_selftest,
}


def _report_error(exc, as_json, kind):
    if as_json:
        sys.stderr.write(json.dumps({"error": str(exc), "kind": kind}) + "\n")
    else:
        sys.stderr.write(f"adafuse: {kind}: {exc}\n")


def main(argv=None):
    parser = _build_parser()
    as_json = "--json" in (argv if argv is not None else sys.argv[1:])
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        _report_error(exc, as_json, "usage")
        return 1
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        _report_error(exc, as_json, "usage")
        return 1
    except (OSError, ValueError, KeyError, FloatingPointError) as exc:
        _report_error(exc, as_json, "runtime")
        return 2


if __name__ == "__main__":
    sys.exit(main())
