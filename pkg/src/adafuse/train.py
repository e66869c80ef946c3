"""Training loop, fusion/evaluation drivers and ablation plumbing."""

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from .data import crop_to, pad_to_multiple, recompose_fused
from .losses import LossWeights, total_loss
from .network import AdaFuseModel, ModelConfig, load_checkpoint, save_checkpoint
from .optim import AdamW
from .tensor import Tensor, no_grad

CURVE_FIELDS = ["step", "content", "grad", "ssim", "total", "wall_ms"]


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 50
    max_steps: int = 0            # 0 = no step cap
    batch_size: int = 4
    seed: int = 0
    lr: float = 2e-4
    weight_decay: float = 0.0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    loss_terms: tuple = ("content", "structure")
    loss_reduction: str = "mean"
    checkpoint_every: int = 0     # steps; 0 = only final
    early_stop_patience: int = 10


def _batches(n_pairs, batch_size, seed, epoch):
    """Per-epoch permutation derived from (seed, epoch) so a resumed run
    sees the identical order."""
    rng = np.random.default_rng((seed, epoch))
    order = rng.permutation(n_pairs)
    for i in range(0, n_pairs, batch_size):
        yield order[i:i + batch_size]


def train_step(model, optimizer, pairs, weights, terms=("content", "structure"),
               reduction="mean"):
    """One optimizer step over a batch of ImagePairs; returns the mean
    LossReport fields as a dict."""
    optimizer.zero_grad()
    sums = {"content": 0.0, "grad": 0.0, "ssim": 0.0, "total": 0.0}
    scale = 1.0 / len(pairs)
    for pair in pairs:
        y_a, y_b, _ = pair.network_inputs()
        a = Tensor(y_a[None])
        b = Tensor(y_b[None])
        fused = model.forward(a, b)
        loss, report = total_loss(fused, a, b, weights, reduction, terms)
        (loss * scale).backward()
        for key in sums:
            sums[key] += scale * getattr(report, key)
    optimizer.step()
    return sums


def train(config, dataset, out_dir, resume_from=None, log=print):
    """Seeded, resumable training; writes ``curve.csv`` and checkpoints
    under ``out_dir``.  Returns (model, curve rows)."""
    if not dataset:
        raise ValueError("train: dataset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    curve_path = out_dir / "curve.csv"
    final_path = out_dir / "model.adfz"

    start_step = 0
    if resume_from:
        model, extra = load_checkpoint(resume_from)
        optimizer = AdamW(model.named_parameters(), lr=config.lr,
                          weight_decay=config.weight_decay)
        optimizer.load_state_arrays(extra)
        start_step = optimizer.step_count
        curve = _read_curve(curve_path) if curve_path.exists() else []
        curve = [row for row in curve if int(row["step"]) <= start_step]
    else:
        model = AdaFuseModel(config.model, seed=config.seed)
        optimizer = AdamW(model.named_parameters(), lr=config.lr,
                          weight_decay=config.weight_decay)
        curve = []

    step = start_step
    best = float("inf")
    stale_epochs = 0
    done = False
    global_batch = 0
    for epoch in range(config.epochs):
        epoch_total = 0.0
        epoch_batches = 0
        for idx in _batches(len(dataset), config.batch_size, config.seed, epoch):
            global_batch += 1
            if global_batch <= start_step:
                continue  # replayed by the resumed optimizer state
            t0 = time.perf_counter()
            report = train_step(model, optimizer, [dataset[i] for i in idx],
                                config.loss_weights, config.loss_terms,
                                config.loss_reduction)
            wall_ms = (time.perf_counter() - t0) * 1e3
            step += 1
            epoch_total += report["total"]
            epoch_batches += 1
            curve.append({"step": step, **{k: report[k] for k in
                                           ("content", "grad", "ssim", "total")},
                          "wall_ms": wall_ms})
            if config.checkpoint_every and step % config.checkpoint_every == 0:
                save_checkpoint(out_dir / f"step{step:06d}.adfz", model,
                                extra=optimizer.state_arrays())
            if config.max_steps and step >= config.max_steps:
                done = True
                break
        if epoch_batches:
            mean_total = epoch_total / epoch_batches
            log(f"epoch {epoch}: mean total loss {mean_total:.6f}")
            if mean_total < best - 1e-6:
                best = mean_total
                stale_epochs = 0
            else:
                stale_epochs += 1
                if stale_epochs >= config.early_stop_patience:
                    log(f"early stop at epoch {epoch} (plateau)")
                    done = True
        if done:
            break

    save_checkpoint(final_path, model, extra=optimizer.state_arrays())
    _write_curve(curve_path, curve)
    return model, curve


def _write_curve(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def _read_curve(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: int(v) if k == "step" else float(v) for k, v in row.items()}
            for row in rows]


def fuse_pair(model, pair):
    """Fused output for one ImagePair: grayscale (H,W) for structural
    pairs, RGB (H,W,3) when source_a carries chrominance."""
    y_a, y_b, chroma = pair.network_inputs()
    pa, size = pad_to_multiple(y_a)
    pb, _ = pad_to_multiple(y_b)
    with no_grad():
        fused = model.forward(Tensor(pa[None]), Tensor(pb[None]))
    y_f = crop_to(fused.data[0], size).astype(np.float64)
    if chroma is not None:
        return recompose_fused(y_f, chroma[0], chroma[1])
    return y_f


def evaluate_pairs(model, pairs):
    """Metric reports for fused outputs over a list of pairs.

    Metrics are computed on the luminance channel against the network's
    single-channel inputs."""
    rows = []
    for pair in pairs:
        y_a, y_b, chroma = pair.network_inputs()
        fused = fuse_pair(model, pair)
        y_f = fused if fused.ndim == 2 else rgb_luma(fused)
        rows.append((pair.pair_id, metrics_mod.evaluate(y_f, y_a, y_b)))
    return rows


def rgb_luma(rgb):
    from .data import rgb_to_ycbcr
    return rgb_to_ycbcr(rgb).y
