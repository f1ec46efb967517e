"""Pre-training loop: seeded shuffling, two-view augmentation, symmetric
loss over both view orders, optimizer step under the cosine schedule, EMA
update, JSONL metrics, and periodic checkpoints.

A NaN in any loss term aborts the run with a diagnostic dump of the
offending step's breakdown.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, add, scale
from .checkpoint import save_checkpoint
from .codebook import codebook_perplexity
from .config import RunConfig
from .data import AugmentConfig, Dataset, RngStream, augment_pair
from .errors import ConfigurationError, NumericError
from .model import ModelState, ema_update, forward_pass, init_model_state
from .objectives import LossBreakdown, LossWeights, directional_loss, symmetric_loss
from .optim import Optimizer, cosine_lr
from .seeding import mix64, tag

TERMS = ("l1", "l2", "l_cb", "l_ce", "l_q", "l_r", "total")


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    steps: int
    state: ModelState


def _check_breakdown(bd: LossBreakdown, step: int) -> dict[str, float]:
    vals = bd.floats()
    bad = [k for k in TERMS if not math.isfinite(vals[k])]
    if bad:
        raise NumericError(
            f"non-finite loss terms {bad} at step {step}; breakdown: {json.dumps(vals)}")
    return vals


def train(cfg: RunConfig, dataset: Dataset, out_dir, augment: AugmentConfig | None = None,
          state: ModelState | None = None) -> TrainResult:
    cfg.validate()
    augment = (augment or AugmentConfig()).validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if dataset.image_size != cfg.image_size:
        raise ConfigurationError(
            f"dataset images are {dataset.image_size}px but config expects {cfg.image_size}px")
    train_samples = dataset.subset("train") or dataset.samples
    if len(train_samples) < cfg.batch_size:
        raise ConfigurationError(
            f"training split ({len(train_samples)}) smaller than batch size ({cfg.batch_size})")
    # sample index in the id-sorted training list keys the augmentation stream
    train_samples = sorted(train_samples, key=lambda s: s.id)

    state = state if state is not None else init_model_state(cfg)
    optimizer = Optimizer(state.trainable_parameters(), cfg.base_lr,
                          momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                          mode=cfg.optimizer, lars_eps=cfg.lars_eps)
    weights = LossWeights(alpha=cfg.alpha, gamma=cfg.gamma, alpha_commit=cfg.alpha_commit)
    batches_per_epoch = len(train_samples) // cfg.batch_size
    total_steps = cfg.epochs * batches_per_epoch
    stream = RngStream(cfg.seed)

    metrics_path = out / "metrics.jsonl"
    ckpt_path = out / "checkpoint.bin"
    step = 0
    done = False
    with open(metrics_path, "w", encoding="ascii") as metrics:
        for epoch in range(cfg.epochs):
            order = np.random.default_rng(mix64(cfg.seed, tag("shuffle"), epoch)) \
                      .permutation(len(train_samples))
            for b in range(batches_per_epoch):
                batch_idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                sym_terms = []
                sums = {k: 0.0 for k in TERMS}
                step_indices = []
                for i in batch_idx:
                    sample = train_samples[i]
                    v1, v2 = augment_pair(sample, augment, stream.child(int(i), epoch))
                    x1 = Tensor(v1[None, :, :])
                    x2 = Tensor(v2[None, :, :])
                    out12 = forward_pass(x1, x2, state, cfg)
                    out21 = forward_pass(x2, x1, state, cfg)
                    bd12 = directional_loss(out12, x1, weights, cfg)
                    bd21 = directional_loss(out21, x2, weights, cfg)
                    for bd in (bd12, bd21):
                        vals = _check_breakdown(bd, step + 1)
                        for k in TERMS:
                            sums[k] += vals[k]
                    step_indices.append(out12.quantization.indices)
                    step_indices.append(out21.quantization.indices)
                    sym_terms.append(symmetric_loss(bd12, bd21))
                batch_loss = sym_terms[0]
                for term in sym_terms[1:]:
                    batch_loss = add(batch_loss, term)
                batch_loss = scale(batch_loss, 1.0 / len(sym_terms))

                lr = cosine_lr(step, total_steps, cfg.base_lr)
                optimizer.zero_grad()
                batch_loss.backward()
                optimizer.step(lr)
                ema_update(state)
                step += 1

                record = {"step": step, "lr": lr}
                n_dir = 2 * len(batch_idx)
                for k in TERMS:
                    record[k] = sums[k] / n_dir
                record["perplexity"] = codebook_perplexity(
                    np.concatenate(step_indices), cfg.codebook_size)
                metrics.write(json.dumps(record, sort_keys=True) + "\n")

                if cfg.max_steps and step >= cfg.max_steps:
                    done = True
                    break
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0 and not done:
                save_checkpoint(state, cfg, out / f"checkpoint_epoch{epoch + 1:04d}.bin")
            if done:
                break
    save_checkpoint(state, cfg, ckpt_path)
    return TrainResult(checkpoint_path=ckpt_path, metrics_path=metrics_path,
                       steps=step, state=state)
