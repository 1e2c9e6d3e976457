"""Training loop: Adam on masked cross-entropy, best checkpoint by
validation Jaccard.

The data source is duck-typed; it must provide

    train_batches(batch_size, rng) -> iterator of (X, Y)
    val_arrays() -> (Xv, Yv)

with X of shape (N, fx, fy, fz) and Y of shape (N, rx, ry, rz).  See
phantom.TrainingData for the reference implementation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .arch import NetSpec
from .loss import loss_masked_ce, masked_ce_logit_grad
from .model import backward, forward, init_params
from .optim import adam_step, init_adam


@dataclass
class TrainConfig:
    # (epochs, learning rate) phases run back to back; full-scale runs use a
    # 1e-4 exploration phase followed by a long 1e-6 refinement phase
    schedule: tuple[tuple[int, float], ...] = ((100, 1e-4),)
    batch_size: int = 1000
    rng_seed: int = 0
    log_every: int = 0  # epochs between progress lines, 0 = quiet

    def validate(self) -> None:
        if not self.schedule:
            raise ValueError("schedule is empty")
        for epochs, lr in self.schedule:
            if epochs < 0:
                raise ValueError(f"negative epoch count {epochs}")
            if lr <= 0 or not np.isfinite(lr):
                raise ValueError(f"bad learning rate {lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def _eval_jaccard(spec, params, xv, yv, batch_size) -> float:
    tp = fp = fn = 0
    for i in range(0, len(xv), batch_size):
        probs, _ = forward(spec, params, xv[i:i + batch_size], mode="eval")
        pred = probs[..., 1] > 0.5
        truth = yv[i:i + batch_size].astype(bool)
        tp += int((pred & truth).sum())
        fp += int((pred & ~truth).sum())
        fn += int((~pred & truth).sum())
    denom = tp + fp + fn
    return 1.0 if denom == 0 else tp / denom


def train(
    spec: NetSpec,
    data,
    config: TrainConfig | None = None,
    params: dict[str, np.ndarray] | None = None,
    log=None,
) -> tuple[dict[str, np.ndarray], list[tuple[int, float, float]]]:
    """Run the schedule; returns (best_params, trace rows).

    Trace rows are (epoch, train_loss, val_jaccard) with train_loss the mean
    per-sample masked cross-entropy over the epoch.  The returned parameters
    are the epoch snapshot with the highest validation Jaccard (ties keep the
    earlier epoch).  Fully deterministic for a fixed seed and data source.
    """
    cfg = config or TrainConfig()
    cfg.validate()
    rng_init = np.random.default_rng([cfg.rng_seed, 1])
    rng_drop = np.random.default_rng([cfg.rng_seed, 2])
    if params is None:
        params = init_params(spec, rng_init)

    xv, yv = data.val_arrays()
    rows: list[tuple[int, float, float]] = []
    best_ji = -1.0
    best_params = {k: v.copy() for k, v in params.items()}

    epoch = 0
    for phase, (epochs, lr) in enumerate(cfg.schedule):
        if epochs == 0:
            continue
        adam = init_adam(params, lr)
        for _ in range(epochs):
            epoch += 1
            rng_batch = np.random.default_rng([cfg.rng_seed, 3, epoch])
            total = 0.0
            nb = 0
            for xb, yb in data.train_batches(cfg.batch_size, rng_batch):
                probs, caches = forward(spec, params, xb, mode="train", rng=rng_drop)
                loss, mask = loss_masked_ce(probs, yb)
                dlogits = masked_ce_logit_grad(probs, yb, mask)
                grads = backward(spec, params, caches, dlogits)
                adam_step(params, grads, adam)
                total += loss / len(xb)
                nb += 1
            train_loss = total / max(nb, 1)
            ji = _eval_jaccard(spec, params, xv, yv, cfg.batch_size)
            rows.append((epoch, train_loss, ji))
            if ji > best_ji:
                best_ji = ji
                best_params = {k: v.copy() for k, v in params.items()}
            if log is not None and cfg.log_every and epoch % cfg.log_every == 0:
                log(f"epoch {epoch:4d} phase {phase} loss {train_loss:.4f} val JI {ji:.4f}")
    return best_params, rows


def write_trace_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_jaccard"])
        for epoch, loss, ji in rows:
            writer.writerow([epoch, repr(float(loss)), repr(float(ji))])


def read_trace_csv(path) -> list[tuple[int, float, float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            (int(r["epoch"]), float(r["train_loss"]), float(r["val_jaccard"]))
            for r in reader
        ]
