"""Deterministic mini-batch SGD over bags."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .netcore import ModelDims, ModelParams, OptimConfig, init_model, sgd_update, zero_grads
from .oicr import OicrConfig, total_loss

log = logging.getLogger(__name__)

LOG_EVERY = 50


def default_schedule(total_iterations: int, base_lr: float = 0.001) -> list[tuple[int, float]]:
    """Base rate for the first 4/7 of training, a tenth of it afterwards."""
    first = round(total_iterations * 4 / 7)
    return [(first, base_lr), (total_iterations - first, base_lr / 10)]


@dataclass
class TrainConfig:
    total_iterations: int = 3500
    base_lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 2
    hidden: int = 64
    oicr: OicrConfig = field(default_factory=OicrConfig)
    seed: int = 0
    schedule: list[tuple[int, float]] | None = None

    def optim(self) -> OptimConfig:
        schedule = self.schedule or default_schedule(self.total_iterations, self.base_lr)
        return OptimConfig(schedule, self.momentum, self.weight_decay,
                           self.batch_size, self.total_iterations)


@dataclass
class LogRow:
    iteration: int
    lr: float
    loss_total: float
    loss_base: float
    loss_refine: list[float]


class NonFiniteLossError(RuntimeError):
    pass


class BatchSampler:
    """Epoch-cyclic seeded shuffling; batches may straddle epoch boundaries."""

    def __init__(self, n: int, seed: int):
        self.n = n
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.order = self.rng.permutation(n)
        self.pos = 0

    def next_batch(self, size: int) -> list[int]:
        out = []
        while len(out) < size:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            out.append(int(self.order[self.pos]))
            self.pos += 1
        return out


def train_run(dataset, cfg: TrainConfig, params: ModelParams | None = None
              ) -> tuple[ModelParams, list[LogRow]]:
    if not dataset:
        raise ValueError("empty dataset")
    for bag in dataset:
        if not np.any(bag.label):
            raise ValueError(f"image {bag.image_id} has no positive class")
    optim = cfg.optim()
    num_classes = int(dataset[0].label.shape[0])
    dims = ModelDims(int(dataset[0].features.shape[1]), cfg.hidden, num_classes, cfg.oicr.refinements)
    if params is None:
        params = init_model(dims, cfg.seed)
    # the sampler gets its own stream so init and shuffling stay decoupled
    sampler = BatchSampler(len(dataset), cfg.seed + 1)

    k = cfg.oicr.refinements
    rows: list[LogRow] = []
    window = np.zeros(2 + k)
    window_n = 0
    for it in range(optim.total_iterations):
        lr = optim.lr_at(it)
        batch = sampler.next_batch(optim.batch_size)
        acc = zero_grads(params)
        batch_losses = np.zeros(2 + k)
        for idx in batch:
            bag = dataset[idx]
            losses, grads, _ = total_loss(bag, params, cfg.oicr)
            if not math.isfinite(losses.total):
                raise NonFiniteLossError(
                    f"non-finite loss {losses.total} at iteration {it + 1}, image {bag.image_id}")
            for name, (gw, gb) in grads.items():
                aw, ab = acc[name]
                aw += gw
                ab += gb
            batch_losses += [losses.total, losses.base, *losses.refine]
        scale = 1.0 / len(batch)
        for name in acc:
            aw, ab = acc[name]
            acc[name] = (aw * scale, ab * scale)
        sgd_update(params, acc, lr, optim.momentum, optim.weight_decay)

        window += batch_losses * scale
        window_n += 1
        if (it + 1) % LOG_EVERY == 0 or it + 1 == optim.total_iterations:
            mean = window / window_n
            rows.append(LogRow(it + 1, lr, float(mean[0]), float(mean[1]), [float(v) for v in mean[2:]]))
            log.debug("iter %d lr %g loss %.5f", it + 1, lr, mean[0])
            window[:] = 0.0
            window_n = 0
    return params, rows


def log_to_csv(rows: list[LogRow], refinements: int) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["iter", "lr", "loss_total", "loss_base"]
                    + [f"loss_r{k}" for k in range(1, refinements + 1)])
    for r in rows:
        writer.writerow([r.iteration, repr(r.lr), repr(r.loss_total), repr(r.loss_base)]
                        + [repr(v) for v in r.loss_refine])
    return buf.getvalue()
