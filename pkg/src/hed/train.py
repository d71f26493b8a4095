"""SGD with momentum and weight decay over the joint side + fusion objective."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .config import NetConfig, TrainConfig
from .data import TrainingSample, augment_corpus
from .losses import LossReport, total_objective
from .model import ModelParams, build, forward
from .tensor import Tensor

logger = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, last_report: Optional[LossReport]):
        super().__init__(f"non-finite loss at iteration {iteration}; last finite report: {last_report}")
        self.iteration = iteration
        self.last_report = last_report


@dataclass
class TrainLog:
    history: list = field(default_factory=list)  # LossReport per iteration
    lrs: list = field(default_factory=list)
    wall_clock: float = 0.0
    checksum: str = ""

    def totals(self) -> np.ndarray:
        return np.array([r.total for r in self.history])

    def write_csv(self, path) -> None:
        m = len(self.history[0].sides) if self.history else 0
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration"] + [f"side{i}" for i in range(1, m + 1)] + ["fuse", "total", "lr"])
            for it, (rep, lr) in enumerate(zip(self.history, self.lrs), 1):
                writer.writerow([it] + [repr(v) for v in rep.as_row()] + [repr(lr)])


class SGD:
    """Heavy-ball momentum: ``v <- mu*v - lr*(grad + wd*p); p <- p + v``."""

    def __init__(self, params: ModelParams, momentum: float, weight_decay: float):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self, lr: float) -> None:
        for name, t in self.params.items():
            g = t.grad if t.grad is not None else 0.0
            v = self.velocity[name]
            v *= self.momentum
            v -= lr * (g + self.weight_decay * t.data)
            t.data += v


def batch_loss(params: ModelParams, batch: Sequence[TrainingSample], net: NetConfig, backward: bool = True) -> LossReport:
    """Forward (and optionally backward) every sample; gradients and losses are summed."""
    sides = np.zeros(net.num_sides)
    fuse = total = 0.0
    for sample in batch:
        maps = forward(params, net, sample.image[None])
        loss, rep = total_objective(
            maps.side_activations,
            maps.fused_activation,
            sample.labels,
            net.alphas,
            deep_supervision=net.deep_supervision,
            balanced_fuse=net.balanced_fuse,
        )
        if backward:
            loss.backward()
        sides += rep.sides
        fuse += rep.fuse
        total += rep.total
    return LossReport(list(sides), fuse, total, net.alphas, net.deep_supervision)


def step(params: ModelParams, batch: Sequence[TrainingSample], net: NetConfig, optimizer: SGD, lr: float) -> LossReport:
    if not batch:
        raise ValueError("empty batch")
    params.zero_grad()
    report = batch_loss(params, batch, net)
    if not math.isfinite(report.total):
        return report
    optimizer.step(lr)
    return report


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Learning rate for 0-based ``iteration``; divided by 10 from ``drop_at`` on."""
    return cfg.learning_rate / 10.0 if iteration >= cfg.drop_at and cfg.drop_at < cfg.iterations else cfg.learning_rate


def make_samples(corpus, net: NetConfig, cfg: TrainConfig, stats: Optional[dict] = None) -> list:
    return augment_corpus(
        corpus,
        angles=cfg.angles,
        flips=cfg.flips,
        scales=cfg.scales,
        threshold=cfg.consensus_threshold,
        min_size=net.min_input_size,
        resize_to=cfg.resize,
        stats=stats,
    )


def train(
    corpus,
    net: NetConfig,
    cfg: TrainConfig,
    samples: Optional[list] = None,
    params: Optional[ModelParams] = None,
    progress_every: int = 0,
):
    """Train from a fresh initialization; returns ``(params, TrainLog)``.

    ``samples`` short-circuits augmentation when the caller already has them.
    Shuffling, initialization and batching all derive from ``cfg.seed``.
    """
    if samples is None:
        samples = make_samples(corpus, net, cfg)
    if not samples:
        raise ValueError("no training samples after augmentation")
    params = build(net, cfg.seed) if params is None else params
    optimizer = SGD(params, cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 1)
    log = TrainLog()
    order: list = []
    start = time.perf_counter()
    last_ok: Optional[LossReport] = None
    for it in range(cfg.iterations):
        batch = []
        while len(batch) < cfg.batch_size:
            if not order:
                order = list(rng.permutation(len(samples)))
            batch.append(samples[order.pop()])
        lr = lr_at(it, cfg)
        report = step(params, batch, net, optimizer, lr)
        if not math.isfinite(report.total):
            raise TrainingDiverged(it + 1, last_ok)
        last_ok = report
        log.history.append(report)
        log.lrs.append(lr)
        if progress_every and (it + 1) % progress_every == 0:
            logger.info("iter %d total %.4f fuse %.4f lr %g", it + 1, report.total, report.fuse, lr)
    params.zero_grad()
    log.wall_clock = time.perf_counter() - start
    log.checksum = params.checksum()
    return params, log


def evaluation_losses(params: ModelParams, net: NetConfig, samples: Sequence[TrainingSample]) -> LossReport:
    """Summed per-side / fuse losses over ``samples`` without touching gradients."""
    frozen = ModelParams({k: Tensor(v.data) for k, v in params.items()})
    return batch_loss(frozen, samples, net, backward=False)
