"""Central finite-difference check of every parameter kind of the full model."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .config import NetConfig
from .losses import total_objective
from .model import ModelParams, build, forward
from .tensor import Tensor, record_switches


@dataclass
class GradcheckResult:
    max_rel_error: float
    worst_param: str
    checked: int
    per_tensor: dict  # name -> (count, max rel error)
    seconds: float
    # entries whose +-step stencil crossed a ReLU / max-pool switch and was re-run smaller
    refined: int = 0
    loss: float = 0.0
    # entries where no step down to min_step kept the switch pattern fixed
    unresolved: int = 0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)``; the floor absorbs round-off on ~zero gradients."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def roundoff_floor(loss: float, step: float, tol: float = 1e-4, safety: float = 10.0) -> float:
    """Gradient magnitude below which central-difference round-off alone
    (``safety * eps * |loss| / step``) could exceed ``tol`` relative error."""
    return safety * np.finfo(np.float64).eps * max(abs(loss), 1.0) / step / tol


def randomized_params(config: NetConfig, seed: int) -> ModelParams:
    """A built model with every tensor (side projections and fusion included) made
    non-trivial, so gradients reach all layers."""
    params = build(config, seed)
    rng = np.random.default_rng(seed + 7919)
    for name, t in params.items():
        if name.startswith("side") and name.endswith(".weight"):
            t.data[...] = rng.normal(0.0, 1.0 / np.sqrt(t.data.shape[1]), size=t.shape)
        elif name.endswith(".bias"):
            t.data[...] = rng.normal(0.0, 0.1, size=t.shape)
        elif name == "fuse.weight":
            t.data[...] = rng.uniform(0.2, 1.0, size=t.shape)
    return params


def sample_indices(params: ModelParams, budget: int, rng: np.random.Generator) -> list:
    """``(name, flat_index)`` pairs: small tensors in full, the rest proportionally,
    at least one entry per tensor."""
    sizes = {k: t.data.size for k, t in params.items()}
    total = sum(sizes.values())
    if total <= budget:
        return [(k, i) for k in params for i in range(sizes[k])]
    picks = []
    small = {k: n for k, n in sizes.items() if n <= 64}
    remaining = budget - sum(small.values())
    large_total = total - sum(small.values())
    for k, n in sizes.items():
        if k in small:
            picks.extend((k, i) for i in range(n))
        else:
            count = max(1, int(round(remaining * n / large_total)))
            picks.extend((k, int(i)) for i in rng.choice(n, size=min(count, n), replace=False))
    return picks


def gradcheck(
    config: NetConfig,
    seed: int = 0,
    budget: int = 5000,
    step: float = 1e-4,
    image_shape: tuple = (34, 40),
    min_step: float = 1e-8,
) -> GradcheckResult:
    """Compare backprop gradients with central differences on a sampled parameter set.

    The model is piecewise smooth. When the ``+-step`` stencil changes any ReLU
    mask or max-pool selection relative to the unperturbed pass, the difference
    quotient straddles a kink, so the step is divided by 10 until the pattern
    holds (down to ``min_step``).
    """
    rng = np.random.default_rng(seed)
    params = randomized_params(config, seed)
    h, w = image_shape
    image = rng.uniform(0.0, 1.0, size=(1, config.input_channels, h, w))
    labels = (rng.random((h, w)) < 0.2).astype(np.uint8)
    labels[0, 0], labels[0, 1] = 1, 0

    def loss_of(p: ModelParams):
        maps = forward(p, config, image)
        return total_objective(
            maps.side_activations,
            maps.fused_activation,
            labels,
            config.alphas,
            deep_supervision=config.deep_supervision,
            balanced_fuse=config.balanced_fuse,
        )[0]

    start = time.perf_counter()
    params.zero_grad()
    loss_of(params).backward()
    analytic = {k: t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for k, t in params.items()}
    # same arrays, no graph recording
    plain = ModelParams({k: Tensor(t.data) for k, t in params.items()})

    with record_switches() as base:
        loss0 = float(loss_of(plain).data)
    base = list(base)

    def evaluate(flat, idx, value):
        flat[idx] = value
        with record_switches() as sw:
            out = float(loss_of(plain).data)
        same = len(sw) == len(base) and all(np.array_equal(a, b) for a, b in zip(sw, base))
        return out, same

    worst, worst_name = 0.0, ""
    per_tensor: dict = {}
    refined = unresolved = 0
    picks = sample_indices(params, budget, rng)
    for name, idx in picks:
        flat = params[name].data.reshape(-1)
        orig = flat[idx]
        h = step
        while True:
            up, same_up = evaluate(flat, idx, orig + h)
            down, same_down = evaluate(flat, idx, orig - h)
            flat[idx] = orig
            if same_up and same_down:
                break
            if h / 10.0 < min_step:
                unresolved += 1
                break
            h /= 10.0
        if h != step:
            refined += 1
        numeric = (up - down) / (2.0 * h)
        err = relative_error(float(analytic[name].reshape(-1)[idx]), numeric, roundoff_floor(loss0, h))
        count, prev = per_tensor.get(name, (0, 0.0))
        per_tensor[name] = (count + 1, max(prev, err))
        if err > worst:
            worst, worst_name = err, f"{name}[{idx}]"
    return GradcheckResult(worst, worst_name, len(picks), per_tensor, time.perf_counter() - start, refined, loss0, unresolved)
