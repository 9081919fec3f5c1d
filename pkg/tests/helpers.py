"""Shared test utilities: finite-difference gradients and tiny configs."""

import numpy as np
import torch

from modalseg.model import ModelConfig


def tiny_config(seed=0) -> ModelConfig:
    """Two-channel, two-class model small enough for exhaustive checks."""
    return ModelConfig(
        channels=2,
        classes=2,
        height=16,
        width=16,
        encoder_widths=(2, 3),
        bottleneck_width=3,
        seed=seed,
    )


def numerical_gradients(loss_fn, params, h=1e-5):
    """Central finite differences of a scalar loss w.r.t. each parameter."""
    grads = []
    with torch.no_grad():
        for p in params:
            grad = torch.zeros_like(p)
            flat, grad_flat = p.view(-1), grad.view(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + h
                up = float(loss_fn())
                flat[i] = original - h
                down = float(loss_fn())
                flat[i] = original
                grad_flat[i] = (up - down) / (2.0 * h)
            grads.append(grad)
    return grads


def max_gradient_error(analytic, numeric, scale_floor=1e-5):
    """Worst relative disagreement between gradient lists.

    Entries whose magnitude sits below ``scale_floor`` are compared against
    the floor instead, which turns the relative bound into an absolute one
    right where central differences stop resolving relative error.
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = torch.zeros_like(n) if a is None else a
        diff = (a - n).abs()
        scale = torch.maximum(a.abs(), n.abs()).clamp(min=scale_floor)
        worst = max(worst, float((diff / scale).max()))
    return worst


def analytic_gradients(loss_fn, params):
    """Autograd gradients of ``loss_fn()`` for each parameter (None if unused)."""
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    loss.backward()
    return [None if p.grad is None else p.grad.detach().clone() for p in params]


def random_input(config, rng: np.random.Generator, batch=1, dtype=torch.float64):
    """Batch of normalized-range images matching a model config."""
    shape = (batch, config.channels, config.height, config.width)
    return torch.from_numpy(rng.uniform(-1.0, 1.0, size=shape)).to(dtype)
