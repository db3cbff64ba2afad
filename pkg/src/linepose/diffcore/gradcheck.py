"""Central finite-difference audit of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import backward

NORM_FLOOR = 1e-6


@dataclass
class GroupResult:
    name: str
    size: int
    rel_error: float
    analytic_norm: float
    numeric_norm: float


def relative_error(analytic, numeric, floor=NORM_FLOOR):
    """||a - n|| / max(||a||, ||n||, floor)."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


def numeric_grad(loss_fn, tensor, h=1e-5):
    """Central differences of the scalar ``loss_fn()`` w.r.t. ``tensor.data``."""
    flat = tensor.data.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn().item()
        flat[i] = orig - h
        down = loss_fn().item()
        flat[i] = orig
        out[i] = (up - down) / (2 * h)
    return out.reshape(tensor.shape)


def check_gradients(loss_fn, named_params, h=1e-5):
    """Compare backward() against central differences for every parameter.

    ``loss_fn`` must rebuild the graph on each call.
    """
    named_params = list(named_params)
    for _, p in named_params:
        p.grad = None
    backward(loss_fn())
    results = []
    for name, p in named_params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_grad(loss_fn, p, h)
        results.append(
            GroupResult(
                name=name,
                size=p.data.size,
                rel_error=relative_error(analytic, numeric),
                analytic_norm=float(np.linalg.norm(analytic)),
                numeric_norm=float(np.linalg.norm(numeric)),
            )
        )
    return results
