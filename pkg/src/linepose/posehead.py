"""Feature-weighted fusion, pose / log-variance heads and the uncertainty loss."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .diffcore import MLP, Linear, Module, Tensor
from .diffcore import ops as T
from .dualgraph import GraphState
from .geometry import RelativePose, quat_canonical

log = logging.getLogger(__name__)

LOGVAR_CLAMP = 10.0


class FusionHead(Module):
    def __init__(self, width, rng, visual=True, weighted=True):
        self.visual = visual
        self.weighted = weighted
        self.score_geo = Linear(width, 1, rng) if weighted else None
        self.score_vis = Linear(width, 1, rng) if weighted and visual else None
        fused = 2 * width if visual else width
        self.pose = MLP([fused, width, 7], rng)
        self.logvar = MLP([fused, width, 7], rng)


def _pool(f: Tensor, score: Linear | None) -> Tensor:
    if f.shape[-2] == 0:
        raise ValueError("cannot pool an empty node set")
    if score is None:
        return T.mean(f, axis=-2)
    w = T.sigmoid(score(f))  # (B, n, 1)
    return T.sum(w * f, axis=-2) / T.sum(w, axis=-2)


def weighted_fusion(state: GraphState, head: FusionHead) -> Tensor:
    """Per graph, sigmoid(a . f_i + b)-weighted mean of node features; concatenated."""
    pooled = [_pool(state.geo, head.score_geo)]
    if head.visual:
        pooled.append(_pool(state.vis, head.score_vis))
    return pooled[0] if len(pooled) == 1 else T.concat(pooled, axis=-1)


@dataclass
class PosePrediction:
    mu: np.ndarray  # (7,) raw quaternion + translation
    log_var: np.ndarray  # (7,)
    scale_mode: str = "unit"

    @property
    def variance(self):
        return np.exp(self.log_var)

    def pose(self) -> RelativePose:
        q = self.mu[:4]
        n = np.linalg.norm(q)
        if n < 1e-12:
            log.warning("degenerate quaternion output; using identity rotation")
            q = np.array([1.0, 0.0, 0.0, 0.0])
        else:
            q = q / n
        t = self.mu[4:]
        if self.scale_mode == "unit":
            tn = np.linalg.norm(t)
            if tn < 1e-12:
                log.warning("degenerate translation output; using +z direction")
                t = np.array([0.0, 0.0, 1.0])
            else:
                t = t / tn
        return RelativePose(quat_canonical(q), t, self.scale_mode)


def predict(fused: Tensor, head: FusionHead):
    """Return ``(mu, log_var)`` tensors of shape ``(B, 7)``."""
    return head.pose(fused), head.logvar(fused)


def target_vectors(gts, mu: np.ndarray, scale_mode: str):
    """Ground-truth 7-vectors with each quaternion sign-aligned to the prediction."""
    out = np.empty((len(gts), 7))
    for i, gt in enumerate(gts):
        if gt is None:
            raise ValueError("ground truth pose missing for a training sample")
        q = gt.q if float(gt.q @ mu[i, :4]) >= 0 else -gt.q
        t = gt.t
        if scale_mode == "unit":
            t = t / np.linalg.norm(t)
        out[i, :4] = q
        out[i, 4:] = t
    return out


def uncertainty_loss(mu: Tensor, log_var: Tensor, theta) -> Tensor:
    """Batch mean of sum_c [s_c + (theta_c - mu_c)^2 exp(-s_c)], s clamped to +-10."""
    s = T.clip(log_var, -LOGVAR_CLAMP, LOGVAR_CLAMP)
    r = Tensor(theta) - mu
    per_sample = T.sum(s + r * r * T.exp(-s), axis=-1)
    return T.mean(per_sample)


def optimal_logvar_property_check(residual: float) -> float:
    """argmin_s [s + r^2 exp(-s)] = ln(r^2); ``-inf`` when r == 0."""
    r2 = float(residual) ** 2
    if r2 == 0.0:
        return -math.inf
    return math.log(r2)
