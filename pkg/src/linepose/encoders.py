"""Node construction and the three feature encoders.

Nodes are the matched points (kind P) followed by the two endpoints of every
matched line (kind L), endpoints of one line stored consecutively. Encoders
see normalized coordinates::

    u = (2x - W) / max(W, H),   v = (2y - H) / max(W, H)

and endpoint differences scaled by 2 / max(W, H).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen.matchset import REF, TGT, MatchSet, sample_appearance
from .diffcore import MLP, Module, Tensor

KIND_P, KIND_L = 0, 1


@dataclass
class NodeSet:
    coords: np.ndarray  # (n, 4) normalized [u_r, v_r, u_t, v_t]
    pixels: np.ndarray  # (n, 4) raw pixel coordinates
    kind: np.ndarray  # (n,)
    line_id: np.ndarray  # (n,), -1 for P nodes
    partner: np.ndarray  # (n,), -1 for P nodes
    line_inputs: np.ndarray  # (n_lines, 8)
    image_size: tuple

    @property
    def n(self):
        return len(self.kind)

    @property
    def endpoint_rows(self):
        return np.flatnonzero(self.kind == KIND_L)

    def permute(self, perm):
        """Reorder nodes: new row i is old row ``perm[i]``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        partner = np.where(self.partner[perm] >= 0, inv[np.maximum(self.partner[perm], 0)], -1)
        return NodeSet(
            self.coords[perm],
            self.pixels[perm],
            self.kind[perm],
            self.line_id[perm],
            partner,
            self.line_inputs,
            self.image_size,
        )


def normalize_xy(xy, image_size):
    W, H = image_size
    s = max(W, H)
    out = np.array(xy, dtype=np.float64, copy=True)
    out[..., 0::2] = (2.0 * out[..., 0::2] - W) / s
    out[..., 1::2] = (2.0 * out[..., 1::2] - H) / s
    return out


def line_inputs(lines, image_size):
    """LSE input rows ``[x_r, y_r, dx_r, dy_r, x_t, y_t, dx_t, dy_t]`` (normalized)."""
    lines = np.asarray(lines, dtype=np.float64).reshape(-1, 8)
    scale = 2.0 / max(image_size)
    first_r = normalize_xy(lines[:, 0:2], image_size)
    first_t = normalize_xy(lines[:, 4:6], image_size)
    d_r = (lines[:, 2:4] - lines[:, 0:2]) * scale
    d_t = (lines[:, 6:8] - lines[:, 4:6]) * scale
    return np.concatenate([first_r, d_r, first_t, d_t], axis=1)


def build_nodeset(m: MatchSet, include_lines: bool = True) -> NodeSet:
    n_p = m.n_points
    n_l = m.n_lines if include_lines else 0
    lines = m.lines[:n_l]
    ends = np.empty((2 * n_l, 4))
    ends[0::2] = lines[:, [0, 1, 4, 5]]
    ends[1::2] = lines[:, [2, 3, 6, 7]]
    pixels = np.concatenate([m.points, ends])
    kind = np.concatenate([np.full(n_p, KIND_P), np.full(2 * n_l, KIND_L)]).astype(np.int8)
    line_id = np.concatenate([np.full(n_p, -1), np.repeat(np.arange(n_l), 2)])
    partner = np.concatenate([np.full(n_p, -1), n_p + (np.arange(2 * n_l) ^ 1)])
    return NodeSet(
        coords=normalize_xy(pixels, m.image_size),
        pixels=pixels,
        kind=kind,
        line_id=line_id.astype(np.intp),
        partner=partner.astype(np.intp),
        line_inputs=line_inputs(lines, m.image_size),
        image_size=m.image_size,
    )


def node_appearance(nodes: NodeSet, m: MatchSet):
    """``(n, 2C)`` pixel samples ``[pixel_ref(x_r, y_r) || pixel_tgt(x_t, y_t)]``."""
    ref = sample_appearance(m, nodes.pixels[:, 0], nodes.pixels[:, 1], REF)
    tgt = sample_appearance(m, nodes.pixels[:, 2], nodes.pixels[:, 3], TGT)
    return np.concatenate([ref, tgt], axis=1)


class Encoders(Module):
    """SCE (shared by P and L nodes), LSE and PE, each input -> D -> D."""

    def __init__(self, width, rng, lines=True, visual=True):
        self.sce = MLP([4, width, width], rng)
        self.lse = MLP([8, width, width], rng) if lines else None
        self.pe = MLP([6, width, width], rng) if visual else None


def encode_sce(coords, mlp: MLP):
    return mlp(Tensor(coords))


def encode_lse(inputs, mlp: MLP):
    return mlp(Tensor(inputs))


def encode_pe(pixel_values, mlp: MLP):
    return mlp(Tensor(pixel_values))


@dataclass
class InitialFeatures:
    geo: Tensor  # (B, n, D)
    vis: Tensor | None  # (B, n, D)
    line_codes: Tensor | None  # (B, n_lines, D)
