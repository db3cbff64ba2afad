"""Stacked dual-graph layers.

Each layer updates the geometric graph (self-attention over all nodes, then
endpoint-to-endpoint message passing along each matched line) and then the
visual graph (self-attention, then cross-attention whose queries come from
the freshly updated geometric features). Every update is residual.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .diffcore import MLP, LayerNorm, Module, MultiHeadAttention, Tensor
from .diffcore import ops as T


@dataclass(frozen=True)
class Variant:
    """Ablation switches. ``lines`` adds endpoint nodes, ``line_update`` the
    endpoint message passing, ``visual`` the visual graph, ``weighted`` the
    sigmoid-weighted fusion (plain mean pooling otherwise)."""

    lines: bool = True
    line_update: bool = True
    visual: bool = True
    weighted: bool = True

    def validate(self):
        if self.line_update and not self.lines:
            raise ValueError("line_update requires lines")


VARIANTS = {
    "baseline": Variant(lines=False, line_update=False, visual=False, weighted=False),
    "+L": Variant(lines=True, line_update=False, visual=False, weighted=False),
    "+LP": Variant(lines=True, line_update=True, visual=False, weighted=False),
    "+V": Variant(lines=False, line_update=False, visual=True, weighted=False),
    "+V+W": Variant(lines=False, line_update=False, visual=True, weighted=True),
    "full": Variant(lines=True, line_update=True, visual=True, weighted=True),
}


def get_variant(name: str) -> Variant:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None


@dataclass
class GraphState:
    geo: Tensor  # (B, n, D)
    vis: Tensor | None  # (B, n, D)
    layer: int
    endpoint_rows: np.ndarray | None = None  # (B, 2 * n_lines)
    partner_rows: np.ndarray | None = None  # (B, 2 * n_lines)
    line_of_rows: np.ndarray | None = None  # (B, 2 * n_lines)
    line_codes: Tensor | None = None  # (B, n_lines, D)


class DualGraphLayer(Module):
    def __init__(self, width, heads, rng, variant: Variant, layer_norm=False):
        self.gcg_attn = MultiHeadAttention(width, heads, rng)
        self.f_g = MLP([2 * width, width, width], rng)
        self.f_l = MLP([3 * width, width, width], rng) if variant.line_update else None
        if variant.visual:
            self.ggvg_attn = MultiHeadAttention(width, heads, rng)
            self.f_v = MLP([2 * width, width, width], rng)
            self.cross_attn = MultiHeadAttention(width, heads, rng)
            self.f_guide = MLP([2 * width, width, width], rng)
        else:
            self.ggvg_attn = self.f_v = self.cross_attn = self.f_guide = None
        self.norm_geo = LayerNorm(width) if layer_norm else None
        self.norm_vis = LayerNorm(width) if layer_norm and variant.visual else None


def gcg_self_attention(state: GraphState, p: DualGraphLayer) -> Tensor:
    f = p.norm_geo(state.geo) if p.norm_geo else state.geo
    return state.geo + p.f_g(T.concat([f, p.gcg_attn(f)], axis=-1))


def gcg_line_update(state: GraphState, p: DualGraphLayer) -> Tensor:
    """Each endpoint adds F_L([self || partner || own line code]); P rows untouched."""
    if state.endpoint_rows is None or state.endpoint_rows.shape[-1] == 0:
        return state.geo
    f = state.geo
    own = T.gather_rows(f, state.endpoint_rows)
    partner = T.gather_rows(f, state.partner_rows)
    code = T.gather_rows(state.line_codes, state.line_of_rows)
    # one endpoint-edge neighbor per endpoint, so the neighbor mean is the single term
    upd = p.f_l(T.concat([own, partner, code], axis=-1))
    return T.scatter_add_rows(f, state.endpoint_rows, upd)


def ggvg_self_attention(state: GraphState, p: DualGraphLayer) -> Tensor:
    f = p.norm_vis(state.vis) if p.norm_vis else state.vis
    return state.vis + p.f_v(T.concat([f, p.ggvg_attn(f)], axis=-1))


def ggvg_cross_attention(state: GraphState, p: DualGraphLayer) -> Tensor:
    """Queries from the geometric graph, keys/values from the visual graph."""
    g = p.norm_geo(state.geo) if p.norm_geo else state.geo
    f = p.norm_vis(state.vis) if p.norm_vis else state.vis
    message = p.cross_attn(g, f)
    return state.vis + p.f_guide(T.concat([f, message], axis=-1))


def run_dual_graph(init: GraphState, layers, variant: Variant) -> GraphState:
    if variant.visual and init.vis is None:
        raise ValueError("visual graph enabled but no visual features were provided")
    if variant.line_update and init.line_codes is None:
        raise ValueError("line update enabled but no line codes were provided")
    state = init
    for p in layers:
        state = replace(state, geo=gcg_self_attention(state, p))
        if variant.line_update:
            state = replace(state, geo=gcg_line_update(state, p))
        if variant.visual:
            state = replace(state, vis=ggvg_self_attention(state, p))
            state = replace(state, vis=ggvg_cross_attention(state, p))
        state = replace(state, layer=state.layer + 1)
    return state
