"""End-to-end pose network: encoders -> dual graph -> fusion -> heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .datagen.matchset import resample_matches
from .diffcore import Module, Tensor, load_checkpoint, no_grad, save_checkpoint
from .dualgraph import DualGraphLayer, GraphState, get_variant, run_dual_graph
from .encoders import Encoders, build_nodeset, encode_lse, encode_pe, encode_sce, node_appearance
from .posehead import FusionHead, PosePrediction, predict, target_vectors, uncertainty_loss, weighted_fusion

CHECKPOINT_FORMAT = "linepose-model"


@dataclass(frozen=True)
class ModelConfig:
    width: int = 128
    depth: int = 4
    heads: int = 4
    variant: str = "full"
    layer_norm: bool = False
    scale_mode: str = "unit"
    init_seed: int = 0

    def validate(self):
        if self.width <= 0 or self.depth < 0 or self.heads <= 0:
            raise ValueError("width and heads must be positive, depth non-negative")
        if self.width % self.heads:
            raise ValueError(f"heads={self.heads} must divide width={self.width}")
        if self.scale_mode not in ("unit", "metric"):
            raise ValueError(f"scale_mode must be 'unit' or 'metric', got {self.scale_mode!r}")
        get_variant(self.variant).validate()


@dataclass
class Batch:
    coords: np.ndarray  # (B, n, 4)
    appearance: np.ndarray | None  # (B, n, 6)
    line_inputs: np.ndarray | None  # (B, n_lines, 8)
    endpoint_rows: np.ndarray | None  # (B, 2 * n_lines)
    partner_rows: np.ndarray | None
    line_of_rows: np.ndarray | None
    gts: list

    def __len__(self):
        return len(self.coords)


def make_batch(matchsets, config: ModelConfig, n_points=None, n_lines=None, seeds=None) -> Batch:
    """Resample (when counts are given), build nodes and stack a batch.

    Without counts the match sets must already agree in size.
    """
    variant = get_variant(config.variant)
    nodesets, apps = [], []
    for i, m in enumerate(matchsets):
        if n_points is not None:
            seed = None if seeds is None else seeds[i]
            m = resample_matches(m, n_points, n_lines if variant.lines else 0, seed)
        nodes = build_nodeset(m, include_lines=variant.lines)
        nodesets.append(nodes)
        if variant.visual:
            apps.append(node_appearance(nodes, m))
    sizes = {(ns.n, len(ns.line_inputs)) for ns in nodesets}
    if len(sizes) > 1:
        raise ValueError(f"match sets disagree in node/line counts: {sorted(sizes)}")
    ep = np.stack([ns.endpoint_rows for ns in nodesets])
    has_lines = variant.lines and ep.shape[1] > 0
    return Batch(
        coords=np.stack([ns.coords for ns in nodesets]),
        appearance=np.stack(apps) if variant.visual else None,
        line_inputs=np.stack([ns.line_inputs for ns in nodesets]) if has_lines else None,
        endpoint_rows=ep if has_lines else None,
        partner_rows=np.stack([ns.partner[ns.endpoint_rows] for ns in nodesets]) if has_lines else None,
        line_of_rows=np.stack([ns.line_id[ns.endpoint_rows] for ns in nodesets]) if has_lines else None,
        gts=[m.gt for m in matchsets],
    )


class PoseModel(Module):
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.variant = get_variant(config.variant)
        rng = np.random.default_rng(config.init_seed)
        v = self.variant
        # line codes are read only by the endpoint update
        self.encoders = Encoders(config.width, rng, lines=v.line_update, visual=v.visual)
        self.layers = [
            DualGraphLayer(config.width, config.heads, rng, v, config.layer_norm)
            for _ in range(config.depth)
        ]
        self.head = FusionHead(config.width, rng, visual=v.visual, weighted=v.weighted)

    def encode(self, batch: Batch) -> GraphState:
        enc = self.encoders
        geo = encode_sce(batch.coords, enc.sce)
        vis = encode_pe(batch.appearance, enc.pe) if self.variant.visual else None
        codes = None
        if batch.line_inputs is not None and enc.lse is not None:
            codes = encode_lse(batch.line_inputs, enc.lse)
        return GraphState(
            geo=geo,
            vis=vis,
            layer=0,
            endpoint_rows=batch.endpoint_rows,
            partner_rows=batch.partner_rows,
            line_of_rows=batch.line_of_rows,
            line_codes=codes,
        )

    def graph(self, batch: Batch) -> GraphState:
        state = self.encode(batch)
        variant = self.variant
        if variant.line_update and state.line_codes is None:
            # no lines in this batch: line message passing has nothing to do
            variant = replace(variant, line_update=False)
        return run_dual_graph(state, self.layers, variant)

    def forward(self, batch: Batch):
        """Return ``(mu, log_var)`` tensors of shape ``(B, 7)``."""
        state = self.graph(batch)
        mu, log_var = predict(weighted_fusion(state, self.head), self.head)
        if not (np.isfinite(mu.data).all() and np.isfinite(log_var.data).all()):
            raise FloatingPointError("non-finite model output")
        return mu, log_var

    def loss(self, batch: Batch, learn_variance=True):
        """Uncertainty loss; with ``learn_variance=False`` every variance is fixed at 1."""
        mu, log_var = self.forward(batch)
        theta = target_vectors(batch.gts, mu.data, self.config.scale_mode)
        if not learn_variance:
            log_var = Tensor(np.zeros(log_var.shape))
        return uncertainty_loss(mu, log_var, theta)

    def predict(self, batch: Batch):
        with no_grad():
            mu, log_var = self.forward(batch)
        mode = self.config.scale_mode
        return [PosePrediction(mu.data[i].copy(), log_var.data[i].copy(), mode) for i in range(len(batch))]

    def predict_matchsets(self, matchsets, n_points=None, n_lines=None, seed=0, batch_size=16):
        out = []
        for start in range(0, len(matchsets), batch_size):
            chunk = matchsets[start : start + batch_size]
            seeds = [[seed, start + i] for i in range(len(chunk))]
            out.extend(self.predict(make_batch(chunk, self.config, n_points, n_lines, seeds)))
        return out

    def header(self, extra=None):
        h = {"format": CHECKPOINT_FORMAT, "model": asdict(self.config)}
        if extra:
            h.update(extra)
        return h

    def save(self, path, extra=None):
        save_checkpoint(path, self.state_dict(), self.header(extra))

    @classmethod
    def load(cls, path):
        params, header = load_checkpoint(path)
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a model checkpoint")
        model = cls(ModelConfig(**header["model"]))
        model.load_state_dict(params)
        return model, header
