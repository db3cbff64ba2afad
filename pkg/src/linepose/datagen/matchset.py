"""Match sets, appearance sources and match resampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import RelativePose

# column layout
POINT_COLS = ("x_r", "y_r", "x_t", "y_t")
LINE_COLS = ("x_rL", "y_rL", "x2_rL", "y2_rL", "x_tL", "y_tL", "x2_tL", "y2_tL")
CHANNELS = 3
REF, TGT = 0, 1


class AppearanceError(ValueError):
    pass


def bilinear(grid, x, y):
    """Sample an (H, W, C) grid at continuous (x, y); clamps to the grid."""
    H, W = grid.shape[:2]
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, W - 1)
    y = np.clip(np.asarray(y, dtype=np.float64), 0.0, H - 1)
    x0 = np.minimum(np.floor(x).astype(int), W - 2) if W > 1 else np.zeros_like(x, int)
    y0 = np.minimum(np.floor(y).astype(int), H - 2) if H > 1 else np.zeros_like(y, int)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    g = grid.astype(np.float64)
    top = g[y0, x0] * (1 - fx) + g[y0, x1] * fx
    bot = g[y1, x0] * (1 - fx) + g[y1, x1] * fx
    return top * (1 - fy) + bot * fy


@dataclass
class GridAppearance:
    """Per-view (H, W, C) appearance grids, pixel (x, y) stored at grid[y, x]."""

    grids: np.ndarray  # (2, H, W, C)

    def __post_init__(self):
        g = np.asarray(self.grids)
        if g.ndim == 3:  # grayscale pair
            g = g[..., None]
        if g.ndim != 4 or g.shape[0] != 2:
            raise AppearanceError(f"appearance grids must be (2, H, W, C), got {g.shape}")
        if g.shape[-1] == 1:
            g = np.repeat(g, CHANNELS, axis=-1)
        self.grids = g

    @property
    def size(self):
        return self.grids.shape[2], self.grids.shape[1]

    def sample(self, x, y, view):
        return bilinear(self.grids[view], x, y)


@dataclass
class MatchSet:
    """Matched points ``(N, 4)`` and line segments ``(M, 8)`` in pixels.

    Point rows are ``[x_r, y_r, x_t, y_t]``; line rows are the two reference
    endpoints followed by the two target endpoints, first endpoint
    corresponding to first endpoint.
    """

    points: np.ndarray
    lines: np.ndarray
    image_size: tuple
    appearance: object = None
    gt: RelativePose | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        self.lines = np.asarray(self.lines, dtype=np.float64).reshape(-1, 8)
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        if isinstance(self.appearance, GridAppearance) and self.appearance.size != self.image_size:
            raise AppearanceError(
                f"grid size {self.appearance.size} does not match image size {self.image_size}"
            )

    @property
    def n_points(self):
        return len(self.points)

    @property
    def n_lines(self):
        return len(self.lines)


def sample_appearance(m: MatchSet, x, y, which_view):
    """C-channel appearance at continuous pixel coordinates in one view."""
    if m.appearance is None:
        raise AppearanceError("match set has no appearance source")
    return m.appearance.sample(np.asarray(x, float), np.asarray(y, float), which_view)


def resample_indices(n_in: int, n_out: int, rng: np.random.Generator):
    """Indices of ``n_out`` draws from ``n_in`` items by repetition or deletion.

    Short inputs are tiled whole and topped up with a random subset, so every
    input appears when ``n_out >= n_in``. Long inputs lose a random subset.
    The result is shuffled.
    """
    if n_out == 0:
        return np.zeros(0, dtype=np.intp)
    if n_in == 0:
        raise ValueError(f"cannot resample 0 items to {n_out}")
    reps, extra = divmod(n_out, n_in)
    idx = np.concatenate(
        [np.tile(np.arange(n_in), reps), rng.choice(n_in, size=extra, replace=False)]
    )
    return rng.permutation(idx).astype(np.intp)


def resample_matches(m: MatchSet, n_pts: int, n_lines: int, seed) -> MatchSet:
    rng = np.random.default_rng(seed)
    if n_pts > 0 and m.n_points == 0:
        raise ValueError("match set has no points to resample")
    if n_lines > 0 and m.n_lines == 0:
        raise ValueError("match set has no lines to resample")
    pi = resample_indices(m.n_points, n_pts, rng)
    li = resample_indices(m.n_lines, n_lines, rng)
    meta = dict(m.meta)
    meta["point_index"] = pi
    meta["line_index"] = li
    return MatchSet(m.points[pi], m.lines[li], m.image_size, m.appearance, m.gt, meta)
