"""Trajectory plots (self-contained SVG) and per-pair CSV series."""

from __future__ import annotations

import csv
import io
import math

import numpy as np

from .geometry import Trajectory, invert_rigid, rotation_angle

SVG_SIZE = 480
MARGIN = 30


def pair_errors_csv(gt: Trajectory, est: Trajectory) -> str:
    """One row per consecutive pair: relative-pose error and both positions."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pair", "rot_err_deg", "tran_err_m", "gt_x", "gt_y", "gt_z", "est_x", "est_y", "est_z"])
    for i in range(len(gt) - 1):
        d_gt = invert_rigid(gt.poses[i]) @ gt.poses[i + 1]
        d_est = invert_rigid(est.poses[i]) @ est.poses[i + 1]
        E = invert_rigid(d_est) @ d_gt
        g, e = gt.poses[i + 1, :3, 3], est.poses[i + 1, :3, 3]
        w.writerow(
            [i, repr(math.degrees(rotation_angle(E))), repr(float(np.linalg.norm(E[:3, 3])))]
            + [repr(float(v)) for v in g]
            + [repr(float(v)) for v in e]
        )
    return buf.getvalue()


def _polyline(xy, scale, ox, oy, color, width):
    pts = " ".join(f"{MARGIN + (x - ox) * scale:.3f},{SVG_SIZE - MARGIN - (y - oy) * scale:.3f}" for x, y in xy)
    return f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"/>'


def trajectory_svg(gt: Trajectory, est: Trajectory) -> str:
    """Top-down (x, z) view of ground truth and estimated camera paths."""
    paths = [gt.positions()[:, [0, 2]], est.positions()[:, [0, 2]]]
    allxy = np.concatenate(paths)
    lo, hi = allxy.min(axis=0), allxy.max(axis=0)
    span = max(float((hi - lo).max()), 1e-9)
    scale = (SVG_SIZE - 2 * MARGIN) / span
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" height="{SVG_SIZE}" '
        f'viewBox="0 0 {SVG_SIZE} {SVG_SIZE}">',
        '<rect width="100%" height="100%" fill="white"/>',
        _polyline(paths[0], scale, lo[0], lo[1], "black", 2),
        _polyline(paths[1], scale, lo[0], lo[1], "crimson", 1.5),
        '<text x="10" y="18" font-family="sans-serif" font-size="12" fill="black">ground truth</text>',
        '<text x="100" y="18" font-family="sans-serif" font-size="12" fill="crimson">estimate</text>',
        f'<text x="10" y="{SVG_SIZE - 8}" font-family="sans-serif" font-size="10">x (m) vs z (m), '
        f"extent {span:.2f} m</text>",
        "</svg>",
    ]
    return "\n".join(parts) + "\n"
