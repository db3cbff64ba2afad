"""SE(3) pose algebra, relative-pose error metrics and trajectories.

Conventions
-----------
- Quaternions are (w, x, y, z), canonical sign w >= 0.
- A 4x4 rigid transform ``P`` maps camera coordinates to world coordinates.
- A relative pose between a reference frame A and a target frame B is
  ``P_A^-1 @ P_B``: the target camera expressed in the reference frame, so
  ``X_ref = R @ X_tgt + t``.
- Angles are radians internally and degrees at the reporting boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

UNIT_TOL = 1e-9
RIGID_TOL = 1e-6
KITTI_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)


class GeometryError(ValueError):
    pass


# ---------------------------------------------------------------- quaternions


def quat_normalize(q, fallback_identity=False):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-12:
        if fallback_identity:
            return np.array([1.0, 0.0, 0.0, 0.0])
        raise GeometryError("cannot normalize a zero quaternion")
    return q / n


def quat_canonical(q):
    q = np.asarray(q, dtype=np.float64)
    return -q if q[0] < 0 else q.copy()


def quat_to_rotmat(q):
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotmat_to_quat(R):
    """Shepperd's method; returns the canonical (w >= 0) quaternion."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    diag = np.diag(R)
    k = int(np.argmax([tr, *diag]))
    if k == 0:
        s = 2.0 * math.sqrt(max(1.0 + tr, 0.0))
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif k == 1:
        s = 2.0 * math.sqrt(max(1.0 + R[0, 0] - R[1, 1] - R[2, 2], 0.0))
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif k == 2:
        s = 2.0 * math.sqrt(max(1.0 + R[1, 1] - R[0, 0] - R[2, 2], 0.0))
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(max(1.0 + R[2, 2] - R[0, 0] - R[1, 1], 0.0))
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_canonical(quat_normalize(q))


def axis_angle_to_quat(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return quat_canonical(np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * axis]))


def rotation_angle(R):
    """Rotation angle of a rotation matrix in radians.

    cos from the trace, sin from the skew part; atan2 keeps full precision
    near the identity where arccos of the trace alone loses half the digits.
    """
    R = np.asarray(R)[:3, :3]
    c = 0.5 * (np.trace(R) - 1.0)
    s = 0.5 * math.hypot(R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1])
    return math.atan2(s, c)


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# ---------------------------------------------------------------- rigid transforms


def is_rigid(P, tol=RIGID_TOL):
    P = np.asarray(P)
    if P.shape != (4, 4):
        return False
    R = P[:3, :3]
    return (
        np.allclose(R.T @ R, np.eye(3), atol=tol)
        and abs(np.linalg.det(R) - 1.0) < tol
        and np.allclose(P[3], [0, 0, 0, 1], atol=tol)
    )


def _check_rigid(P, what="transform"):
    if not is_rigid(P):
        raise GeometryError(f"{what} is not a rigid 4x4 transform")


def make_transform(R, t):
    P = np.eye(4)
    P[:3, :3] = R
    P[:3, 3] = t
    return P


def invert_rigid(P):
    R, t = P[:3, :3], P[:3, 3]
    return make_transform(R.T, -R.T @ t)


def relative_pose(P_A, P_B):
    """``P_A^-1 @ P_B`` for rigid inputs."""
    _check_rigid(P_A, "P_A")
    _check_rigid(P_B, "P_B")
    return invert_rigid(P_A) @ P_B


@dataclass
class RelativePose:
    """Unit quaternion + translation. ``scale_mode`` is ``"unit"`` or ``"metric"``."""

    q: np.ndarray
    t: np.ndarray
    scale_mode: str = "metric"

    def __post_init__(self):
        self.q = quat_canonical(np.asarray(self.q, dtype=np.float64))
        self.t = np.asarray(self.t, dtype=np.float64)
        if self.scale_mode not in ("unit", "metric"):
            raise GeometryError(f"unknown scale_mode {self.scale_mode!r}")
        if abs(np.linalg.norm(self.q) - 1.0) > UNIT_TOL:
            raise GeometryError(f"quaternion not unit: |q|={np.linalg.norm(self.q)}")
        if self.scale_mode == "unit" and abs(np.linalg.norm(self.t) - 1.0) > UNIT_TOL:
            raise GeometryError(f"unit-scale translation has norm {np.linalg.norm(self.t)}")

    @classmethod
    def identity(cls, scale_mode="metric"):
        t = np.zeros(3) if scale_mode == "metric" else np.array([0.0, 0.0, 1.0])
        return cls(np.array([1.0, 0, 0, 0]), t, scale_mode)

    @classmethod
    def from_matrix(cls, P, scale_mode="metric"):
        P = np.asarray(P, dtype=np.float64)
        _check_rigid(P)
        t = P[:3, 3]
        if scale_mode == "unit":
            t = t / np.linalg.norm(t)
        return cls(rotmat_to_quat(P[:3, :3]), t, scale_mode)

    @property
    def R(self):
        return quat_to_rotmat(self.q)

    def matrix(self):
        return make_transform(self.R, self.t)

    def unit(self):
        """Translation-direction view (unit-norm t)."""
        n = np.linalg.norm(self.t)
        if n < 1e-12:
            raise GeometryError("zero translation has no direction")
        return RelativePose(self.q, self.t / n, "unit")

    def vector(self):
        return np.concatenate([self.q, self.t])


def essential_matrix(pose: RelativePose):
    """E with ``x_tgt^T E x_ref = 0`` for normalized homogeneous image points."""
    R_c = pose.R.T
    t_c = -R_c @ pose.t
    return skew(t_c) @ R_c


# ---------------------------------------------------------------- metrics


def demon_rot_error(q_gt, q_pred):
    """Angle arccos(|q_gt . q_pred|) in degrees; sign-of-representation free."""
    q_gt, q_pred = np.asarray(q_gt, float), np.asarray(q_pred, float)
    for name, q in (("q_gt", q_gt), ("q_pred", q_pred)):
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise GeometryError(f"{name} is not a unit quaternion")
    return math.degrees(_vector_angle(q_gt, q_pred, unsigned=True))


def demon_tran_error(t_gt, t_pred):
    """Angle between translation directions in degrees."""
    t_gt, t_pred = np.asarray(t_gt, float), np.asarray(t_pred, float)
    n1, n2 = np.linalg.norm(t_gt), np.linalg.norm(t_pred)
    if n1 < 1e-12 or n2 < 1e-12:
        raise GeometryError("zero-norm translation has no direction")
    return math.degrees(_vector_angle(t_gt, t_pred))


def _vector_angle(a, b, unsigned=False):
    """Angle between two vectors as atan2(|a ^ b|, a . b).

    Same value as arccos of the normalized dot product, but exact near zero,
    so identical inputs give exactly 0. ``unsigned`` uses |a . b|.
    """
    dot = float(a @ b)
    wedge = np.outer(a, b)
    sin = float(np.sqrt(np.sum(np.triu(wedge - wedge.T, 1) ** 2)))
    return math.atan2(sin, abs(dot) if unsigned else dot)


# ---------------------------------------------------------------- trajectories


@dataclass
class Trajectory:
    """Absolute camera-to-world poses, first pose identity by convention."""

    poses: np.ndarray
    path_lengths: np.ndarray = field(init=False)

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=np.float64).reshape(-1, 4, 4)
        for k, P in enumerate(self.poses):
            if not is_rigid(P):
                raise GeometryError(f"pose {k} is not rigid")
        steps = np.linalg.norm(np.diff(self.poses[:, :3, 3], axis=0), axis=1)
        self.path_lengths = np.concatenate([[0.0], np.cumsum(steps)])

    def __len__(self):
        return len(self.poses)

    def positions(self):
        return self.poses[:, :3, 3]


def accumulate_trajectory(relposes) -> Trajectory:
    """Chain metric relative poses: P_0 = I, P_k = P_{k-1} @ dP_k."""
    poses = [np.eye(4)]
    for k, rp in enumerate(relposes):
        if rp.scale_mode != "metric":
            raise GeometryError(f"relative pose {k} is unit-scale; trajectory needs metric poses")
        poses.append(poses[-1] @ rp.matrix())
    return Trajectory(np.stack(poses))


def kitti_pairwise_errors(gt: Trajectory, est: Trajectory):
    """RMSE of rotation (deg) and translation (m) of consecutive-pair errors."""
    if len(gt) != len(est):
        raise GeometryError(f"trajectory length mismatch: {len(gt)} vs {len(est)}")
    if len(gt) < 2:
        raise GeometryError("need at least two poses")
    rot, tran = [], []
    for i in range(len(gt) - 1):
        d_gt = invert_rigid(gt.poses[i]) @ gt.poses[i + 1]
        d_est = invert_rigid(est.poses[i]) @ est.poses[i + 1]
        E = invert_rigid(d_est) @ d_gt
        rot.append(math.degrees(rotation_angle(E)))
        tran.append(float(np.linalg.norm(E[:3, 3])))
    rot, tran = np.array(rot), np.array(tran)
    return float(np.sqrt(np.mean(rot**2))), float(np.sqrt(np.mean(tran**2)))


@dataclass
class DriftResult:
    t_rel: float
    r_rel: float
    used_lengths: list
    skipped_lengths: list
    n_segments: int


def drift_per_100m(gt: Trajectory, est: Trajectory, lengths=KITTI_LENGTHS, step=1) -> DriftResult:
    """Subsequence drift: t_rel in percent, r_rel in degrees per 100 m.

    For every start frame (every ``step``-th) and length ``L``, the segment
    ends at the first frame whose ground-truth path length is at least ``L``
    beyond the start. Errors are normalized by ``L`` and averaged over all
    segments.
    """
    if len(gt) != len(est):
        raise GeometryError(f"trajectory length mismatch: {len(gt)} vs {len(est)}")
    dist = gt.path_lengths
    t_errs, r_errs, used = [], [], set()
    inv_gt = [invert_rigid(P) for P in gt.poses]
    inv_est = [invert_rigid(P) for P in est.poses]
    for first in range(0, len(gt), step):
        for L in lengths:
            last = int(np.searchsorted(dist, dist[first] + L - 1e-9, side="left"))
            if last >= len(gt):
                continue
            d_gt = inv_gt[first] @ gt.poses[last]
            d_est = inv_est[first] @ est.poses[last]
            E = invert_rigid(d_est) @ d_gt
            t_errs.append(np.linalg.norm(E[:3, 3]) / L)
            r_errs.append(rotation_angle(E) / L)
            used.add(L)
    skipped = [L for L in lengths if L not in used]
    if not t_errs:
        raise GeometryError(
            f"path length {dist[-1]:.1f} m too short for drift; skipped lengths {skipped}"
        )
    return DriftResult(
        t_rel=100.0 * float(np.mean(t_errs)),
        r_rel=100.0 * math.degrees(float(np.mean(r_errs))),
        used_lengths=sorted(used),
        skipped_lengths=skipped,
        n_segments=len(t_errs),
    )


def save_trajectory(path, traj: Trajectory) -> None:
    """KITTI format: one line per frame, row-major 3x4 transform."""
    with open(path, "w", encoding="utf-8") as fh:
        for P in traj.poses:
            fh.write(" ".join(repr(float(v)) for v in P[:3, :].reshape(-1)) + "\n")


def load_trajectory(path) -> Trajectory:
    poses = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            vals = line.split()
            if len(vals) != 12:
                raise GeometryError(f"{path}:{lineno}: expected 12 floats, got {len(vals)}")
            try:
                row = np.array([float(v) for v in vals])
            except ValueError as exc:
                raise GeometryError(f"{path}:{lineno}: {exc}") from None
            P = np.eye(4)
            P[:3, :] = row.reshape(3, 4)
            poses.append(P)
    return Trajectory(np.stack(poses) if poses else np.zeros((0, 4, 4)))
