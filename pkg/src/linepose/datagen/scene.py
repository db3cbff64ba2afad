"""Synthetic two-view scenes with exact ground truth.

The world is the inside of an axis-aligned box whose walls carry a smooth
procedural texture. Cameras sit inside the box, so every wall point in the
field of view is visible (a convex room has no occlusion), which makes ray
casting the whole renderer. Point matches are projections of wall points;
line matches are projections of wall segments.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..geometry import RelativePose, axis_angle_to_quat, invert_rigid, make_transform, quat_to_rotmat
from .matchset import CHANNELS, GridAppearance, MatchSet

MIN_LINE_PX = 2.0


class SceneError(RuntimeError):
    pass


@dataclass
class SceneParams:
    n_points: int = 512
    n_lines: int = 128
    image_size: tuple = (256, 192)
    focal_scale: float = 0.9
    depth_range: tuple = (2.0, 12.0)
    baseline_range: tuple = (0.2, 1.0)
    rotation_range_deg: tuple = (0.0, 15.0)
    line_length_range: tuple = (0.3, 2.5)
    pixel_noise: float = 0.0
    outlier_fraction: float = 0.0
    endpoint_slide: float = 0.0
    appearance_noise: float = 0.0
    max_retries: int = 50

    def validate(self):
        for name in ("depth_range", "baseline_range", "rotation_range_deg", "line_length_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} is empty: {lo} > {hi}")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError(f"outlier_fraction must be in [0, 1), got {self.outlier_fraction}")
        if self.n_points < 0 or self.n_lines < 0:
            raise ValueError("counts must be >= 0")
        if self.depth_range[0] <= 0:
            raise ValueError("depth range must be positive")

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)


def intrinsics(image_size, focal_scale):
    W, H = image_size
    f = focal_scale * W
    return np.array([[f, 0.0, W / 2.0], [0.0, f, H / 2.0], [0.0, 0.0, 1.0]])


@dataclass
class Texture:
    """c(X) = 0.5 + sum_k amp[k] * sin(freq[k] . X + phase[k]), per channel."""

    freqs: np.ndarray  # (K, 3)
    phases: np.ndarray  # (K,)
    amps: np.ndarray  # (K, C)

    @classmethod
    def random(cls, rng, k=6):
        dirs = rng.normal(size=(k, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        freqs = dirs * rng.uniform(0.5, 3.0, size=(k, 1))
        amps = rng.uniform(0.2, 1.0, size=(k, CHANNELS))
        amps *= 0.45 / amps.sum(axis=0, keepdims=True)
        return cls(freqs, rng.uniform(0, 2 * np.pi, size=k), amps)

    def __call__(self, X):
        return 0.5 + np.sin(X @ self.freqs.T + self.phases) @ self.amps


@dataclass
class ProceduralAppearance:
    """Ray-cast appearance oracle for a box world seen by two cameras.

    ``noise_amp`` adds a smooth per-view field in image coordinates, so
    the same 3-D point looks slightly different in each view.
    """

    box_lo: np.ndarray
    box_hi: np.ndarray
    cameras: np.ndarray  # (2, 4, 4) camera-to-world
    K: np.ndarray
    texture: Texture
    image_size: tuple
    noise_amp: float = 0.0
    noise_freqs: np.ndarray = field(default_factory=lambda: np.zeros((2, 4, 2)))
    noise_phases: np.ndarray = field(default_factory=lambda: np.zeros((2, 4, CHANNELS)))

    def backproject(self, x, y, view):
        """World points hit by the pixel rays, and their camera depths."""
        P = self.cameras[view]
        rays = np.stack([x, y, np.ones_like(x)], axis=-1) @ np.linalg.inv(self.K).T
        return cast_rays(P, rays, self.box_lo, self.box_hi)

    def sample(self, x, y, view):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        X, _ = self.backproject(x, y, view)
        c = self.texture(X)
        if self.noise_amp:
            uv = np.stack([x, y], axis=-1)
            arg = uv @ self.noise_freqs[view].T  # (..., 4)
            c = c + self.noise_amp * np.sin(arg[..., :, None] + self.noise_phases[view]).mean(axis=-2)
        return c

    def render(self) -> GridAppearance:
        W, H = self.image_size
        ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
        grids = np.stack([self.sample(xs, ys, v) for v in (0, 1)])
        return GridAppearance(grids.astype(np.float32))

    def to_dict(self):
        return {
            "box_lo": self.box_lo.tolist(),
            "box_hi": self.box_hi.tolist(),
            "cameras": self.cameras.tolist(),
            "K": self.K.tolist(),
            "texture": {
                "freqs": self.texture.freqs.tolist(),
                "phases": self.texture.phases.tolist(),
                "amps": self.texture.amps.tolist(),
            },
            "image_size": list(self.image_size),
            "noise_amp": self.noise_amp,
            "noise_freqs": self.noise_freqs.tolist(),
            "noise_phases": self.noise_phases.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        a = np.asarray
        tex = d["texture"]
        return cls(
            box_lo=a(d["box_lo"], float),
            box_hi=a(d["box_hi"], float),
            cameras=a(d["cameras"], float),
            K=a(d["K"], float),
            texture=Texture(a(tex["freqs"], float), a(tex["phases"], float), a(tex["amps"], float)),
            image_size=tuple(d["image_size"]),
            noise_amp=float(d["noise_amp"]),
            noise_freqs=a(d["noise_freqs"], float),
            noise_phases=a(d["noise_phases"], float),
        )


def cast_rays(P, rays_cam, lo, hi):
    """Exit points of camera rays from inside the box ``[lo, hi]``.

    ``rays_cam`` have unit z in camera coordinates, so the ray parameter at
    the hit is the camera depth.
    """
    R, c = P[:3, :3], P[:3, 3]
    d = rays_cam @ R.T
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = np.where(d > 0, hi, lo)
        s = np.where(d != 0, (bound - c) / d, np.inf)
    depth = s.min(axis=-1)
    return c + depth[..., None] * d, depth


def project(P, K, X):
    """Pixels and depths of world points ``X`` in the camera ``P``."""
    Xc = (X - P[:3, 3]) @ P[:3, :3]
    z = Xc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = (Xc @ K.T)[..., :2] / z[..., None]
    return uv, z


@dataclass
class SceneSample:
    world_points: np.ndarray
    world_segments: np.ndarray  # (M, 2, 3)
    K: np.ndarray
    cameras: np.ndarray  # (2, 4, 4) camera-to-world
    matches: MatchSet
    gt: RelativePose
    params: SceneParams
    point_inlier: np.ndarray
    line_inlier: np.ndarray
    seed: object = None


def _in_image(uv, W, H):
    return (uv[..., 0] >= 0) & (uv[..., 0] <= W - 1) & (uv[..., 1] >= 0) & (uv[..., 1] <= H - 1)


def _random_rotation(rng, lo_deg, hi_deg):
    axis = rng.normal(size=3)
    angle = math.radians(rng.uniform(lo_deg, hi_deg))
    return quat_to_rotmat(axis_angle_to_quat(axis, angle))


def _sample_points(rng, world, n, params, depth_range):
    """Wall points visible in both views, with pixel coordinates."""
    W, H = params.image_size
    K = world.K
    pts, tries = [], 0
    need = n
    while need > 0:
        if tries >= params.max_retries:
            raise SceneError(f"could only place {n - need}/{n} points after {tries} rounds")
        tries += 1
        m = max(4 * need, 64)
        x = rng.uniform(0, W - 1, m)
        y = rng.uniform(0, H - 1, m)
        X, depth = world.backproject(x, y, 0)
        uv_t, z_t = project(world.cameras[1], K, X)
        ok = (
            (depth >= depth_range[0])
            & (depth <= depth_range[1])
            & (z_t > 0.1)
            & _in_image(uv_t, W, H)
        )
        X = X[ok][:need]
        pts.append(X)
        need -= len(X)
    return np.concatenate(pts) if pts else np.zeros((0, 3))


def _sample_segments(rng, world, n, params, depth_range):
    W, H = params.image_size
    K = world.K
    segs, tries, need = [], 0, n
    lo, hi = world.box_lo, world.box_hi
    while need > 0:
        if tries >= params.max_retries:
            raise SceneError(f"could only place {n - need}/{n} line segments after {tries} rounds")
        tries += 1
        X1 = _sample_points(rng, world, max(4 * need, 32), params, depth_range)
        # wall each start point lies on: axis whose bound is closest
        gap = np.minimum(np.abs(X1 - lo), np.abs(X1 - hi))
        normal_axis = gap.argmin(axis=1)
        ang = rng.uniform(0, 2 * np.pi, len(X1))
        length = rng.uniform(*params.line_length_range, len(X1))
        tang = np.zeros_like(X1)
        for i, ax in enumerate(normal_axis):
            a, b = [k for k in range(3) if k != ax]
            tang[i, a] = math.cos(ang[i])
            tang[i, b] = math.sin(ang[i])
        X2 = X1 + length[:, None] * tang
        X2[np.arange(len(X1)), normal_axis] = X1[np.arange(len(X1)), normal_axis]
        ok = np.all((X2 >= lo - 1e-12) & (X2 <= hi + 1e-12), axis=1)
        for view in (0, 1):
            u1, z1 = project(world.cameras[view], K, X1)
            u2, z2 = project(world.cameras[view], K, X2)
            ok &= (z1 > 0.1) & (z2 > 0.1) & _in_image(u1, W, H) & _in_image(u2, W, H)
            ok &= np.linalg.norm(u2 - u1, axis=-1) >= MIN_LINE_PX
        seg = np.stack([X1[ok], X2[ok]], axis=1)[:need]
        segs.append(seg)
        need -= len(seg)
    return np.concatenate(segs) if segs else np.zeros((0, 2, 3))


def _noise_fields(rng, amp):
    freqs = rng.normal(scale=0.05, size=(2, 4, 2))
    phases = rng.uniform(0, 2 * np.pi, size=(2, 4, CHANNELS))
    return amp, freqs, phases


def _render_pair(rng, world, params, depth_range, gt: RelativePose, seed):
    """Sample geometry in ``world`` and build the noisy match set."""
    W, H = params.image_size
    K = world.K
    P0, P1 = world.cameras
    Xp = _sample_points(rng, world, params.n_points, params, depth_range)
    Xs = _sample_segments(rng, world, params.n_lines, params, depth_range)

    def proj(X, P):
        return project(P, K, X)[0]

    points = np.concatenate([proj(Xp, P0), proj(Xp, P1)], axis=1).reshape(-1, 4)
    lines = np.concatenate(
        [proj(Xs[:, 0], P0), proj(Xs[:, 1], P0), proj(Xs[:, 0], P1), proj(Xs[:, 1], P1)], axis=1
    ).reshape(-1, 8)

    if params.pixel_noise > 0:
        points = points + rng.normal(scale=params.pixel_noise, size=points.shape)
        lines = lines + rng.normal(scale=params.pixel_noise, size=lines.shape)
    if params.endpoint_slide > 0 and len(lines):
        d = lines[:, 6:8] - lines[:, 4:6]
        s = rng.normal(scale=params.endpoint_slide, size=(len(lines), 2))
        lines[:, 4:6] = lines[:, 4:6] + s[:, :1] * d
        lines[:, 6:8] = lines[:, 6:8] + s[:, 1:] * d

    point_inlier = np.ones(len(points), bool)
    line_inlier = np.ones(len(lines), bool)
    n_out = int(round(params.outlier_fraction * len(points)))
    if n_out:
        idx = rng.choice(len(points), size=n_out, replace=False)
        points[idx, 2] = rng.uniform(0, W - 1, n_out)
        points[idx, 3] = rng.uniform(0, H - 1, n_out)
        point_inlier[idx] = False
    n_out = int(round(params.outlier_fraction * len(lines)))
    if n_out:
        idx = rng.choice(len(lines), size=n_out, replace=False)
        for i in idx:
            while True:
                e = rng.uniform([0, 0, 0, 0], [W - 1, H - 1, W - 1, H - 1])
                if np.hypot(e[2] - e[0], e[3] - e[1]) >= MIN_LINE_PX:
                    break
            lines[i, 4:8] = e
        line_inlier[idx] = False

    # perturbed coordinates may leave the frame; keep them inside
    points[:, 0::2] = np.clip(points[:, 0::2], 0, W - 1)
    points[:, 1::2] = np.clip(points[:, 1::2], 0, H - 1)
    lines[:, 0::2] = np.clip(lines[:, 0::2], 0, W - 1)
    lines[:, 1::2] = np.clip(lines[:, 1::2], 0, H - 1)

    ms = MatchSet(points, lines, params.image_size, world, gt, {"seed": seed})
    return SceneSample(Xp, Xs, K, world.cameras.copy(), ms, gt, params, point_inlier, line_inlier, seed)


def _make_world(rng, box_lo, box_hi, cameras, params):
    amp, nf, nph = _noise_fields(rng, params.appearance_noise)
    return ProceduralAppearance(
        box_lo=np.asarray(box_lo, float),
        box_hi=np.asarray(box_hi, float),
        cameras=np.asarray(cameras, float),
        K=intrinsics(params.image_size, params.focal_scale),
        texture=Texture.random(rng),
        image_size=tuple(params.image_size),
        noise_amp=amp,
        noise_freqs=nf,
        noise_phases=nph,
    )


def generate_scene(seed, params: SceneParams | None = None) -> SceneSample:
    """Random room, random reference camera, random relative motion."""
    params = params or SceneParams()
    params.validate()
    rng = np.random.default_rng(seed)
    d_lo, d_hi = params.depth_range
    for _ in range(params.max_retries):
        half = np.array([rng.uniform(2.0, 5.0), rng.uniform(1.5, 3.0)])
        far = rng.uniform(d_lo + 0.6 * (d_hi - d_lo), d_hi)
        box_lo = np.array([-half[0], -half[1], -3.0])
        box_hi = np.array([half[0], half[1], far])
        c0 = rng.uniform([-0.3, -0.3, -0.3], [0.3, 0.3, 0.3])
        P0 = make_transform(_random_rotation(rng, 0.0, 10.0), c0)
        dR = _random_rotation(rng, *params.rotation_range_deg)
        direction = rng.normal(size=3)
        dt = direction / np.linalg.norm(direction) * rng.uniform(*params.baseline_range)
        dP = make_transform(dR, dt)
        P1 = P0 @ dP
        margin = 0.2
        if np.all(P1[:3, 3] > box_lo + margin) and np.all(P1[:3, 3] < box_hi - margin):
            break
    else:
        raise SceneError("could not place the target camera inside the room")
    world = _make_world(rng, box_lo, box_hi, np.stack([P0, P1]), params)
    gt = RelativePose.from_matrix(dP)
    return _render_pair(rng, world, params, params.depth_range, gt, seed)


@dataclass
class SequenceSample:
    poses: np.ndarray  # (F, 4, 4) camera-to-world, first is identity
    pairs: list  # SceneSample per consecutive frame pair


def generate_sequence(seed, n_frames: int, params: SceneParams | None = None, speed=1.0):
    """A camera driving down a textured corridor, one pair per frame step.

    Poses are re-expressed relative to the first frame, so the ground-truth
    trajectory starts at identity.
    """
    params = params or SceneParams()
    params.validate()
    if n_frames < 2:
        raise ValueError("a sequence needs at least two frames")
    rng = np.random.default_rng(seed)
    length = speed * n_frames
    box_lo = np.array([-4.0, -2.0, -5.0])
    box_hi = np.array([4.0, 2.5, length + 60.0])
    phase = rng.uniform(0, 2 * np.pi)
    poses = []
    for k in range(n_frames):
        yaw = 0.12 * math.sin(k / 18.0 + phase)
        R = quat_to_rotmat(axis_angle_to_quat([0, 1, 0], yaw))
        c = np.array([1.5 * math.sin(k / 25.0 + phase), 0.1 * math.sin(k / 7.0), speed * k])
        poses.append(make_transform(R, c))
    poses = np.stack(poses)
    texture_rng = np.random.default_rng(rng.integers(2**63))
    base = _make_world(texture_rng, box_lo, box_hi, poses[:2], params)
    pairs = []
    for k in range(n_frames - 1):
        world = ProceduralAppearance(**{**base.__dict__, "cameras": poses[k : k + 1 + 1].copy()})
        gt = RelativePose.from_matrix(invert_rigid(poses[k]) @ poses[k + 1])
        pair_rng = np.random.default_rng([seed, k])
        pairs.append(_render_pair(pair_rng, world, params, params.depth_range, gt, [seed, k]))
    rel = invert_rigid(poses[0])
    return SequenceSample(np.stack([rel @ P for P in poses]), pairs)
