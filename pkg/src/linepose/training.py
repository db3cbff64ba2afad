"""Datasets on disk, the training loop, evaluation and trajectory reports."""

from __future__ import annotations

import json
import math
import os
import subprocess
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import TrainConfig
from .datagen import MatchSet, SceneParams, generate_scene, generate_sequence, load_matchset, save_matchset
from .diffcore import Adam, backward, no_grad
from .geometry import (
    KITTI_LENGTHS,
    GeometryError,
    RelativePose,
    Trajectory,
    accumulate_trajectory,
    invert_rigid,
    demon_rot_error,
    demon_tran_error,
    drift_per_100m,
    kitti_pairwise_errors,
    load_trajectory,
    save_trajectory,
)
from .diffcore.gradcheck import check_gradients
from .model import ModelConfig, PoseModel, make_batch
from .posehead import PosePrediction, target_vectors, uncertainty_loss
from .reports import pair_errors_csv, trajectory_svg

DATASET_FORMAT = "linepose-dataset"
REPORT_FORMAT = "linepose-eval"


class DatasetError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


# ---------------------------------------------------------------- datasets


@dataclass
class Dataset:
    kind: str  # "pairs" or "sequence"
    ids: list
    matchsets: list
    manifest: dict
    poses: Trajectory | None = None

    def __len__(self):
        return len(self.matchsets)


def _write_manifest(path: Path, manifest: dict):
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def synth_pairs(out_dir, count: int, seed: int, params: SceneParams | None = None) -> Path:
    """Write ``count`` independent two-view scenes plus ``manifest.json``."""
    params = params or SceneParams()
    out = _prepare_dir(out_dir)
    files = []
    for i in range(count):
        name = f"pair_{i:05d}.lpm"
        scene = generate_scene([seed, i], params)
        save_matchset(scene.matches, out / name)
        files.append({"name": name, "seed": [seed, i]})
    manifest = {
        "format": DATASET_FORMAT,
        "version": 1,
        "kind": "pairs",
        "seed": seed,
        "count": count,
        "params": params.to_dict(),
        "files": files,
    }
    _write_manifest(out / "manifest.json", manifest)
    return out


def synth_sequence(out_dir, n_frames: int, seed: int, params: SceneParams | None = None, speed=1.0) -> Path:
    """Write a consecutive-frame sequence, its pairs and ground-truth poses."""
    params = params or SceneParams()
    out = _prepare_dir(out_dir)
    seq = generate_sequence(seed, n_frames, params, speed)
    files = []
    for k, scene in enumerate(seq.pairs):
        name = f"pair_{k:05d}.lpm"
        save_matchset(scene.matches, out / name)
        files.append({"name": name, "seed": [seed, k]})
    save_trajectory(out / "poses.txt", Trajectory(seq.poses))
    manifest = {
        "format": DATASET_FORMAT,
        "version": 1,
        "kind": "sequence",
        "seed": seed,
        "count": len(files),
        "n_frames": n_frames,
        "speed": speed,
        "params": params.to_dict(),
        "files": files,
        "poses": "poses.txt",
    }
    _write_manifest(out / "manifest.json", manifest)
    return out


def _prepare_dir(out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DatasetError(f"cannot write to {out}: {exc.strerror}") from None
    return out


def load_dataset(path) -> Dataset:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise DatasetError(f"{root}: no manifest.json")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{mpath}: {exc}") from None
    if manifest.get("format") != DATASET_FORMAT:
        raise DatasetError(f"{mpath}: not a dataset manifest")
    ids = [f["name"] for f in manifest["files"]]
    matchsets = [load_matchset(root / name) for name in ids]
    poses = None
    if manifest["kind"] == "sequence":
        poses = load_trajectory(root / manifest["poses"])
        if len(poses) != len(matchsets) + 1:
            raise DatasetError(f"{root}: {len(poses)} poses for {len(matchsets)} pairs")
    return Dataset(manifest["kind"], ids, matchsets, manifest, poses)


# ---------------------------------------------------------------- evaluation


def pair_seed(m: MatchSet) -> int:
    """Resampling seed derived from the match content, independent of pair order."""
    return zlib.crc32(m.points.tobytes() + m.lines.tobytes())


@dataclass
class PairResult:
    id: str
    rot_deg: float
    tran_deg: float
    loss: float | None = None


@dataclass
class EvalReport:
    pairs: list
    rot_mean: float
    rot_median: float
    tran_mean: float
    tran_median: float
    loss_mean: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return len(self.pairs)

    def to_dict(self):
        return {
            "format": REPORT_FORMAT,
            "version": 1,
            "aggregate": {
                "n": self.n,
                "rot_mean_deg": self.rot_mean,
                "rot_median_deg": self.rot_median,
                "tran_mean_deg": self.tran_mean,
                "tran_median_deg": self.tran_median,
                "loss_mean": self.loss_mean,
            },
            "pairs": [asdict(p) for p in self.pairs],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != REPORT_FORMAT:
            raise ValueError("not an evaluation report")
        agg = d["aggregate"]
        return cls(
            pairs=[PairResult(**p) for p in d["pairs"]],
            rot_mean=agg["rot_mean_deg"],
            rot_median=agg["rot_median_deg"],
            tran_mean=agg["tran_mean_deg"],
            tran_median=agg["tran_median_deg"],
            loss_mean=agg["loss_mean"],
            meta=d.get("meta", {}),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _aggregate(values):
    # sorted before reducing so the result does not depend on pair order
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        return math.nan, math.nan
    return float(math.fsum(v) / v.size), float(np.median(v))


def report_from_poses(ids, gts, preds, losses=None, meta=None) -> EvalReport:
    """Per-pair DeMoN errors of predicted vs. ground-truth relative poses."""
    pairs = []
    for i, (pid, gt, pr) in enumerate(zip(ids, gts, preds)):
        if gt is None:
            raise DatasetError(f"pair {pid} has no ground truth")
        loss = None if losses is None else float(losses[i])
        pairs.append(PairResult(pid, demon_rot_error(gt.q, pr.q), demon_tran_error(gt.t, pr.t), loss))
    rot_mean, rot_median = _aggregate([p.rot_deg for p in pairs])
    tran_mean, tran_median = _aggregate([p.tran_deg for p in pairs])
    loss_mean = None if losses is None else _aggregate(losses)[0]
    return EvalReport(pairs, rot_mean, rot_median, tran_mean, tran_median, loss_mean, meta or {})


def predict_pairs(model: PoseModel, matchsets, n_points, n_lines):
    """Predictions and per-pair losses, one pair per forward pass.

    Single-pair batches keep every prediction independent of which other
    pairs are evaluated alongside it.
    """
    preds, losses = [], []
    cfg = model.config
    for m in matchsets:
        batch = make_batch([m], cfg, n_points, n_lines, seeds=[pair_seed(m)])
        with no_grad():
            mu, log_var = model.forward(batch)
            loss = None
            if m.gt is not None:
                theta = target_vectors([m.gt], mu.data, cfg.scale_mode)
                loss = uncertainty_loss(mu, log_var, theta).item()
        preds.append(PosePrediction(mu.data[0].copy(), log_var.data[0].copy(), cfg.scale_mode).pose())
        losses.append(loss)
    return preds, losses


def evaluate(model: PoseModel, matchsets, ids=None, n_points=None, n_lines=None, meta=None) -> EvalReport:
    ids = ids if ids is not None else [str(i) for i in range(len(matchsets))]
    preds, losses = predict_pairs(model, matchsets, n_points, n_lines)
    losses = None if any(v is None for v in losses) else losses
    return report_from_poses(ids, [m.gt for m in matchsets], preds, losses, meta)


# ---------------------------------------------------------------- training


def source_revision() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], cwd=here, capture_output=True, text=True, timeout=5
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"git:{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"linepose {__version__}"


class RunManifest:
    """Append-only JSON-lines record of a training run."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.records = []

    def append(self, event: str, **fields):
        rec = {"event": event, **fields}
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @staticmethod
    def read(path):
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]


@dataclass
class TrainResult:
    model: PoseModel
    history: list
    steps_run: int
    checkpoint: Path | None
    manifest: RunManifest


def _draw_batches(cfg: TrainConfig, matchsets):
    """Deterministic (indices, resample seeds) per step."""
    t = cfg.train
    rng = np.random.default_rng([t.seed, 7])
    n_pairs = len(matchsets)
    fixed = [pair_seed(m) for m in matchsets] if t.resample == "pair" else None
    for step in range(1, t.steps + 1):
        idx = rng.choice(n_pairs, size=t.batch_size, replace=n_pairs < t.batch_size)
        if fixed is not None:
            seeds = [fixed[i] for i in idx]
        else:
            seeds = [[t.seed, step, j] for j in range(t.batch_size)]
        yield step, idx, seeds


def train(cfg: TrainConfig, matchsets, out_dir=None, eval_sets=None, log=None) -> TrainResult:
    """Adam on the uncertainty loss over random resampled batches.

    ``eval_sets`` defaults to the first ``eval_pairs`` training pairs. The
    metric history holds one record per evaluation (including step 0).
    """
    cfg.validate()
    t = cfg.train
    if not matchsets:
        raise DatasetError("training set is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out / "manifest.jsonl" if out is not None else None)
    manifest.append("start", config=cfg.to_dict(), revision=source_revision(), n_pairs=len(matchsets))

    model = PoseModel(cfg.model)
    opt = Adam(model.parameters(), lr=t.lr)
    evals = eval_sets if eval_sets is not None else matchsets[: t.eval_pairs]
    eval_ids = [str(i) for i in range(len(evals))]
    history = []
    window = []
    started = time.perf_counter()
    timings = {"train_s": 0.0, "eval_s": 0.0}

    def run_eval(step):
        t0 = time.perf_counter()
        rep = evaluate(model, evals, eval_ids, t.n_points, t.n_lines)
        timings["eval_s"] += time.perf_counter() - t0
        rec = {
            "step": step,
            "train_loss": float(np.mean(window)) if window else None,
            "eval_loss": rep.loss_mean,
            "demon_rot": rep.rot_median,
            "demon_tran": rep.tran_median,
            "demon_rot_mean": rep.rot_mean,
            "demon_tran_mean": rep.tran_mean,
        }
        window.clear()
        history.append(rec)
        manifest.append("eval", **rec)
        if log:
            log(
                f"step {step:5d}  loss {rec['eval_loss']:.4f}  "
                f"rot {rec['demon_rot']:.3f} deg  tran {rec['demon_tran']:.3f} deg"
            )
        return rec

    def done(rec):
        return (
            rec["step"] > t.logvar_warmup
            and t.stop_rot_deg is not None
            and t.stop_tran_deg is not None
            and rec["demon_rot"] < t.stop_rot_deg
            and rec["demon_tran"] < t.stop_tran_deg
        )

    def build(idx, seeds):
        return make_batch([matchsets[i] for i in idx], cfg.model, t.n_points, t.n_lines, seeds)

    rec = run_eval(0)
    steps_run = 0
    # one batch is assembled ahead on a worker thread while the current step runs
    with ThreadPoolExecutor(max_workers=1) as pool:
        draws = _draw_batches(cfg, matchsets)
        nxt = next(draws, None)
        pending = pool.submit(build, nxt[1], nxt[2]) if nxt else None
        while nxt is not None and not done(rec):
            step, idx, seeds = nxt
            batch = pending.result()
            nxt = next(draws, None)
            pending = pool.submit(build, nxt[1], nxt[2]) if nxt else None
            t0 = time.perf_counter()
            if step == t.logvar_warmup + 1 and step > 1:
                # the learned variance rescales gradients by orders of magnitude;
                # stale second moments would turn that into oversized steps
                lr = t.lr if t.lr_after_warmup is None else t.lr_after_warmup
                opt = Adam(model.parameters(), lr=lr)
                manifest.append("variance_on", step=step, lr=lr)
            opt.zero_grad()
            try:
                loss = model.loss(batch, learn_variance=step > t.logvar_warmup)
                value = loss.item()
                if not math.isfinite(value):
                    raise FloatingPointError(f"loss is {value}")
                backward(loss)
            except FloatingPointError as exc:
                raise _diverged(out, manifest, step, idx, seeds, str(exc)) from None
            opt.step()
            timings["train_s"] += time.perf_counter() - t0
            window.append(value)
            steps_run = step
            if t.checkpoint_every and step % t.checkpoint_every == 0 and out is not None:
                path = out / f"checkpoint_{step:06d}.lpck"
                model.save(path, {"step": step})
                manifest.append("checkpoint", step=step, path=path.name)
            if step % t.eval_every == 0 or step == t.steps:
                rec = run_eval(step)

    ckpt = None
    if out is not None:
        ckpt = out / "model.lpck"
        model.save(ckpt, {"step": steps_run, "train": asdict(t)})
        manifest.append("checkpoint", step=steps_run, path=ckpt.name)
    timings["wall_s"] = time.perf_counter() - started
    manifest.append("end", steps=steps_run, timings=timings)
    return TrainResult(model, history, steps_run, ckpt, manifest)


def _diverged(out, manifest, step, idx, seeds, reason):
    dump = {"step": step, "batch_indices": [int(i) for i in idx], "resample_seeds": seeds, "reason": reason}
    manifest.append("diverged", **dump)
    path = None
    if out is not None:
        path = out / "divergence.json"
        path.write_text(json.dumps(dump, indent=2) + "\n", encoding="utf-8")
    where = f"; dump written to {path}" if path else ""
    return TrainingDiverged(f"non-finite loss at step {step} (resample seeds {seeds}): {reason}{where}", path)


# ---------------------------------------------------------------- trajectories


@dataclass
class TrajectoryReport:
    rot_rmse_deg: float
    tran_rmse_m: float
    drift: object  # DriftResult or None
    drift_error: str | None
    estimate: Trajectory
    gt: Trajectory

    def to_dict(self):
        d = {"rot_rmse_deg": self.rot_rmse_deg, "tran_rmse_m": self.tran_rmse_m}
        if self.drift is not None:
            d["drift"] = asdict(self.drift)
        else:
            d["drift"] = None
            d["drift_error"] = self.drift_error
        return d


def trajectory_report(gt: Trajectory, preds, out_dir=None, lengths=KITTI_LENGTHS) -> TrajectoryReport:
    """Chain predicted metric relative poses and compare with ground truth.

    Writes ``trajectory.txt`` (KITTI rows), ``pairs.csv`` and ``trajectory.svg``
    when ``out_dir`` is given.
    """
    est = accumulate_trajectory(preds)
    rot_rmse, tran_rmse = kitti_pairwise_errors(gt, est)
    drift, drift_error = None, None
    try:
        drift = drift_per_100m(gt, est, lengths)
    except GeometryError as exc:
        drift_error = str(exc)
    report = TrajectoryReport(rot_rmse, tran_rmse, drift, drift_error, est, gt)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_trajectory(out / "trajectory.txt", est)
        (out / "pairs.csv").write_text(pair_errors_csv(gt, est), encoding="utf-8")
        (out / "trajectory.svg").write_text(trajectory_svg(gt, est), encoding="utf-8")
        (out / "trajectory_report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    return report


def gt_relative_poses(gt: Trajectory):
    return [RelativePose.from_matrix(invert_rigid(a) @ b) for a, b in zip(gt.poses[:-1], gt.poses[1:])]


# ---------------------------------------------------------------- bench


def bench(model: PoseModel, node_counts=(192, 384, 768), runs=100, warmup=3, seed=0):
    """Single-pair forward latency; node count n splits as n/2 points + n/4 lines."""
    results = []
    params = SceneParams(n_points=256, n_lines=96)
    scene = generate_scene(seed, params).matches
    for n in node_counts:
        if model.variant.lines:
            if n % 4:
                raise ValueError(f"node count {n} must be divisible by 4")
            n_pts, n_lines = n // 2, n // 4
        else:
            n_pts, n_lines = n, 0
        batch = make_batch([scene], model.config, n_pts, n_lines, seeds=[seed])
        times = []
        with no_grad():
            for k in range(warmup + runs):
                t0 = time.perf_counter()
                model.forward(batch)
                if k >= warmup:
                    times.append((time.perf_counter() - t0) * 1000.0)
        times = np.array(times)
        results.append(
            {
                "nodes": n,
                "points": n_pts,
                "lines": n_lines,
                "runs": runs,
                "mean_ms": float(times.mean()),
                "p95_ms": float(np.percentile(times, 95)),
                "min_ms": float(times.min()),
            }
        )
    return {"format": "linepose-bench", "model": asdict(model.config), "threads": os.cpu_count(), "results": results}


# ---------------------------------------------------------------- gradient audit

GRADCHECK_TOL = 1e-4


def run_gradcheck(width=8, depth=2, heads=2, n_points=6, n_lines=2, variant="full", seed=0, h=1e-5):
    """Finite-difference audit of every parameter group of a tiny model."""
    cfg = ModelConfig(width=width, depth=depth, heads=heads, variant=variant, init_seed=seed)
    model = PoseModel(cfg)
    params = SceneParams(n_points=max(n_points, 6), n_lines=max(n_lines, 2))
    sets = [generate_scene([seed, i], params).matches for i in range(2)]
    batch = make_batch(sets, cfg, n_points, n_lines, seeds=[[seed, 0], [seed, 1]])
    t0 = time.perf_counter()
    groups = check_gradients(lambda: model.loss(batch), model.named_parameters(), h)
    worst = max(groups, key=lambda g: g.rel_error)
    return {
        "format": "linepose-gradcheck",
        "model": asdict(cfg),
        "nodes": n_points + 2 * n_lines,
        "h": h,
        "tolerance": GRADCHECK_TOL,
        "passed": worst.rel_error <= GRADCHECK_TOL,
        "worst": {"name": worst.name, "rel_error": worst.rel_error},
        "seconds": time.perf_counter() - t0,
        "groups": [asdict(g) for g in groups],
    }
