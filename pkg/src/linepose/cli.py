"""Command line: synth, train, eval, traj, gradcheck, bench.

Every failure exits nonzero after printing exactly one line to stderr::

    error: <code>: <message>
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from .config import ConfigError, TrainConfig, load_config, tomllib
from .datagen import AppearanceError, MatchSetParseError, SceneError
from .diffcore import CheckpointError
from .geometry import KITTI_LENGTHS, GeometryError, RelativePose
from .model import PoseModel
from .training import (
    DatasetError,
    TrainingDiverged,
    bench,
    evaluate,
    gt_relative_poses,
    load_dataset,
    predict_pairs,
    report_from_poses,
    run_gradcheck,
    synth_pairs,
    synth_sequence,
    train,
    trajectory_report,
)


class CliError(Exception):
    def __init__(self, code, message, status=2):
        super().__init__(message)
        self.code = code
        self.status = status


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


# ---------------------------------------------------------------- config plumbing

# flag dest -> dotted config key
_OVERRIDES = {
    "width": "model.width",
    "depth": "model.depth",
    "heads": "model.heads",
    "variant": "model.variant",
    "scale_mode": "model.scale_mode",
    "points": "train.n_points",
    "lines": "train.n_lines",
    "lr": "train.lr",
    "batch_size": "train.batch_size",
    "steps": "train.steps",
    "seed": "train.seed",
    "eval_every": "train.eval_every",
}


def _parse_set(items):
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        try:
            out[key.strip()] = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            out[key.strip()] = raw  # bare strings need no quoting
    return out


def _config(args) -> TrainConfig:
    overrides = {key: getattr(args, dest, None) for dest, key in _OVERRIDES.items()}
    overrides.update(_parse_set(getattr(args, "set", None)))
    return load_config(getattr(args, "config", None), overrides)


def _add_config_flags(p, model=True, train=False):
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    if model:
        p.add_argument("--width", type=int)
        p.add_argument("--depth", type=int)
        p.add_argument("--heads", type=int)
        p.add_argument("--variant", help="baseline, +L, +LP, +V, +V+W or full")
        p.add_argument("--scale-mode", choices=["unit", "metric"])
    if train:
        p.add_argument("--points", type=int, help="resampled point matches per pair")
        p.add_argument("--lines", type=int, help="resampled line matches per pair")
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--steps", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--eval-every", type=int)


def _load_model(path):
    try:
        return PoseModel.load(path)
    except FileNotFoundError:
        raise CliError("checkpoint", f"{path}: no such file") from None
    except (KeyError, ValueError, TypeError) as exc:
        raise CliError("checkpoint", f"{path}: {exc}") from None


def _check_compatible(header, args):
    """Compare checkpoint hyperparameters with explicitly given model settings."""
    explicit = {k.split(".", 1)[1] for k in _parse_set(args.set) if k.startswith("model.")}
    explicit |= {
        key.split(".", 1)[1]
        for dest, key in _OVERRIDES.items()
        if key.startswith("model.") and getattr(args, dest, None) is not None
    }
    if args.config:
        try:
            with open(args.config, "rb") as fh:
                explicit |= set(tomllib.load(fh).get("model", {}))
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    if not explicit:
        return
    wanted = asdict(_config(args).model)
    stored = header["model"]
    diffs = [f"{k}={stored.get(k)!r} (config {wanted[k]!r})" for k in sorted(explicit) if stored.get(k) != wanted[k]]
    if diffs:
        raise CliError("mismatch", "checkpoint does not match config: " + ", ".join(diffs))


def _counts(args, header):
    train = header.get("train", {})
    n_points = args.points if args.points is not None else train.get("n_points")
    n_lines = args.lines if args.lines is not None else train.get("n_lines")
    return n_points, n_lines


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- commands


def cmd_synth(args):
    cfg = _config(args)
    if args.count < 0:
        raise CliError("usage", "--count must be >= 0")
    if args.sequence:
        out = synth_sequence(args.out, args.sequence, args.seed, cfg.synth, args.speed)
        print(f"wrote sequence of {args.sequence} frames to {out}")
    else:
        out = synth_pairs(args.out, args.count, args.seed, cfg.synth)
        print(f"wrote {args.count} pairs to {out}")


def cmd_train(args):
    cfg = _config(args)
    data = load_dataset(args.data)
    evals = load_dataset(args.eval_data).matchsets if args.eval_data else None
    log = None if args.quiet else print
    result = train(cfg, data.matchsets, args.out, evals, log=log)
    last = result.history[-1]
    print(
        f"trained {result.steps_run} steps; checkpoint {result.checkpoint}; "
        f"median rot {last['demon_rot']:.3f} deg, tran {last['demon_tran']:.3f} deg"
    )


def cmd_eval(args):
    data = load_dataset(args.data)
    meta = {"dataset": str(args.data)}
    if args.inject:
        gts = [m.gt for m in data.matchsets]
        preds = gts if args.inject == "gt" else [RelativePose.identity() for _ in gts]
        report = report_from_poses(data.ids, gts, preds, meta={**meta, "inject": args.inject})
    else:
        if not args.checkpoint:
            raise CliError("usage", "eval needs --checkpoint or --inject")
        model, header = _load_model(args.checkpoint)
        _check_compatible(header, args)
        n_points, n_lines = _counts(args, header)
        meta.update(checkpoint=str(args.checkpoint), n_points=n_points, n_lines=n_lines)
        report = evaluate(model, data.matchsets, data.ids, n_points, n_lines, meta)
    if args.report:
        report.save(args.report)
    print(
        f"pairs {report.n}  rot mean {report.rot_mean:.4f} median {report.rot_median:.4f} deg  "
        f"tran mean {report.tran_mean:.4f} median {report.tran_median:.4f} deg"
    )


def cmd_traj(args):
    data = load_dataset(args.data)
    if data.kind != "sequence":
        raise CliError("dataset", f"{args.data} is not a sequence dataset")
    if args.inject == "gt":
        preds = gt_relative_poses(data.poses)
    elif args.inject == "identity":
        preds = [RelativePose.identity() for _ in data.matchsets]
    else:
        if not args.checkpoint:
            raise CliError("usage", "traj needs --checkpoint or --inject")
        model, header = _load_model(args.checkpoint)
        if model.config.scale_mode != "metric":
            raise CliError("scale", "checkpoint predicts unit-scale translation; trajectories need metric scale")
        n_points, n_lines = _counts(args, header)
        preds, _ = predict_pairs(model, data.matchsets, n_points, n_lines)
    lengths = tuple(float(v) for v in args.lengths.split(",")) if args.lengths else KITTI_LENGTHS
    rep = trajectory_report(data.poses, preds, args.out, lengths)
    print(f"pairwise rmse: rot {rep.rot_rmse_deg:.4f} deg, tran {rep.tran_rmse_m:.4f} m")
    if rep.drift is not None:
        d = rep.drift
        print(f"drift: t_rel {d.t_rel:.4f} %, r_rel {d.r_rel:.4f} deg/100m over {d.n_segments} segments")
        if d.skipped_lengths:
            print(f"skipped lengths (sequence too short): {d.skipped_lengths}")
    else:
        print(f"drift: unavailable ({rep.drift_error})")


def cmd_gradcheck(args):
    rep = run_gradcheck(args.width, args.depth, args.heads, args.points, args.lines, args.variant, args.seed, args.h)
    if args.report:
        _write_json(args.report, rep)
    for g in rep["groups"]:
        print(f"{g['rel_error']:.3e}  {g['name']}  ({g['size']})")
    worst = rep["worst"]
    print(f"worst {worst['rel_error']:.3e} in {worst['name']}; {len(rep['groups'])} groups in {rep['seconds']:.1f} s")
    if not rep["passed"]:
        raise CliError("gradcheck", f"{worst['name']} relative error {worst['rel_error']:.3e} exceeds {rep['tolerance']:g}", 1)


def cmd_bench(args):
    if args.checkpoint:
        model, _ = _load_model(args.checkpoint)
    else:
        model = PoseModel(_config(args).model)
    nodes = tuple(int(v) for v in args.nodes.split(","))
    rep = bench(model, nodes, args.runs)
    if args.report:
        _write_json(args.report, rep)
    for r in rep["results"]:
        print(f"{r['nodes']:5d} nodes  mean {r['mean_ms']:.2f} ms  p95 {r['p95_ms']:.2f} ms  ({r['runs']} runs)")


# ---------------------------------------------------------------- entry point


def build_parser():
    p = _Parser(prog="linepose", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("out")
    s.add_argument("--count", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--sequence", type=int, metavar="FRAMES", help="write one consecutive-frame sequence instead")
    s.add_argument("--speed", type=float, default=1.0, help="sequence metres per frame")
    _add_config_flags(s, model=False)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("data")
    t.add_argument("out")
    t.add_argument("--eval-data", help="dataset for periodic evaluation (default: training pairs)")
    t.add_argument("--quiet", action="store_true")
    _add_config_flags(t, train=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-pair rotation/translation errors")
    e.add_argument("data")
    e.add_argument("--checkpoint")
    e.add_argument("--inject", choices=["gt", "identity"], help="score fixed predictions instead of a model")
    e.add_argument("--report", help="write the JSON report here")
    e.add_argument("--points", type=int)
    e.add_argument("--lines", type=int)
    _add_config_flags(e)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("traj", help="chain predicted poses along a sequence")
    r.add_argument("data")
    r.add_argument("out")
    r.add_argument("--checkpoint")
    r.add_argument("--inject", choices=["gt", "identity"])
    r.add_argument("--lengths", help="comma-separated drift segment lengths in metres")
    r.add_argument("--points", type=int)
    r.add_argument("--lines", type=int)
    r.set_defaults(func=cmd_traj)

    g = sub.add_parser("gradcheck", help="finite-difference audit of all gradients")
    g.add_argument("--width", type=int, default=8)
    g.add_argument("--depth", type=int, default=2)
    g.add_argument("--heads", type=int, default=2)
    g.add_argument("--points", type=int, default=6)
    g.add_argument("--lines", type=int, default=2)
    g.add_argument("--variant", default="full")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--h", type=float, default=1e-5, help="finite-difference step")
    g.add_argument("--report")
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="forward latency over repeated runs")
    b.add_argument("--checkpoint")
    b.add_argument("--runs", type=int, default=100)
    b.add_argument("--nodes", default="192,384,768")
    b.add_argument("--report")
    _add_config_flags(b)
    b.set_defaults(func=cmd_bench)
    return p


_ERROR_CODES = (
    (ConfigError, "config"),
    (DatasetError, "dataset"),
    (MatchSetParseError, "dataset"),
    (CheckpointError, "checkpoint"),
    (TrainingDiverged, "diverged"),
    (GeometryError, "geometry"),
    (SceneError, "synth"),
    (AppearanceError, "dataset"),
    (OSError, "io"),
    (ValueError, "invalid"),
)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
        return 0
    except CliError as exc:
        err, status = (exc.code, str(exc)), exc.status
    except Exception as exc:  # noqa: BLE001 - every failure becomes one line
        code = next((c for cls, c in _ERROR_CODES if isinstance(exc, cls)), "internal")
        err, status = (code, str(exc) or type(exc).__name__), 2 if code != "internal" else 3
    message = " ".join(err[1].split())
    print(f"error: {err[0]}: {message}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
