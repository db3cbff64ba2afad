"""Datasets, evaluation reports, the training loop, trajectories and bench."""

import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from linepose.config import load_config
from linepose.datagen import SceneParams
from linepose.diffcore import Tensor
from linepose.geometry import RelativePose, load_trajectory
from linepose.model import ModelConfig, PoseModel
from linepose.training import (
    DatasetError,
    EvalReport,
    RunManifest,
    TrainingDiverged,
    bench,
    evaluate,
    gt_relative_poses,
    load_dataset,
    report_from_poses,
    run_gradcheck,
    synth_pairs,
    synth_sequence,
    train,
    trajectory_report,
)

SMALL = SceneParams(n_points=30, n_lines=8)


def small_config(**train):
    overrides = {
        "model.width": 8,
        "model.depth": 1,
        "model.heads": 2,
        "train.n_points": 8,
        "train.n_lines": 4,
        "train.batch_size": 2,
        "train.steps": 3,
        "train.eval_every": 2,
        "train.eval_pairs": 3,
    }
    overrides.update({f"train.{k}": v for k, v in train.items()})
    return load_config(overrides=overrides)


class TestDatasets:
    def test_pairs_roundtrip(self, tmp_path):
        synth_pairs(tmp_path / "d", 3, 4, SMALL)
        ds = load_dataset(tmp_path / "d")
        assert ds.kind == "pairs" and len(ds) == 3 and ds.ids[0] == "pair_00000.lpm"
        assert all(m.gt is not None for m in ds.matchsets)

    def test_sequence_roundtrip(self, tmp_path):
        synth_sequence(tmp_path / "s", 5, 1, SMALL)
        ds = load_dataset(tmp_path / "s")
        assert ds.kind == "sequence" and len(ds) == 4 and len(ds.poses) == 5
        for m, rel in zip(ds.matchsets, gt_relative_poses(ds.poses)):
            np.testing.assert_allclose(m.gt.matrix(), rel.matrix(), atol=1e-9)

    def test_missing_and_foreign_manifest(self, tmp_path):
        with pytest.raises(DatasetError, match="manifest"):
            load_dataset(tmp_path)
        (tmp_path / "manifest.json").write_text('{"format": "other"}')
        with pytest.raises(DatasetError, match="not a dataset"):
            load_dataset(tmp_path)

    def test_unwritable(self, tmp_path):
        (tmp_path / "file").write_text("x")
        with pytest.raises(DatasetError, match="cannot write"):
            synth_pairs(tmp_path / "file" / "sub", 1, 0, SMALL)


class TestEvalReport:
    def test_perfect_predictions(self, small_pairs):
        gts = [m.gt for m in small_pairs]
        rep = report_from_poses(list("abcdef"), gts, gts)
        assert rep.rot_mean == rep.rot_median == rep.tran_mean == rep.tran_median == 0.0

    def test_known_errors(self):
        gt = RelativePose([1, 0, 0, 0], [0, 0, 1.0])
        c, s = np.cos(np.pi / 4), np.sin(np.pi / 4)
        pred = RelativePose([c, 0, s, 0], [1.0, 0, 0])
        rep = report_from_poses(["x"], [gt], [pred])
        np.testing.assert_allclose([rep.rot_median, rep.tran_median], [45.0, 90.0], atol=1e-9)

    def test_shuffled_order_identical_aggregates(self, small_pairs, tiny_config):
        model = PoseModel(tiny_config)
        ids = [str(i) for i in range(len(small_pairs))]
        a = evaluate(model, small_pairs, ids, 10, 4)
        order = [3, 0, 5, 1, 4, 2]
        b = evaluate(model, [small_pairs[i] for i in order], [ids[i] for i in order], 10, 4)
        assert (a.rot_mean, a.rot_median, a.tran_mean, a.tran_median, a.loss_mean) == (
            b.rot_mean, b.rot_median, b.tran_mean, b.tran_median, b.loss_mean,
        )
        assert {p.id: p.rot_deg for p in a.pairs} == {p.id: p.rot_deg for p in b.pairs}

    def test_file_roundtrip(self, tmp_path, small_pairs, tiny_config):
        rep = evaluate(PoseModel(tiny_config), small_pairs[:3], None, 10, 4, meta={"note": "x"})
        rep.save(tmp_path / "r.json")
        back = EvalReport.load(tmp_path / "r.json")
        assert back == rep
        assert json.loads((tmp_path / "r.json").read_text())["format"] == "linepose-eval"

    def test_missing_gt(self, small_pairs):
        with pytest.raises(DatasetError, match="ground truth"):
            report_from_poses(["a"], [None], [small_pairs[0].gt])


class TestTrain:
    def test_zero_lr_leaves_parameters(self, small_pairs):
        cfg = small_config(lr=0.0, steps=1)
        result = train(cfg, small_pairs)
        init = PoseModel(cfg.model).state_dict()
        final = result.model.state_dict()
        assert all(np.array_equal(init[k], final[k]) for k in init)

    def test_history_and_outputs(self, tmp_path, small_pairs):
        result = train(small_config(), small_pairs, tmp_path / "run")
        assert [r["step"] for r in result.history] == [0, 2, 3]
        assert result.steps_run == 3 and result.checkpoint.is_file()
        events = [r["event"] for r in RunManifest.read(tmp_path / "run" / "manifest.jsonl")]
        assert events[0] == "start" and events[-1] == "end" and events.count("eval") == 3

    def test_same_seed_same_history(self, small_pairs):
        a = train(small_config(), small_pairs).history
        b = train(small_config(), small_pairs).history
        assert a == b

    def test_seed_changes_history(self, small_pairs):
        a = train(small_config(), small_pairs).history
        b = train(small_config(seed=1), small_pairs).history
        assert a[-1] != b[-1]

    def test_variance_warmup_event(self, small_pairs):
        result = train(small_config(logvar_warmup=1, lr_after_warmup=1e-5, resample="pair"), small_pairs)
        (event,) = [r for r in result.manifest.records if r["event"] == "variance_on"]
        assert event == {"event": "variance_on", "step": 2, "lr": 1e-5}

    def test_early_stop_after_first_trained_eval(self, small_pairs):
        result = train(small_config(steps=10, stop_rot_deg=1e9, stop_tran_deg=1e9), small_pairs)
        assert result.steps_run == 2 and [r["step"] for r in result.history] == [0, 2]

    def test_periodic_checkpoints(self, tmp_path, small_pairs):
        train(small_config(checkpoint_every=1), small_pairs, tmp_path)
        assert sorted(p.name for p in tmp_path.glob("checkpoint_*.lpck")) == [
            "checkpoint_000001.lpck", "checkpoint_000002.lpck", "checkpoint_000003.lpck",
        ]

    def test_divergence_dump(self, tmp_path, small_pairs, monkeypatch):
        monkeypatch.setattr(PoseModel, "loss", lambda self, batch, learn_variance=True: Tensor(np.array(np.nan)))
        with pytest.raises(TrainingDiverged) as info:
            train(small_config(), small_pairs, tmp_path)
        dump = json.loads(info.value.dump_path.read_text())
        assert dump["step"] == 1 and len(dump["resample_seeds"]) == 2
        assert "resample seeds" in str(info.value)

    def test_empty_training_set(self):
        with pytest.raises(DatasetError):
            train(small_config(), [])


class TestTrajectory:
    def make(self, tmp_path, n=12):
        synth_sequence(tmp_path / "seq", n, 2, SMALL, speed=2.0)
        return load_dataset(tmp_path / "seq").poses

    def test_gt_injection(self, tmp_path):
        gt = self.make(tmp_path)
        rep = trajectory_report(gt, gt_relative_poses(gt), tmp_path / "out", lengths=(5.0, 10.0))
        assert rep.rot_rmse_deg <= 1e-9 and rep.tran_rmse_m <= 1e-9
        assert abs(rep.drift.t_rel) <= 1e-9 and abs(rep.drift.r_rel) <= 1e-9
        est = load_trajectory(tmp_path / "out" / "trajectory.txt")
        np.testing.assert_allclose(est.poses, gt.poses, atol=1e-6)

    def test_identity_predictions(self, tmp_path):
        gt = self.make(tmp_path)
        ident = [RelativePose([1, 0, 0, 0], [0, 0, 0], "metric")] * (len(gt) - 1)
        rep = trajectory_report(gt, ident, tmp_path / "out", lengths=(5.0, 10.0))
        assert np.ptp(rep.estimate.poses[:, :3, 3], axis=0).max() == 0.0
        assert rep.drift.t_rel > 0

    def test_outputs_well_formed(self, tmp_path):
        gt = self.make(tmp_path)
        trajectory_report(gt, gt_relative_poses(gt), tmp_path / "out", lengths=(5.0,))
        root = ET.parse(tmp_path / "out" / "trajectory.svg").getroot()
        assert root.tag.endswith("svg")
        rows = (tmp_path / "out" / "pairs.csv").read_text().strip().splitlines()
        assert len(rows) == len(gt)  # header plus one row per pair
        assert json.loads((tmp_path / "out" / "trajectory_report.json").read_text())["drift"] is not None

    def test_too_short_for_drift(self, tmp_path):
        gt = self.make(tmp_path, n=4)
        rep = trajectory_report(gt, gt_relative_poses(gt), lengths=(1000.0,))
        assert rep.drift is None and rep.drift_error


class TestBenchAndGradcheck:
    def test_bench_fields(self):
        model = PoseModel(ModelConfig(width=8, depth=1, heads=2))
        rep = bench(model, node_counts=(16, 32), runs=5, warmup=1)
        assert [r["nodes"] for r in rep["results"]] == [16, 32]
        assert all(r["runs"] == 5 and 0 < r["min_ms"] <= r["mean_ms"] for r in rep["results"])
        assert rep["results"][0]["points"] == 8 and rep["results"][0]["lines"] == 4

    def test_bench_point_only_variant(self):
        rep = bench(PoseModel(ModelConfig(8, 1, 2, variant="+V")), node_counts=(10,), runs=2, warmup=0)
        assert rep["results"][0]["points"] == 10 and rep["results"][0]["lines"] == 0

    def test_bench_rejects_odd_split(self):
        with pytest.raises(ValueError):
            bench(PoseModel(ModelConfig(8, 1, 2)), node_counts=(10,), runs=1)

    def test_gradcheck_small_passes(self):
        rep = run_gradcheck(width=4, depth=1, heads=2, n_points=4, n_lines=1)
        assert rep["passed"] and rep["worst"]["rel_error"] <= 1e-4
        names = [g["name"] for g in rep["groups"]]
        assert len(names) == len(set(names)) and "head.pose.layers.1.weight" in names
