"""Weighted fusion, pose head outputs and the uncertainty loss."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from linepose.diffcore import Tensor, backward
from linepose.diffcore.gradcheck import numeric_grad, relative_error
from linepose.dualgraph import GraphState
from linepose.geometry import RelativePose
from linepose.posehead import (
    LOGVAR_CLAMP,
    FusionHead,
    PosePrediction,
    optimal_logvar_property_check,
    predict,
    target_vectors,
    uncertainty_loss,
    weighted_fusion,
)
from oracles import descend_logvar


def state(geo, vis=None):
    return GraphState(geo=Tensor(np.asarray(geo, float)), vis=None if vis is None else Tensor(np.asarray(vis, float)), layer=0)


def loss_value(theta, mu, s):
    return uncertainty_loss(Tensor(np.atleast_2d(mu)), Tensor(np.atleast_2d(s)), np.atleast_2d(theta)).item()


class TestFusion:
    def test_single_node(self, rng):
        head = FusionHead(4, rng)
        f = rng.normal(size=(1, 1, 4))
        v = rng.normal(size=(1, 1, 4))
        out = weighted_fusion(state(f, v), head).data[0]
        np.testing.assert_allclose(out, np.r_[f[0, 0], v[0, 0]], atol=1e-15)

    def test_zero_projection_is_mean(self, rng):
        head = FusionHead(4, rng)
        for lin in (head.score_geo, head.score_vis):
            lin.weight.data[...] = 0.0
            lin.bias.data[...] = 0.0
        f, v = rng.normal(size=(2, 7, 4)), rng.normal(size=(2, 7, 4))
        out = weighted_fusion(state(f, v), head).data
        np.testing.assert_allclose(out, np.c_[f.mean(axis=1), v.mean(axis=1)], atol=1e-15)

    def test_loop_oracle(self, rng):
        head = FusionHead(4, rng)
        f, v = rng.normal(size=(1, 6, 4)), rng.normal(size=(1, 6, 4))
        want = []
        for x, lin in ((f[0], head.score_geo), (v[0], head.score_vis)):
            w = [1 / (1 + math.exp(-(row @ lin.weight.data[:, 0] + lin.bias.data[0]))) for row in x]
            want.append(sum(wi * row for wi, row in zip(w, x)) / math.fsum(w))
        out = weighted_fusion(state(f, v), head).data[0]
        assert np.abs(out - np.concatenate(want)).max() <= 1e-12

    def test_unweighted_geometry_only(self, rng):
        head = FusionHead(4, rng, visual=False, weighted=False)
        f = rng.normal(size=(1, 5, 4))
        np.testing.assert_allclose(weighted_fusion(state(f), head).data, f.mean(axis=1), atol=1e-15)

    def test_permutation_invariant(self, rng):
        head = FusionHead(4, rng)
        f, v = rng.normal(size=(1, 9, 4)), rng.normal(size=(1, 9, 4))
        perm = rng.permutation(9)
        a = weighted_fusion(state(f, v), head).data
        b = weighted_fusion(state(f[:, perm], v[:, perm]), head).data
        assert np.abs(a - b).max() <= 1e-12

    def test_empty_node_set(self, rng):
        with pytest.raises(ValueError, match="empty"):
            weighted_fusion(state(np.zeros((1, 0, 4)), np.zeros((1, 0, 4))), FusionHead(4, rng))


class TestPredict:
    def test_output_widths(self, rng):
        head = FusionHead(4, rng)
        mu, log_var = predict(Tensor(rng.normal(size=(3, 8))), head)
        assert mu.shape == (3, 7) and log_var.shape == (3, 7)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=7, max_size=7), st.sampled_from(["unit", "metric"]))
    def test_any_output_gives_valid_pose(self, mu, mode):
        pose = PosePrediction(np.array(mu), np.zeros(7), mode).pose()
        assert abs(np.linalg.norm(pose.q) - 1) <= 1e-12 and pose.q[0] >= 0
        if mode == "unit":
            assert abs(np.linalg.norm(pose.t) - 1) <= 1e-12

    def test_zero_head_falls_back_to_identity(self, rng, caplog):
        head = FusionHead(4, rng)
        for p in head.pose.parameters():
            p.data[...] = 0.0
        mu, _ = predict(Tensor(rng.normal(size=(1, 8))), head)
        assert np.array_equal(mu.data, np.zeros((1, 7)))
        pose = PosePrediction(mu.data[0], np.zeros(7)).pose()
        np.testing.assert_array_equal(pose.q, [1, 0, 0, 0])
        np.testing.assert_array_equal(pose.t, [0, 0, 1])
        assert "degenerate" in caplog.text

    def test_target_sign_alignment(self):
        gt = RelativePose([0.6, 0.8, 0, 0], [0, 0, 2.0])
        mu = np.array([[-0.6, -0.8, 0, 0, 0, 0, 1.0]])
        np.testing.assert_allclose(target_vectors([gt], mu, "unit"), [[-0.6, -0.8, 0, 0, 0, 0, 1.0]])
        np.testing.assert_allclose(target_vectors([gt], mu, "metric")[0, 4:], [0, 0, 2.0])
        with pytest.raises(ValueError, match="missing"):
            target_vectors([None], mu, "unit")


class TestUncertaintyLoss:
    def test_spot_values(self):
        assert abs(loss_value(np.ones(7), np.ones(7), np.zeros(7))) <= 1e-12
        assert abs(loss_value([1.0], [0.0], [0.0]) - 1.0) <= 1e-12
        assert abs(loss_value([math.sqrt(2)], [0.0], [math.log(2)]) - (math.log(2) + 1)) <= 1e-12

    def test_batch_mean_of_component_sums(self, rng):
        theta, mu, s = rng.normal(size=(3, 4, 7))
        want = np.mean(np.sum(s + (theta - mu) ** 2 * np.exp(-s), axis=1))
        np.testing.assert_allclose(loss_value(theta, mu, s), want, rtol=1e-13)

    def test_clamp(self):
        assert loss_value([0.0], [0.0], [50.0]) == LOGVAR_CLAMP

    @pytest.mark.parametrize("r2,s_star", [(1.0, 0.0), (math.e, 1.0), (4.0, math.log(4.0))])
    def test_optimal_logvar_oracle(self, r2, s_star):
        assert abs(optimal_logvar_property_check(math.sqrt(r2)) - s_star) <= 1e-12

    def test_zero_residual_has_no_minimum(self):
        assert optimal_logvar_property_check(0.0) == -math.inf

    @settings(max_examples=8)
    @given(st.floats(0.05, 20.0))
    def test_descent_on_logvar_reaches_log_r2(self, r):
        assert abs(descend_logvar(r) - math.log(r * r)) <= 1e-3

    def test_gradient_matches_finite_differences(self, rng):
        theta = rng.normal(size=(2, 7))
        mu = Tensor(rng.normal(size=(2, 7)), requires_grad=True)
        s = Tensor(rng.normal(size=(2, 7)), requires_grad=True)
        backward(uncertainty_loss(mu, s, theta))
        for p in (mu, s):
            fd = numeric_grad(lambda: uncertainty_loss(mu, s, theta), p)
            assert relative_error(p.grad, fd) <= 1e-4
