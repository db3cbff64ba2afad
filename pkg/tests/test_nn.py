"""Modules, attention against explicit loops, Adam and the checkpoint file."""

import math

import numpy as np
import pytest

from linepose.diffcore import (
    MLP,
    Adam,
    AdamState,
    CheckpointError,
    Linear,
    MultiHeadAttention,
    Tensor,
    adam_step,
    backward,
    load_checkpoint,
    save_checkpoint,
)
from linepose.diffcore import ops as T
from linepose.diffcore.gradcheck import check_gradients, relative_error
from oracles import looped_attention


class TestModule:
    def test_named_parameters_order_and_state_roundtrip(self, rng):
        mlp = MLP([3, 4, 2], rng)
        names = [n for n, _ in mlp.named_parameters()]
        assert names == ["layers.0.weight", "layers.0.bias", "layers.1.weight", "layers.1.bias"]
        state = mlp.state_dict()
        other = MLP([3, 4, 2], np.random.default_rng(99))
        other.load_state_dict(state)
        x = Tensor(rng.normal(size=(5, 3)))
        np.testing.assert_array_equal(mlp(x).data, other(x).data)

    def test_load_state_dict_strict(self, rng):
        mlp = MLP([3, 4, 2], rng)
        state = mlp.state_dict()
        state.pop("layers.1.bias")
        with pytest.raises(KeyError):
            mlp.load_state_dict(state)
        bad = mlp.state_dict()
        bad["layers.0.bias"] = np.zeros(5)
        with pytest.raises(ValueError):
            mlp.load_state_dict(bad)

    def test_xavier_init_and_zero_bias(self):
        lin = Linear(30, 50, np.random.default_rng(0))
        limit = math.sqrt(6.0 / 80)
        assert np.abs(lin.weight.data).max() <= limit
        assert np.abs(lin.weight.data).max() > 0.8 * limit
        assert not lin.bias.data.any()

    def test_seeded_init_is_deterministic(self):
        a = MLP([4, 8, 8], np.random.default_rng(5)).state_dict()
        b = MLP([4, 8, 8], np.random.default_rng(5)).state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_relu_only_between_layers(self, rng):
        mlp = MLP([2, 3], rng)
        x = Tensor(-np.abs(rng.normal(size=(4, 2))) * 100)
        np.testing.assert_allclose(mlp(x).data, x.data @ mlp.last.weight.data)


class TestAttention:
    @pytest.mark.parametrize("n,D,h", [(5, 8, 2), (8, 8, 4), (3, 6, 1)])
    def test_self_attention_loop_oracle(self, n, D, h):
        rng = np.random.default_rng(n * 10 + h)
        att = MultiHeadAttention(D, h, rng)
        for p in att.parameters():
            p.data = rng.normal(size=p.shape)
        x = rng.normal(size=(n, D))
        fast = att(Tensor(x[None]))[0].data
        assert np.abs(fast - looped_attention(att, x, x)).max() <= 1e-10

    def test_cross_attention_loop_oracle(self, rng):
        att = MultiHeadAttention(8, 1, rng)
        for p in att.parameters():
            p.data = rng.normal(size=p.shape)
        xq, xkv = rng.normal(size=(4, 8)), rng.normal(size=(6, 8))
        fast = att(Tensor(xq[None]), Tensor(xkv[None]))[0].data
        assert np.abs(fast - looped_attention(att, xq, xkv)).max() <= 1e-10

    def test_rows_sum_to_one(self, rng):
        att = MultiHeadAttention(8, 4, rng)
        w = att.attention(Tensor(rng.normal(size=(2, 7, 8))), Tensor(rng.normal(size=(2, 5, 8)))).data
        assert w.shape == (2, 4, 7, 5)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)

    def test_heads_must_divide_width(self, rng):
        with pytest.raises(ValueError):
            MultiHeadAttention(6, 4, rng)

    def test_gradients(self, rng):
        att = MultiHeadAttention(4, 2, rng)
        x = Tensor(rng.normal(size=(1, 3, 4)))
        y = Tensor(rng.normal(size=(1, 5, 4)))
        results = check_gradients(lambda: T.sum(T.sigmoid(att(x, y))), att.named_parameters())
        assert max(r.rel_error for r in results) <= 1e-6


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = [np.array([1.0, -2.0])]
        adam_step(p, [np.zeros(2)], AdamState(lr=0.1))
        np.testing.assert_array_equal(p[0], [1.0, -2.0])

    def test_first_step_scalar_recurrence(self):
        p = [np.array([0.0])]
        state = AdamState(lr=0.1)
        adam_step(p, [np.array([1.0])], state)
        # m_hat = 1, v_hat = 1  ->  step = lr / (1 + eps)
        np.testing.assert_allclose(p[0], [-0.1 / (1.0 + 1e-8)], rtol=1e-15)

    def test_matches_reference_recurrence(self, rng):
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        w = np.array([0.3, -1.2])
        p = [w.copy()]
        state = AdamState(lr=lr)
        m = v = np.zeros(2)
        for t in range(1, 8):
            g = rng.normal(size=2)
            adam_step(p, [g], state)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w = w - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
            np.testing.assert_allclose(p[0], w, rtol=1e-13, atol=1e-15)
        assert state.step == 7

    def test_quadratic_bowl(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam([w], lr=0.05)
        for _ in range(200):
            opt.zero_grad()
            backward(T.sum(w * w))
            opt.step()
        assert abs(w.data[0]) < 1e-2

    def test_zero_lr_is_noop(self, rng):
        w = Tensor(rng.normal(size=3), requires_grad=True)
        before = w.data.copy()
        opt = Adam([w], lr=0.0)
        backward(T.sum(w * w))
        opt.step()
        np.testing.assert_array_equal(w.data, before)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step([np.zeros(2)], [np.zeros(3)], AdamState())


class TestCheckpoint:
    def test_roundtrip_at_float32(self, tmp_path, rng):
        params = {"a.weight": rng.normal(size=(3, 4)), "a.bias": rng.normal(size=4), "s": np.array(2.5)}
        path = tmp_path / "m.lpck"
        save_checkpoint(path, params, {"width": 4})
        loaded, header = load_checkpoint(path)
        assert header == {"width": 4}
        assert list(loaded) == list(params)
        for k in params:
            np.testing.assert_array_equal(loaded[k], params[k].astype(np.float32).astype(np.float64))

    def test_second_roundtrip_is_bit_identical(self, tmp_path, rng):
        save_checkpoint(tmp_path / "a", {"w": rng.normal(size=(5, 2))}, {})
        once, _ = load_checkpoint(tmp_path / "a")
        save_checkpoint(tmp_path / "b", once, {})
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_bad_magic_and_truncation(self, tmp_path, rng):
        (tmp_path / "x").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x")
        save_checkpoint(tmp_path / "y", {"w": rng.normal(size=(10,))}, {})
        raw = (tmp_path / "y").read_bytes()
        (tmp_path / "y").write_bytes(raw[:-8])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "y")


class TestGradcheckHarness:
    def test_relative_error_floor(self):
        assert relative_error(np.zeros(3), np.full(3, 1e-12)) < 1e-5
        assert relative_error(np.array([1.0, 0.0]), np.array([1.0, 1e-3])) == pytest.approx(1e-3)

    def test_corrupted_backward_is_caught(self, rng, monkeypatch):
        """Negative control: a wrong sigmoid derivative must fail the audit."""
        lin = Linear(3, 2, rng)
        x = Tensor(rng.normal(size=(4, 3)))
        loss = lambda: T.sum(T.sigmoid(lin(x)) * Tensor([1.0, -2.0]))  # noqa: E731
        good = check_gradients(loss, lin.named_parameters())
        assert max(r.rel_error for r in good) <= 1e-6

        real = T.sigmoid

        def broken(a):
            out = real(a)
            inner = out._backward
            out._backward = lambda g: [gg * 1.5 for gg in inner(g)]
            return out

        monkeypatch.setattr(T, "sigmoid", broken)
        bad = check_gradients(loss, lin.named_parameters())
        assert max(r.rel_error for r in bad) > 1e-4
