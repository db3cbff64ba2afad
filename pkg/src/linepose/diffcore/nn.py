"""Parameter containers: Module, Linear, MLP, multi-head attention."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Minimal parameter tree.

    Parameters are ``Tensor`` attributes with ``requires_grad``; children are
    ``Module`` attributes or lists of modules. Names are dotted paths in
    attribute-assignment order, which is stable for a given config.
    """

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, bias=True):
        self.weight = Tensor(xavier_uniform(rng, fan_in, fan_out), requires_grad=True)
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class MLP(Module):
    """Linear layers with relu between them (none after the last)."""

    def __init__(self, sizes, rng: np.random.Generator):
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x

    @property
    def last(self) -> Linear:
        return self.layers[-1]


class MultiHeadAttention(Module):
    """Scaled dot-product attention with ``heads`` heads of width D/heads.

    Queries come from ``xq``, keys and values from ``xkv``; the concatenated
    heads pass through an output projection.
    """

    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        if width % heads:
            raise ValueError(f"heads={heads} must divide width={width}")
        self.width = width
        self.heads = heads
        self.query = Linear(width, width, rng)
        # a key bias only shifts each query's logits uniformly: softmax ignores it
        self.key = Linear(width, width, rng, bias=False)
        self.value = Linear(width, width, rng)
        self.out = Linear(width, width, rng)

    def _split(self, x):
        b, n, _ = x.shape
        x = T.reshape(x, (b, n, self.heads, self.width // self.heads))
        return T.transpose(x, (0, 2, 1, 3))

    def attention(self, xq, xkv):
        """Return (B, h, n_q, n_k) attention weights."""
        # 1/sqrt(D_k) folded into the queries: cheaper than scaling (n x n) scores
        q = self._split(self.query(xq) * (1.0 / np.sqrt(self.width // self.heads)))
        k = self._split(self.key(xkv))
        return T.softmax(T.matmul(q, T.swapaxes(k, -1, -2)), axis=-1)

    def __call__(self, xq, xkv=None):
        if xkv is None:
            xkv = xq
        b, n, _ = xq.shape
        weights = self.attention(xq, xkv)
        v = self._split(self.value(xkv))
        msg = T.matmul(weights, v)
        msg = T.reshape(T.transpose(msg, (0, 2, 1, 3)), (b, n, self.width))
        return self.out(msg)


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(width), requires_grad=True)
        self.shift = Tensor(np.zeros(width), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        mu = T.mean(x, axis=-1, keepdims=True)
        centered = x - mu
        var = T.mean(centered * centered, axis=-1, keepdims=True)
        return centered * T.power(var + self.eps, -0.5) * self.gain + self.shift
