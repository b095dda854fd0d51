"""Neural network building blocks on top of :mod:`proprospin.tensor`.

Modules hold parameters as ``Tensor(requires_grad=True)`` attributes and are
discovered recursively, so ``parameters()`` and ``named_parameters()`` see a
stable, insertion-ordered view that the checkpoint format relies on.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import (
    DEFAULT_DTYPE,
    ShapeError,
    Tensor,
    add_bcast,
    layer_norm,
    matmul,
    softmax,
)


class Module:
    """Base class: parameter discovery, counting, and state load/store."""

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        self._collect("", out)
        return out

    def _collect(self, prefix: str, out: list[tuple[str, Tensor]]) -> None:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    out.append((path, value))
            elif isinstance(value, Module):
                value._collect(path + ".", out)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        item._collect(f"{path}.{i}.", out)
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out.append((f"{path}.{i}", item))

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = set(own) - set(state)
            extra = set(state) - set(own)
            raise KeyError(f"state dict mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=p.dtype)
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr


class Linear(Module):
    """y = x @ W + b with W shaped (in_dim, out_dim)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True, dtype=DEFAULT_DTYPE):
        bound = 1.0 / math.sqrt(in_dim)
        self.W = Tensor(rng.uniform(-bound, bound, (in_dim, out_dim)),
                        requires_grad=True, dtype=dtype)
        self.b = (Tensor(rng.uniform(-bound, bound, (out_dim,)),
                         requires_grad=True, dtype=dtype) if bias else None)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 2:
            y = matmul(x, self.W)
        else:
            # stacked input: fold leading dims into one batch axis
            lead = x.shape[:-1]
            y = matmul(x.reshape(-1, x.shape[-1]), self.W).reshape(*lead, self.W.shape[1])
        return add_bcast(y, self.b) if self.b is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=DEFAULT_DTYPE):
        self.gain = Tensor(np.ones(dim), requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(dim), requires_grad=True, dtype=dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


_ACTIVATIONS = {
    "elu": lambda t: t.elu(),
    "gelu": lambda t: t.gelu(),
    "tanh": lambda t: t.tanh(),
    "relu": lambda t: t.clip(0.0, float("inf")),
}


class MLP(Module):
    """Plain feedforward stack; activation applied between layers only."""

    def __init__(self, sizes: list[int], rng: np.random.Generator,
                 activation: str = "elu", dtype=DEFAULT_DTYPE):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.layers = [Linear(sizes[i], sizes[i + 1], rng, dtype=dtype)
                       for i in range(len(sizes) - 1)]
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        act = _ACTIVATIONS[self.activation]
        for layer in self.layers[:-1]:
            x = act(layer(x))
        return self.layers[-1](x)


class MultiheadSelfAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator,
                 dtype=DEFAULT_DTYPE):
        if d_model % n_heads != 0:
            raise ShapeError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.wq = Linear(d_model, d_model, rng, dtype=dtype)
        self.wk = Linear(d_model, d_model, rng, dtype=dtype)
        self.wv = Linear(d_model, d_model, rng, dtype=dtype)
        self.wo = Linear(d_model, d_model, rng, dtype=dtype)
        self.n_heads = n_heads
        self.d_head = d_model // n_heads

    def __call__(self, x: Tensor) -> Tensor:
        b, s, d = x.shape
        h, dk = self.n_heads, self.d_head

        def split(t: Tensor) -> Tensor:
            return t.reshape(b, s, h, dk).transpose((0, 2, 1, 3))

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        scores = matmul(q, k.transpose((0, 1, 3, 2))) * (1.0 / math.sqrt(dk))
        att = softmax(scores, axis=-1)
        self.last_attention = att.data  # (b, heads, s, s), inspection only
        ctx = matmul(att, v).transpose((0, 2, 1, 3)).reshape(b, s, d)
        return self.wo(ctx)


class TransformerBlock(Module):
    """Pre-norm encoder block: x + attn(ln(x)), then x + ff(ln(x))."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int,
                 rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.ln1 = LayerNorm(d_model, dtype=dtype)
        self.attn = MultiheadSelfAttention(d_model, n_heads, rng, dtype=dtype)
        self.ln2 = LayerNorm(d_model, dtype=dtype)
        self.ff1 = Linear(d_model, d_ff, rng, dtype=dtype)
        self.ff2 = Linear(d_ff, d_model, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.ff2(self.ff1(self.ln2(x)).gelu())


class LSTM(Module):
    """Single-layer LSTM; returns the final hidden state.

    Gate blocks are packed [input, forget, cell, output] along the last axis.
    """

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator,
                 dtype=DEFAULT_DTYPE):
        bound = 1.0 / math.sqrt(hidden)
        self.w_ih = Tensor(rng.uniform(-bound, bound, (in_dim, 4 * hidden)),
                           requires_grad=True, dtype=dtype)
        self.w_hh = Tensor(rng.uniform(-bound, bound, (hidden, 4 * hidden)),
                           requires_grad=True, dtype=dtype)
        self.bias = Tensor(rng.uniform(-bound, bound, (4 * hidden,)),
                           requires_grad=True, dtype=dtype)
        self.hidden = hidden

    def __call__(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        hdim = self.hidden
        h = Tensor(np.zeros((b, hdim)), dtype=x.dtype)
        c = Tensor(np.zeros((b, hdim)), dtype=x.dtype)
        for step in range(t):
            z = add_bcast(matmul(x[:, step, :], self.w_ih) + matmul(h, self.w_hh),
                          self.bias)
            i = z[:, 0 * hdim:1 * hdim].sigmoid()
            f = z[:, 1 * hdim:2 * hdim].sigmoid()
            g = z[:, 2 * hdim:3 * hdim].tanh()
            o = z[:, 3 * hdim:4 * hdim].sigmoid()
            c = f * c + i * g
            h = o * c.tanh()
        return h


def sinusoidal_positions(n: int, d: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Fixed position table: pe[p, 2i] = sin(p * w_i), pe[p, 2i+1] = cos(p * w_i)."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, i / d)
    pe = np.zeros((n, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, : pe[:, 1::2].shape[1]])
    return pe.astype(dtype)
