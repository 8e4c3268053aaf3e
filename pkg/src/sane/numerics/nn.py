"""Layers built on the autodiff engine: linear maps, layer norm, attention."""

from __future__ import annotations

import numpy as np

from . import autodiff as T
from .autodiff import Tensor


class Module:
    """Container that discovers parameters through its attributes.

    Parameters are named by attribute path (``encoder.0.attn.qkv.weight``),
    which is what the checkpoint container stores.
    """

    training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
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

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode=True):
        self.training = mode
        for value in vars(self).values():
            if isinstance(value, Module):
                value.train(mode)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        item.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param(arr, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, dtype=np.float32, std=None):
        std = std if std is not None else 1.0 / np.sqrt(d_in)
        self.weight = param(rng.normal(0.0, std, size=(d_in, d_out)), dtype)
        self.bias = param(np.zeros(d_out), dtype) if bias else None

    def forward(self, x):
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d, dtype=np.float32, eps=1e-5):
        self.gain = param(np.ones(d), dtype)
        self.bias = param(np.zeros(d), dtype)
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, n, d, rng, dtype=np.float32, std=0.02):
        self.table = param(rng.normal(0.0, std, size=(n, d)), dtype)

    @property
    def capacity(self):
        return self.table.shape[0]

    def forward(self, idx):
        return T.embedding(self.table, idx)


class MultiHeadAttention(Module):
    def __init__(self, d_model, heads, rng, dtype=np.float32):
        if d_model % heads:
            raise ValueError("d_model must be divisible by heads")
        self.heads = heads
        self.qkv = Linear(d_model, 3 * d_model, rng, dtype=dtype)
        self.out = Linear(d_model, d_model, rng, dtype=dtype)

    def forward(self, x):
        b, n, d = x.shape
        h = self.heads
        dh = d // h
        qkv = self.qkv(x).reshape(b, n, 3, h, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / np.sqrt(dh))
        att = T.softmax(scores, axis=-1)
        y = T.matmul(att, v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.out(y)


class TransformerBlock(Module):
    """Pre-norm block: attention then a GELU feed-forward, each residual."""

    def __init__(self, d_model, heads, rng, dtype=np.float32, ff_mult=4):
        self.ln1 = LayerNorm(d_model, dtype)
        self.attn = MultiHeadAttention(d_model, heads, rng, dtype)
        self.ln2 = LayerNorm(d_model, dtype)
        self.ff1 = Linear(d_model, ff_mult * d_model, rng, dtype=dtype)
        self.ff2 = Linear(ff_mult * d_model, d_model, rng, dtype=dtype,
                          std=1.0 / np.sqrt(ff_mult * d_model))

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.ff2(T.gelu(self.ff1(self.ln2(x))))
