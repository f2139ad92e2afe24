"""Parameter containers and the pre-norm transformer block built on diffcore."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import diffcore as dc
from .diffcore import DTensor


class Module:
    """Minimal parameter tree.

    Attributes that are DTensors with ``track=True``, Modules, or lists/dicts
    of Modules are discovered by :meth:`named_parameters` in a deterministic
    (sorted attribute name) order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, DTensor]]:
        for name in sorted(vars(self)):
            value = getattr(self, name)
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self) -> list[DTensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, p in own.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise dc.DimensionError(f"{k}: checkpoint shape {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def _walk(value, name: str):
    if isinstance(value, DTensor):
        if value.track:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(value, dict):
        for k in sorted(value):
            yield from _walk(value[k], f"{name}.{k}")


def param(arr: np.ndarray, dtype) -> DTensor:
    return DTensor(np.asarray(arr, dtype=dtype), track=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32,
                 bias: bool = True):
        self.weight = param(rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, d_out)), dtype)
        self.bias = param(np.zeros(d_out), dtype) if bias else None

    def __call__(self, x: DTensor) -> DTensor:
        y = dc.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32, bias: bool = True):
        self.gain = param(np.ones(d), dtype)
        # without a bias the shift stays a fixed zero, not a parameter
        self.bias = param(np.zeros(d), dtype) if bias else DTensor(np.zeros(d, dtype=dtype))

    def __call__(self, x: DTensor) -> DTensor:
        return dc.layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(d, d, rng, dtype)
        # a key bias only shifts every score of a query by the same amount
        self.k = Linear(d, d, rng, dtype, bias=False)
        self.v = Linear(d, d, rng, dtype)
        self.out = Linear(d, d, rng, dtype)

    def _split(self, x: DTensor) -> DTensor:
        *lead, k, d = x.shape
        n = len(lead)
        x = dc.reshape(x, (*lead, k, self.heads, d // self.heads))
        return dc.transpose(x, (*range(n), n + 1, n, n + 2))

    def __call__(self, x: DTensor, mask=None) -> DTensor:
        *lead, k, d = x.shape
        n = len(lead)
        o = dc.attention(self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x)), mask)
        o = dc.transpose(o, (*range(n), n + 1, n, n + 2))
        return self.out(dc.reshape(o, (*lead, k, d)))


class TransformerLayer(Module):
    """Pre-norm block: ``x + attn(ln(x))`` then ``x + ffn(ln(x))``."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, ffn_mult: int = 2,
                 dtype=np.float32):
        self.ln1 = LayerNorm(d, dtype)
        self.attn = MultiHeadAttention(d, heads, rng, dtype)
        self.ln2 = LayerNorm(d, dtype)
        self.ff1 = Linear(d, ffn_mult * d, rng, dtype)
        self.ff2 = Linear(ffn_mult * d, d, rng, dtype)

    def __call__(self, x: DTensor, mask=None) -> DTensor:
        x = x + self.attn(self.ln1(x), mask)
        return x + self.ff2(dc.gelu(self.ff1(self.ln2(x))))


class TransformerStack(Module):
    def __init__(self, d: int, layers: int, heads: int, rng: np.random.Generator,
                 ffn_mult: int = 2, dtype=np.float32, final_bias: bool = True):
        self.layers = [TransformerLayer(d, heads, rng, ffn_mult, dtype) for _ in range(layers)]
        self.ln_f = LayerNorm(d, dtype, bias=final_bias)

    def __call__(self, x: DTensor, mask=None) -> DTensor:
        for layer in self.layers:
            x = layer(x, mask)
        return self.ln_f(x)
