"""Layer building blocks on top of the autodiff engine.

Modules own their parameters (created from an explicit rng so construction is
reproducible) and expose them by hierarchical dotted name for the optimizer
and checkpoints. Dropout draws from an rng injected via `seed_dropout`.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Base class: parameter discovery, train/eval mode, dropout seeding."""

    training = False

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{prefix}{name}.{i}", item

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def seed_dropout(self, rng: np.random.Generator):
        for m in self.modules():
            if isinstance(m, Dropout):
                m.rng = rng
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = ad.parameter(xavier_uniform(rng, d_in, d_out))
        self.bias = ad.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = ad.parameter(np.ones(d))
        self.shift = ad.parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.eps, self.gain, self.shift)


class Dropout(Module):
    def __init__(self, rate: float):
        assert 0.0 <= rate < 1.0
        self.rate = rate
        self.rng: np.random.Generator | None = None

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training or self.rate == 0.0:
            return x
        if self.rng is None:
            raise RuntimeError("Dropout is in training mode but no rng was seeded")
        keep = (self.rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * ad.constant(keep)


class FeedForward(Module):
    """Two-layer relu MLP, the transformer position-wise feed-forward."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int,
                 rng: np.random.Generator, dropout: float = 0.0):
        self.inner = Linear(d_in, d_hidden, rng)
        self.outer = Linear(d_hidden, d_out, rng)
        self.drop = Dropout(dropout)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(self.drop(ad.relu(self.inner(x))))


class Embedding(Module):
    def __init__(self, n_tokens: int, d: int, rng: np.random.Generator, scale: float = 0.02):
        self.table = ad.parameter(rng.normal(0.0, scale, size=(n_tokens, d)))

    def __call__(self, ids) -> Tensor:
        return ad.embedding_lookup(self.table, ids)


@lru_cache(maxsize=128)
def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """Fixed positional encoding: even dims sin, odd dims cos. Cached and
    returned read-only; callers must not mutate."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    dim = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * (dim // 2) / d)
    pe = np.empty((n, d))
    pe[:, 0::2] = np.sin(angle[:, 0::2])
    pe[:, 1::2] = np.cos(angle[:, 1::2])
    pe.setflags(write=False)
    return pe


# When set to a list, every attention call appends its weight array; tests use
# this to audit row-stochasticity across block variants.
WEIGHT_TAP: list | None = None


class MultiHeadAttention(Module):
    """Scaled dot-product attention with per-head projections.

    Sequences are (len, d); an optional leading group axis (G, len, d) runs G
    independent attentions in one pass (keys may be shared, i.e. ungrouped,
    while queries are grouped)."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator,
                 dropout: float = 0.0):
        if d_model % n_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.proj_q = Linear(d_model, d_model, rng)
        self.proj_k = Linear(d_model, d_model, rng)
        self.proj_v = Linear(d_model, d_model, rng)
        self.proj_out = Linear(d_model, d_model, rng)
        self.attn_drop = Dropout(dropout)

    def _split(self, t: Tensor) -> Tensor:
        h, dk = self.n_heads, self.d_head
        if t.data.ndim == 2:
            return ad.transpose(ad.reshape(t, (t.data.shape[0], h, dk)), (1, 0, 2))
        g, length = t.data.shape[:2]
        return ad.transpose(ad.reshape(t, (g, length, h, dk)), (0, 2, 1, 3))

    def _merge(self, t: Tensor) -> Tensor:
        d = self.n_heads * self.d_head
        if t.data.ndim == 3:
            return ad.reshape(ad.transpose(t, (1, 0, 2)), (t.data.shape[1], d))
        g, _, length = t.data.shape[:3]
        return ad.reshape(ad.transpose(t, (0, 2, 1, 3)), (g, length, d))

    def __call__(self, q_seq: Tensor, k_seq: Tensor, v_seq: Tensor,
                 key_valid: np.ndarray | None = None, return_weights: bool = False):
        if k_seq.data.shape != v_seq.data.shape:
            raise ad.ShapeMismatchError("multi_head_attention", k_seq.shape, v_seq.shape)
        q = self._split(self.proj_q(q_seq))
        k = self._split(self.proj_k(k_seq))
        v = self._split(self.proj_v(v_seq))
        k_t = ad.transpose(k, (0, 2, 1) if k.data.ndim == 3 else (0, 1, 3, 2))
        scores = ad.scalar_mul(q @ k_t, 1.0 / np.sqrt(self.d_head))
        if key_valid is not None:
            scores = scores + ad.constant(np.where(key_valid, 0.0, -1e30))
        weights = ad.softmax(scores, axis=-1)
        if WEIGHT_TAP is not None:
            WEIGHT_TAP.append(weights.data)
        out = self._merge(self.attn_drop(weights) @ v)
        out = self.proj_out(out)
        if return_weights:
            return out, weights.data
        return out


# Differentiable composites used by losses and span arithmetic.

def absolute(x: Tensor) -> Tensor:
    return ad.relu(x) + ad.relu(-x)


def clamp01(x: Tensor) -> Tensor:
    """clamp(x, 0, 1); gradient is zero outside the interval."""
    return x - ad.relu(x - ad.constant(np.ones(x.shape))) + ad.relu(-x)


def clamp_range(x: Tensor, lo: float, hi: float) -> Tensor:
    lo_t = ad.constant(np.full(x.shape, lo))
    hi_t = ad.constant(np.full(x.shape, hi))
    return x - ad.relu(x - hi_t) + ad.relu(lo_t - x)


def power(x: Tensor, exponent: float) -> Tensor:
    """x ** exponent for x >= 0, via the smooth cases used by the losses."""
    if exponent == 0.0:
        return ad.constant(np.ones(x.shape))
    if exponent == 1.0:
        return x
    if exponent == 2.0:
        return x * x
    return ad.exp(ad.scalar_mul(ad.log(clamp_range(x, 1e-12, np.inf)), exponent))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log-softmax; the max shift is a constant."""
    shift = ad.constant(x.data.max(axis=axis, keepdims=True))
    centered = x - shift
    return centered - ad.log(ad.tsum(ad.exp(centered), axis=axis, keepdims=True))
