"""Categorical reparameterization: Gumbel noise, the softmax relaxation, and
exact Gumbel-Max sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

_UNIFORM_EPS = 1e-12


@dataclass
class CategoricalInput:
    """A categorical distribution as probabilities or unnormalized logits."""

    probs: np.ndarray
    normalized: bool = True
    tau: float = 1.0

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.normalized:
            if (self.probs < 0).any():
                raise ValueError("normalized input must be nonnegative")
            total = self.probs.sum()
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"normalized input sums to {total}, not 1")


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. Gumbel(0,1) noise via -log(-log u), u ~ Uniform(0,1)."""
    u = np.clip(rng.random(shape), _UNIFORM_EPS, 1.0 - _UNIFORM_EPS)
    return -np.log(-np.log(u))


def _log_scores(x: CategoricalInput, strict: bool) -> np.ndarray:
    if not x.normalized:
        return x.probs  # log is omitted for unnormalized logits
    zeros = np.flatnonzero(x.probs == 0.0)
    if zeros.size:
        if strict:
            raise ValueError(
                f"gumbel_softmax: zero probability at index {int(zeros[0])} "
                "has no defined log-gradient")
        with np.errstate(divide="ignore"):
            return np.log(x.probs)  # -inf rows lose all mass, as intended
    return np.log(x.probs)


def gumbel_softmax(x: CategoricalInput, noise: np.ndarray) -> Tensor:
    """Soft sample on the simplex: softmax((log x + g) / tau)."""
    logits = _log_scores(x, strict=True)
    scores = ad.constant(logits) + ad.constant(noise)
    return ad.softmax(ad.scalar_mul(scores, 1.0 / x.tau), axis=-1)


def gumbel_softmax_from_logit_tensor(logits: Tensor, noise: np.ndarray,
                                     tau: float) -> Tensor:
    """Differentiable relaxation over an unnormalized logit tensor."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    return ad.softmax(ad.scalar_mul(logits + ad.constant(noise), 1.0 / tau), axis=-1)


def gumbel_max(x: CategoricalInput, noise: np.ndarray) -> np.ndarray:
    """Exact one-hot sample: Onehot(argmax(log x + g)); ties -> lowest index."""
    scores = _log_scores(x, strict=False) + noise
    out = np.zeros_like(scores)
    out[int(np.argmax(scores))] = 1.0  # np.argmax takes the first maximum
    return out
