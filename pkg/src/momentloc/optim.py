"""Adam with decoupled weight decay, global-norm gradient clipping, and the
linear learning-rate decay schedule."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class DivergenceError(RuntimeError):
    pass


def lr_schedule(epoch: int, total_epochs: int, base_lr: float) -> float:
    """base_lr * (1 - epoch/total_epochs), defined for 0 <= epoch <= total."""
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return base_lr * (1.0 - epoch / total_epochs)


def global_grad_norm(grads) -> float:
    total = 0.0
    for g in grads:
        total += float((g * g).sum())
    return float(np.sqrt(total))


def clip_gradients(grads, max_norm: float) -> float:
    """Scale gradients in place so the global norm never exceeds max_norm;
    returns the pre-clip norm."""
    norm = global_grad_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def adam_step(params, grads, state: dict, lr: float,
              weight_decay: float = 0.0, clip: float = 0.0) -> float:
    """One update over parallel lists of parameter tensors and gradients.

    state holds "t" plus per-index first/second moments; gradients are
    clipped by global norm first, weight decay is decoupled from the moments.
    Returns the pre-clip gradient norm.
    """
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in parameter {i}")
    state.setdefault("t", 0)
    state.setdefault("m", [np.zeros_like(p.data) for p in params])
    state.setdefault("v", [np.zeros_like(p.data) for p in params])
    norm = clip_gradients(grads, clip)
    state["t"] += 1
    t = state["t"]
    bias1 = 1.0 - ADAM_BETA1 ** t
    bias2 = 1.0 - ADAM_BETA2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        update = (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data = p.data - lr * update
    return norm


class AdamOptimizer:
    """Stateful wrapper binding named parameters to adam_step."""

    def __init__(self, named_params: list[tuple[str, Tensor]],
                 weight_decay: float = 0.0, clip: float = 0.0):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.weight_decay = weight_decay
        self.clip = clip
        self.state: dict = {}

    def step(self, lr: float) -> float:
        grads = []
        for name, p in zip(self.names, self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient in {name}")
            grads.append(np.array(g, dtype=np.float64))
        return adam_step(self.params, grads, self.state, lr,
                         self.weight_decay, self.clip)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_arrays(self):
        """(t, m list, v list) for checkpointing; empty before any step."""
        if not self.state:
            return 0, [], []
        return self.state["t"], self.state["m"], self.state["v"]

    def load_state(self, t: int, m_list, v_list):
        self.state = {"t": t, "m": [np.array(m) for m in m_list],
                      "v": [np.array(v) for v in v_list]}
