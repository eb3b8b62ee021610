"""Reverse-mode autodiff over float64 numpy buffers.

Tensors wrap C-contiguous float64 arrays and record the producing op and its
parents; `backward` walks the graph once in reverse topological order and
accumulates gradients additively, so a tensor feeding several consumers
receives the sum of all path gradients. Forward values are never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeMismatchError(ValueError):
    """Incompatible operand shapes, tagged with the offending op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        described = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {described}")


class AxisOutOfRangeError(ValueError):
    def __init__(self, op: str, axis: int, ndim: int):
        super().__init__(f"{op}: axis {axis} out of range for {ndim}-d input")


class NonScalarLossError(ValueError):
    def __init__(self, shape):
        super().__init__(f"backward requires a scalar loss, got shape {tuple(shape)}")


def _as_f64(data) -> np.ndarray:
    if isinstance(data, np.ndarray) and data.dtype == np.float64:
        return data
    return np.asarray(data, dtype=np.float64)


class Tensor:
    """A node in the computation graph: value, optional grad, parent links."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backprop")

    def __init__(self, data, requires_grad: bool = False, parents=(), op: str = "leaf"):
        self.data = _as_f64(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backprop = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def accumulate_grad(self, g: np.ndarray):
        self.grad = g if self.grad is None else self.grad + g

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # Operator sugar; everything routes through the module-level primitives.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, other)

    def __rmul__(self, other):
        return scalar_mul(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self)


def constant(data) -> Tensor:
    """A graph leaf that never receives gradient."""
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    """A learnable graph leaf."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, op="param")


def _make(data, parents, op, backprop) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, parents=parents, op=op)
    if requires:
        out._backprop = backprop
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    if a.data.shape == b.data.shape:
        return
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape) from None


def _norm_axis(op: str, axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise AxisOutOfRangeError(op, axis, ndim)
    return axis % ndim


# ---------------------------------------------------------------------------
# elementwise / broadcast arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def bp(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", bp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)

    def bp(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), "sub", bp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)

    def bp(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", bp)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bp(g):
        a.accumulate_grad(g * c)

    return _make(a.data * c, (a,), "scalar_mul", bp)


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def bp(g):
        a.accumulate_grad(g * (a.data > 0.0))

    return _make(out_data, (a,), "relu", bp)


def sigmoid(a: Tensor) -> Tensor:
    # exp(min(x,0)) / (1 + exp(-|x|)) is overflow-safe for both signs.
    x = a.data
    out_data = np.exp(np.minimum(x, 0.0)) / (1.0 + np.exp(-np.abs(x)))

    def bp(g):
        a.accumulate_grad(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), "sigmoid", bp)


def log(a: Tensor) -> Tensor:
    def bp(g):
        a.accumulate_grad(g / a.data)

    return _make(np.log(a.data), (a,), "log", bp)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bp(g):
        a.accumulate_grad(g * out_data)

    return _make(out_data, (a,), "exp", bp)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_reduce_axes(op, axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        return (_norm_axis(op, axis, ndim),)
    return tuple(_norm_axis(op, ax, ndim) for ax in axis)


def _expand_reduced(g, in_shape, axes, keepdims):
    if axes is None:
        return np.broadcast_to(g, in_shape)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, in_shape)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_reduce_axes("sum", axis, a.ndim)

    def bp(g):
        a.accumulate_grad(_expand_reduced(g, a.shape, axes, keepdims).copy())

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), "sum", bp)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_reduce_axes("mean", axis, a.ndim)
    count = a.data.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))

    def bp(g):
        a.accumulate_grad(_expand_reduced(g, a.shape, axes, keepdims) / count)

    return _make(a.data.mean(axis=axes, keepdims=keepdims), (a,), "mean", bp)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    def bp(g):
        a.accumulate_grad(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), "reshape", bp)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is not None:
        axes = tuple(_norm_axis("transpose", ax, a.ndim) for ax in axes)
        inverse = tuple(np.argsort(axes))
    else:
        inverse = None

    def bp(g):
        a.accumulate_grad(g.transpose(inverse) if inverse is not None else g.transpose())

    return _make(a.data.transpose(axes) if axes is not None else a.data.transpose(),
                 (a,), "transpose", bp)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ndim = tensors[0].ndim
    axis = _norm_axis("concat", axis, ndim)
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            i != axis and t.shape[i] != tensors[0].shape[i] for i in range(ndim)
        ):
            raise ShapeMismatchError("concat", tensors[0].shape, t.shape)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bp(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), "concat", bp)


def tslice(a: Tensor, key) -> Tensor:
    """Basic slicing (slices/ints per axis); gradient scatters into zeros."""
    out_data = a.data[key]

    def bp(g):
        full = np.zeros_like(a.data)
        full[key] = g
        a.accumulate_grad(full)

    return _make(out_data, (a,), "slice", bp)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatchError("matmul", a.shape, b.shape) from None

    def bp(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), "matmul", bp)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map along the last axis: x @ weight + bias, x of shape
    (..., d_in) with any leading dims."""
    d_in, d_out = weight.data.shape if weight.data.ndim == 2 else (0, 0)
    if x.data.ndim < 2 or weight.data.ndim != 2 or x.data.shape[-1] != d_in:
        raise ShapeMismatchError("linear", x.shape, weight.shape)
    out_data = x.data @ weight.data
    if bias is not None:
        if bias.data.shape != (d_out,):
            raise ShapeMismatchError("linear", bias.shape, (d_out,))
        out_data = out_data + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bp(g):
        if x.requires_grad:
            x.accumulate_grad(g @ weight.data.T)
        if weight.requires_grad:
            weight.accumulate_grad(
                x.data.reshape(-1, d_in).T @ g.reshape(-1, d_out))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, d_out).sum(axis=0))

    return _make(out_data, parents, "linear", bp)


# ---------------------------------------------------------------------------
# normalizations
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis("softmax", axis, a.ndim)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bp(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a.accumulate_grad(out_data * (g - dot))

    return _make(out_data, (a,), "softmax", bp)


def layer_norm(a: Tensor, eps: float = 1e-5, gain: Tensor | None = None,
               shift: Tensor | None = None) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, with an optional
    fused elementwise affine (gain and shift of shape (d,))."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normed = xc * inv
    if gain is None:
        out_data = normed
        parents = (a,)
    else:
        if gain.data.shape != a.data.shape[-1:] or shift is None \
                or shift.data.shape != gain.data.shape:
            raise ShapeMismatchError("layer_norm", a.shape,
                                     gain.shape if gain is not None else ())
        out_data = normed * gain.data + shift.data
        parents = (a, gain, shift)

    def bp(g):
        g0 = g if gain is None else g * gain.data
        if a.requires_grad:
            gm = g0.mean(axis=-1, keepdims=True)
            gy = (g0 * normed).mean(axis=-1, keepdims=True)
            a.accumulate_grad(inv * (g0 - gm - normed * gy))
        if gain is not None and gain.requires_grad:
            d = gain.data.shape[0]
            gain.accumulate_grad((g * normed).reshape(-1, d).sum(axis=0))
        if shift is not None and shift.requires_grad:
            shift.accumulate_grad(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _make(out_data, parents, "layer_norm", bp)


# ---------------------------------------------------------------------------
# structured ops
# ---------------------------------------------------------------------------

def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """1D convolution along the leading (time) axis.

    x: (N, C_in) or (N,); weight: (k, C_in, C_out) or (k,); output length is
    floor((N + 2*padding - k) / stride) + 1.
    """
    squeeze = x.ndim == 1
    xd = x.data[:, None] if squeeze else x.data
    wd = weight.data.reshape(-1, 1, 1) if weight.ndim == 1 else weight.data
    if xd.ndim != 2 or wd.ndim != 3 or xd.shape[1] != wd.shape[1]:
        raise ShapeMismatchError("conv1d", x.shape, weight.shape)
    n, c_in = xd.shape
    k, _, c_out = wd.shape
    n_out = (n + 2 * padding - k) // stride + 1
    if n_out <= 0:
        raise ShapeMismatchError("conv1d", x.shape, weight.shape)

    xp = np.pad(xd, ((padding, padding), (0, 0))) if padding else xd
    win = np.arange(n_out)[:, None] * stride + np.arange(k)[None, :]
    cols = xp[win].reshape(n_out, k * c_in)
    out_data = cols @ wd.reshape(k * c_in, c_out)
    if bias is not None:
        out_data = out_data + bias.data
    if squeeze:
        out_data = out_data[:, 0]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bp(g):
        g2 = g[:, None] if squeeze else g
        if x.requires_grad:
            dcols = (g2 @ wd.reshape(k * c_in, c_out).T).reshape(n_out, k, c_in)
            dxp = np.zeros_like(xp)
            if stride >= k:
                dxp[win] = dcols  # non-overlapping windows: plain scatter
            else:
                np.add.at(dxp, win, dcols)
            dx = dxp[padding:padding + n] if padding else dxp
            x.accumulate_grad(dx[:, 0] if squeeze else dx)
        if weight.requires_grad:
            dw = (cols.T @ g2).reshape(k, c_in, c_out)
            weight.accumulate_grad(dw[:, 0, 0] if weight.ndim == 1 else dw)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g2.sum(axis=0))

    return _make(out_data, parents, "conv1d", bp)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeMismatchError("embedding_lookup", table.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding_lookup: id out of range for table of {table.shape[0]} rows"
        )

    def bp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table.accumulate_grad(full)

    return _make(table.data[ids], (table,), "embedding_lookup", bp)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

def backward(loss: Tensor):
    """Backpropagate d(loss)/d(leaf) into every reachable grad-requiring leaf."""
    if loss.shape != ():
        raise NonScalarLossError(loss.shape)
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.accumulate_grad(np.ones((), dtype=np.float64))
    for node in reversed(topo):
        if node._backprop is not None and node.grad is not None:
            node._backprop(node.grad)


# ---------------------------------------------------------------------------
# op-kind dispatch and gradient checking
# ---------------------------------------------------------------------------

PRIMITIVES = {
    "matmul": matmul,
    "transpose": transpose,
    "concat": concat,
    "softmax": softmax,
    "sigmoid": sigmoid,
    "log": log,
    "exp": exp,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar-mul": scalar_mul,
    "sum": tsum,
    "mean": tmean,
    "conv1d": conv1d,
    "linear": linear,
    "embedding-lookup": embedding_lookup,
    "slice": tslice,
    "relu": relu,
    "layer-norm": layer_norm,
    "reshape": reshape,
}


def primitive_forward(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name; unknown kinds raise KeyError."""
    try:
        fn = PRIMITIVES[op_kind]
    except KeyError:
        raise KeyError(f"unknown primitive op {op_kind!r}") from None
    return fn(*inputs, **kwargs)


@dataclass
class GradCheckReport:
    """Per-coordinate comparison of analytic gradient vs central differences."""

    passed: bool
    n_coords: int
    max_abs_diff: float
    worst_coord: tuple
    failures: list = field(default_factory=list)

    def __str__(self):
        state = "PASS" if self.passed else "FAIL"
        return (f"gradcheck {state}: {self.n_coords} coords, "
                f"max |analytic-fd| = {self.max_abs_diff:.3e} at {self.worst_coord}")


def finite_difference_check(f, x: Tensor, eps: float = 1e-5,
                            rtol: float = 1e-4, atol: float = 1e-7) -> GradCheckReport:
    """Compare analytic d f(x)/dx against central differences, coordinatewise.

    `f` must be a deterministic Tensor -> scalar Tensor function. A coordinate
    passes when |analytic - fd| <= max(atol, rtol * |fd|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x.grad = None
    out = f(x)
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    base = x.data.copy()
    max_diff, worst = 0.0, ()
    failures = []
    it = np.nditer(base, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        x.data[idx] = base[idx] + eps
        hi = float(f(x).data)
        x.data[idx] = base[idx] - eps
        lo = float(f(x).data)
        x.data[idx] = base[idx]
        fd = (hi - lo) / (2.0 * eps)
        diff = abs(analytic[idx] - fd)
        if diff > max_diff:
            max_diff, worst = diff, idx
        if diff > max(atol, rtol * abs(fd)):
            failures.append((idx, analytic[idx], fd, diff))
        it.iternext()
    return GradCheckReport(
        passed=not failures,
        n_coords=base.size,
        max_abs_diff=max_diff,
        worst_coord=worst,
        failures=failures,
    )
