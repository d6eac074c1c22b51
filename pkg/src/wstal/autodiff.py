"""Dense float64 tensors with reverse-mode differentiation.

Covers exactly the operations the localization pipeline needs: 2-D matrix
products, axis softmax, pointwise nonlinearities, reductions with top-k
pooling, zero-padded row shifts (temporal convolution), and row gathering
(partition selection). Every forward result is checked for NaN/Inf.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Adam",
    "DimensionError",
    "NumericsError",
    "TrainingError",
    "backward",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "add_bias",
    "scale_rows",
    "absolute",
    "relu",
    "sigmoid",
    "softmax",
    "log_softmax",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "topk_mean",
    "gather_rows",
    "shift_rows",
    "reshape",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericsError(ArithmeticError):
    """An operation produced NaN or Inf."""


class TrainingError(RuntimeError):
    """Optimization cannot proceed (non-finite gradient or loss)."""


class Tensor:
    """Node in a dynamically built computation tape.

    ``data`` is always a float64 ndarray of rank 0..3. Values are treated
    as immutable once wrapped; gradients accumulate into ``grad`` during
    :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 3:
            raise DimensionError(f"rank {arr.ndim} tensor not supported")
        if not np.isfinite(arr).all():
            raise NumericsError("tensor initialized with non-finite values")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars on either side are allowed for add/sub/mul.
    def __add__(self, other):
        return add(self, _wrap(other, like=self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, like=self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Named trainable leaf."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.data.shape})"


def _wrap(x, like=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if like is not None and arr.ndim == 0 and like.data.ndim > 0:
        arr = np.full(like.data.shape, float(arr))
    return Tensor(arr)


def _node(data: np.ndarray, parents, backward_fn, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericsError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard 2-D matrix product."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul shapes {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _node(out_data, (a, b), backward_fn, "matmul")


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError("transpose expects a rank-2 tensor")

    def backward_fn(g):
        if x.requires_grad:
            _accumulate(x, g.T)

    return _node(x.data.T.copy(), (x,), backward_fn, "transpose")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add shapes {a.data.shape} vs {b.data.shape}")

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g)

    return _node(a.data + b.data, (a, b), backward_fn, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"sub shapes {a.data.shape} vs {b.data.shape}")

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, -g)

    return _node(a.data - b.data, (a, b), backward_fn, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise product of equal-shape tensors."""
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul shapes {a.data.shape} vs {b.data.shape}")

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _node(a.data * b.data, (a, b), backward_fn, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward_fn(g):
        if x.requires_grad:
            _accumulate(x, c * g)

    return _node(x.data * c, (x,), backward_fn, "scale")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a rank-1 bias to every row of a rank-2 tensor."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"add_bias shapes {x.data.shape} + {b.data.shape}")

    def backward_fn(g):
        if x.requires_grad:
            _accumulate(x, g)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=0))

    return _node(x.data + b.data[None, :], (x, b), backward_fn, "add_bias")


def scale_rows(x: Tensor, v: Tensor) -> Tensor:
    """Multiply row t of a rank-2 tensor by v[t]."""
    if x.data.ndim != 2 or v.data.ndim != 1 or x.data.shape[0] != v.data.shape[0]:
        raise DimensionError(f"scale_rows shapes {x.data.shape} * {v.data.shape}")

    def backward_fn(g):
        if x.requires_grad:
            _accumulate(x, g * v.data[:, None])
        if v.requires_grad:
            _accumulate(v, (g * x.data).sum(axis=1))

    return _node(x.data * v.data[:, None], (x, v), backward_fn, "scale_rows")


def absolute(x: Tensor) -> Tensor:
    """|x| with subgradient 0 at 0."""

    def backward_fn(g):
        if x.requires_grad:
            _accumulate(x, g * np.sign(x.data))

    return _node(np.abs(x.data), (x,), backward_fn, "abs")


def relu(x: Tensor) -> Tensor:
    def backward_fn(g):
        if x.requires_grad:
            _accumulate(x, g * (x.data > 0))

    return _node(np.maximum(x.data, 0.0), (x,), backward_fn, "relu")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)

    def backward_fn(g):
        if x.requires_grad:
            _accumulate(x, g * s * (1.0 - s))

    return _node(s, (x,), backward_fn, "sigmoid")


def _check_axis(x: Tensor, axis: int) -> int:
    if x.data.ndim == 0:
        raise DimensionError("axis operation on a scalar")
    if not -x.data.ndim <= axis < x.data.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {x.data.ndim}")
    axis = axis % x.data.ndim
    if x.data.shape[axis] == 0:
        raise DimensionError(f"axis {axis} is empty")
    return axis


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``; rows sum to 1."""
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        if x.requires_grad:
            _accumulate(x, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _node(s, (x,), backward_fn, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward_fn(g):
        if x.requires_grad:
            _accumulate(x, g - np.exp(ls) * g.sum(axis=axis, keepdims=True))

    return _node(ls, (x,), backward_fn, "log_softmax")


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        def backward_fn(g):
            if x.requires_grad:
                _accumulate(x, np.full(x.data.shape, float(g)))

        return _node(np.asarray(x.data.sum()), (x,), backward_fn, "sum")

    axis = _check_axis(x, axis)

    def backward_fn(g):
        if x.requires_grad:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy())

    return _node(x.data.sum(axis=axis), (x,), backward_fn, "sum")


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[_check_axis(x, axis)]
    return scale(reduce_sum(x, axis), 1.0 / n)


def reduce_max(x: Tensor, axis: int) -> Tensor:
    """Max along ``axis``; gradient routes to the lowest-index maximum."""
    axis = _check_axis(x, axis)
    idx = np.argmax(x.data, axis=axis)
    out_data = np.max(x.data, axis=axis)

    def backward_fn(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.put_along_axis(
                gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis
            )
            _accumulate(x, gx)

    return _node(out_data, (x,), backward_fn, "max")


def topk_mean(x: Tensor, k: int, axis: int = 0) -> Tensor:
    """Mean of the k largest entries along ``axis``, ties by lowest index."""
    axis = _check_axis(x, axis)
    if not 1 <= k <= x.data.shape[axis]:
        raise DimensionError(f"k={k} out of range for extent {x.data.shape[axis]}")
    order = np.argsort(-x.data, axis=axis, kind="stable")
    sel = np.take(order, np.arange(k), axis=axis)
    out_data = np.take_along_axis(x.data, sel, axis=axis).mean(axis=axis)

    def backward_fn(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.put_along_axis(
                gx,
                sel,
                np.broadcast_to(np.expand_dims(g / k, axis), sel.shape),
                axis=axis,
            )
            _accumulate(x, gx)

    return _node(out_data, (x,), backward_fn, "topk_mean")


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows of a rank-2 tensor; gradient scatters back."""
    if x.data.ndim != 2:
        raise DimensionError("gather_rows expects a rank-2 tensor")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise DimensionError("gather_rows needs a non-empty index vector")
    if idx.min() < 0 or idx.max() >= x.data.shape[0]:
        raise DimensionError("gather_rows index out of range")

    def backward_fn(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            _accumulate(x, gx)

    return _node(x.data[idx].copy(), (x,), backward_fn, "gather_rows")


def shift_rows(x: Tensor, offset: int) -> Tensor:
    """Shift rows by ``offset`` (positive = down), zero-filling the gap."""
    if x.data.ndim != 2:
        raise DimensionError("shift_rows expects a rank-2 tensor")
    out_data = np.zeros_like(x.data)
    t = x.data.shape[0]
    if abs(offset) < t:
        if offset >= 0:
            out_data[offset:] = x.data[: t - offset]
        else:
            out_data[: t + offset] = x.data[-offset:]

    def backward_fn(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            if abs(offset) < t:
                if offset >= 0:
                    gx[: t - offset] = g[offset:]
                else:
                    gx[-offset:] = g[: t + offset]
            _accumulate(x, gx)

    return _node(out_data, (x,), backward_fn, "shift_rows")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.intp)) != x.data.size:
        raise DimensionError(f"cannot reshape {x.data.shape} to {shape}")

    def backward_fn(g):
        if x.requires_grad:
            _accumulate(x, g.reshape(x.data.shape))

    return _node(x.data.reshape(shape).copy(), (x,), backward_fn, "reshape")


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable ``requires_grad`` tensor.

    The tape is walked in reverse topological order exactly once; the
    traversal is deterministic for identical graphs.
    """
    if loss.data.ndim != 0:
        raise DimensionError("backward expects a scalar loss")
    if not np.isfinite(loss.data):
        raise NumericsError("backward on a non-finite loss")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


class Adam:
    """Adam with bias correction over a fixed parameter list."""

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.isfinite(g).all():
                name = getattr(p, "name", f"param{i}")
                raise TrainingError(f"non-finite gradient for parameter '{name}'")
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * g * g
            m_hat = self._m[i] / (1.0 - self.beta1**t)
            v_hat = self._v[i] / (1.0 - self.beta2**t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self):
        """Optimizer state as (m, v, step) for checkpointing."""
        return self._m, self._v, self.step_count
