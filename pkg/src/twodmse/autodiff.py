"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a C-contiguous ``float64`` numpy array. Operations
executed while a :class:`Tape` is active record backward rules onto it in
execution order; :func:`backward` then replays the tape in reverse, which is
a valid reverse topological order by construction. With no active tape the
same operations run as plain numpy (inference mode, nothing recorded).

Everything is 64-bit so gradients can be checked tightly against central
finite differences.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

LAYER_NORM_EPS = 1e-5
# Additive mask value: finite (no Inf may enter forward data), but large
# enough that exp(x - max) underflows to exactly 0.0 after stabilization.
MASK_VALUE = -1e30


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Dense multi-dimensional float64 array, optionally on the gradient tape.

    ``data`` is always C-contiguous (row-major), so the flat buffer length
    equals the product of ``shape``. ``grad`` is either ``None`` or an array
    of the same shape; it accumulates across backward calls until the caller
    zeroes it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A view of the same data that is off the tape and grad-free."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalars and arrays are wrapped as constants.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)


class _Node:
    """One recorded operation: inputs, output, and its backward rule."""

    __slots__ = ("inputs", "output", "backward_fn", "name")

    def __init__(self, inputs, output, backward_fn, name):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.name = name


class Tape:
    """Ordered record of operations from one forward pass.

    Nodes are appended in execution order, so every node's inputs were
    recorded (or are leaves) before the node itself: the list is already
    topologically sorted and reverse iteration visits each node exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _push_tape(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _pop_tape(self)

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE_STACK: list[Tape] = []


def _push_tape(tape: Tape) -> None:
    _TAPE_STACK.append(tape)


def _pop_tape(tape: Tape) -> None:
    if not _TAPE_STACK or _TAPE_STACK[-1] is not tape:
        raise RuntimeError("tape stack corrupted: exiting a tape that is not active")
    _TAPE_STACK.pop()


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextmanager
def no_grad():
    """Temporarily disable recording (inference mode)."""
    saved = list(_TAPE_STACK)
    _TAPE_STACK.clear()
    try:
        yield
    finally:
        _TAPE_STACK.extend(saved)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _record(name, inputs, out_data, backward_fn) -> Tensor:
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad)
    if needs_grad:
        out._tape = tape
        tape.nodes.append(_Node(tuple(inputs), out, backward_fn, name))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Populate ``grad`` for every requires_grad tensor reachable from `loss`.

    Gradients accumulate; callers zero them between optimization steps.
    """
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ValueError("loss is not on a tape; run the forward pass inside `with Tape():`")
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(tape.nodes):
        g_out = node.output.grad
        if g_out is None:
            continue
        grads = node.backward_fn(g_out)
        for inp, g in zip(node.inputs, grads):
            if g is not None and inp.requires_grad:
                inp.accumulate_grad(g)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. `a` may carry leading batch axes; `b` is either a
    plain matrix (shared weight) or batched identically to `a`."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2 and a.ndim > 2:
            k, n = b.shape
            gb = np.matmul(
                a.data.reshape(-1, k).T, g.reshape(-1, n)
            )
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _record("matmul", (a, b), out, bw)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inv = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _record("transpose", (a,), np.transpose(a.data, axes), bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bw(g):
        return (g.reshape(a.shape),)

    return _record("reshape", (a,), a.data.reshape(shape), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), a.data + b.data, bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", (a, b), a.data - b.data, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", (a, b), a.data * b.data, bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        return (g * c,)

    return _record("scale", (a,), a.data * c, bw)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner),)

    return _record("gelu", (a,), out, bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({n},), got {gain.shape} and {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    out = gain.data * x_hat + bias.data

    def bw(g):
        g_hat = g * gain.data
        # d/dx of (x - mu(x)) / sqrt(var(x) + eps)
        gx = inv_std * (
            g_hat
            - g_hat.mean(axis=-1, keepdims=True)
            - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True)
        )
        axes = tuple(range(g.ndim - 1))
        return gx, (g * x_hat).sum(axis=axes), g.sum(axis=axes)

    return _record("layer_norm", (x, gain, bias), out, bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along `axis`."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax", (x,), out, bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", (x,), out, bw)


def slice_prefix(x: Tensor, d: int) -> Tensor:
    """First `d` components along the last axis; backward scatters into the
    prefix positions only."""
    full = x.shape[-1]
    if not 1 <= d <= full:
        raise ShapeError(f"slice_prefix dim {d} out of range [1, {full}]")
    out = x.data[..., :d].copy()

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[..., :d] = g
        return (gx,)

    return _record("slice_prefix", (x,), out, bw)


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ValueError("concat requires at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", tuple(tensors), out, bw)


def gather_rows(table: Tensor, indices) -> Tensor:
    """Row lookup `table[indices]`; backward scatter-adds into those rows."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("gather_rows indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"gather_rows index out of range [0, {table.shape[0]}): "
            f"[{idx.min()}, {idx.max()}]"
        )
    out = table.data[idx]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record("gather_rows", (table,), out, bw)


def select_position(x: Tensor, pos: int) -> Tensor:
    """Pick one position along axis 1 of a [batch, seq, dim] tensor."""
    if x.ndim != 3:
        raise ShapeError(f"select_position expects a 3-d tensor, got {x.shape}")
    if not 0 <= pos < x.shape[1]:
        raise IndexError(f"position {pos} out of range [0, {x.shape[1]})")
    out = x.data[:, pos, :].copy()

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[:, pos, :] = g
        return (gx,)

    return _record("select_position", (x,), out, bw)


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.full_like(x.data, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _record("sum", (x,), out, bw)


def tmean(x: Tensor, axis: int | None = None) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    out = x.data.mean(axis=axis)

    def bw(g):
        if axis is None:
            return (np.full_like(x.data, float(g) / count),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape) / count,)

    return _record("mean", (x,), out, bw)


def _check_nonzero_rows(norms: np.ndarray, op: str) -> None:
    if np.any(norms == 0.0):
        raise ValueError(f"{op}: zero-norm vector (cosine undefined)")


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """Row-wise cosine similarity of two [batch, dim] tensors (or two
    vectors, giving a scalar). Zero-norm rows are an error."""
    if u.shape != v.shape:
        raise ShapeError(f"cosine_similarity shapes disagree: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u.data, axis=-1)
    nv = np.linalg.norm(v.data, axis=-1)
    _check_nonzero_rows(nu, "cosine_similarity")
    _check_nonzero_rows(nv, "cosine_similarity")
    dot = (u.data * v.data).sum(axis=-1)
    out = dot / (nu * nv)

    def bw(g):
        ge = np.expand_dims(g, -1)
        nu_e = np.expand_dims(nu, -1)
        nv_e = np.expand_dims(nv, -1)
        c_e = np.expand_dims(out, -1)
        gu = ge * (v.data / (nu_e * nv_e) - c_e * u.data / nu_e**2)
        gv = ge * (u.data / (nu_e * nv_e) - c_e * v.data / nv_e**2)
        return gu, gv

    return _record("cosine_similarity", (u, v), out, bw)


def l2_normalize(x: Tensor) -> Tensor:
    """Scale each row of a [batch, dim] tensor to unit Euclidean norm."""
    if x.ndim != 2:
        raise ShapeError(f"l2_normalize expects a 2-d tensor, got {x.shape}")
    norms = np.linalg.norm(x.data, axis=-1, keepdims=True)
    _check_nonzero_rows(norms, "l2_normalize")
    y = x.data / norms

    def bw(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norms,)

    return _record("l2_normalize", (x,), y, bw)
