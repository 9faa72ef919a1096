"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable computation goes through :func:`apply_op`, which runs
the forward kernel for one of a fixed set of op kinds and, when a
:class:`Tape` is active, appends a node holding whatever the backward kernel
needs.  :func:`backward` walks the tape in reverse and returns a map from
node id to gradient array.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = mul(x, x)
    >>> backward(y, tape)[x.node_id]
    array([6.])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "OPS",
    "apply_op",
    "backward",
    "grad_check",
    "add",
    "mul",
    "scale",
    "matmul",
    "conv2d",
    "silu",
    "softmax",
    "normalize",
    "reshape",
    "concat",
    "slice_",
    "embed_lookup",
    "sum_",
]


class ShapeError(ValueError):
    """Raised when an op receives inputs whose shapes it cannot combine."""


class Tensor:
    """A float64 array that can participate in a :class:`Tape`.

    ``node_id`` is only meaningful for the tape the tensor was last recorded
    on; a tensor reused on a fresh tape is re-registered there as a leaf.
    """

    __slots__ = ("data", "requires_grad", "_tape", "_node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._tape: Tape | None = None
        self._node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def node_id(self) -> int | None:
        return self._node_id

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    attrs: dict
    saved: Any
    shape: tuple[int, ...]
    requires_grad: bool


@dataclass
class Tape:
    """Append-only record of the ops executed while it is active.

    Use as a context manager; tapes nest, and only the innermost one records.
    A tape is meant for a single forward/backward pass.
    """

    nodes: list[Node] = field(default_factory=list)
    gradients: dict[int, np.ndarray] = field(default_factory=dict)
    # forward value of every node, read by the backward kernels
    values: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __enter__(self) -> "Tape":
        _active_tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _active_tapes()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape exited out of order")
        stack.pop()

    def node_of(self, tensor: Tensor) -> int:
        """Node id of ``tensor`` on this tape, registering it as a leaf if new."""
        if tensor._tape is self:
            return tensor._node_id
        self.nodes.append(Node("leaf", (), {}, None, tensor.shape, tensor.requires_grad))
        tensor._tape = self
        tensor._node_id = len(self.nodes) - 1
        self.values[tensor._node_id] = tensor.data
        return tensor._node_id

    def grad(self, tensor: Tensor) -> np.ndarray:
        """Gradient for ``tensor`` after :func:`backward`; zeros if unreached."""
        if tensor._tape is self and tensor._node_id in self.gradients:
            return self.gradients[tensor._node_id]
        return np.zeros(tensor.shape)


_local = threading.local()


def _active_tapes() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape() -> Tape | None:
    stack = _active_tapes()
    return stack[-1] if stack else None


# --------------------------------------------------------------------------
# Op kernels.  Each forward returns (output array, saved); each backward
# receives (grad_out, input arrays, output, saved, attrs, needs) and returns
# a list with one gradient (or None) per input.
# --------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot combine shapes {a.shape} and {b.shape}") from None


def _add_fwd(xs, attrs):
    a, b = xs
    _broadcast_check("add", a, b)
    return a + b, None


def _add_bwd(g, xs, out, saved, attrs, needs):
    a, b = xs
    return [
        _unbroadcast(g, a.shape) if needs[0] else None,
        _unbroadcast(g, b.shape) if needs[1] else None,
    ]


def _mul_fwd(xs, attrs):
    a, b = xs
    _broadcast_check("mul", a, b)
    return a * b, None


def _mul_bwd(g, xs, out, saved, attrs, needs):
    a, b = xs
    return [
        _unbroadcast(g * b, a.shape) if needs[0] else None,
        _unbroadcast(g * a, b.shape) if needs[1] else None,
    ]


def _scale_fwd(xs, attrs):
    return xs[0] * attrs["factor"], None


def _scale_bwd(g, xs, out, saved, attrs, needs):
    return [g * attrs["factor"]]


def _t(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def _matmul_fwd(xs, attrs):
    a, b = xs
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    a2 = _t(a) if attrs.get("transpose_a") else a
    b2 = _t(b) if attrs.get("transpose_b") else b
    if a2.shape[-1] != b2.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a2.shape[:-2], b2.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions differ for shapes {a.shape} and {b.shape}") from None
    return a2 @ b2, None


def _matmul_bwd(g, xs, out, saved, attrs, needs):
    a, b = xs
    ta, tb = attrs.get("transpose_a", False), attrs.get("transpose_b", False)
    a2 = _t(a) if ta else a
    b2 = _t(b) if tb else b
    ga = gb = None
    if needs[0]:
        # d(op(A)) = G op(B)^T, and dA is its transpose when A was transposed
        ga = b2 @ _t(g) if ta else g @ _t(b2)
        ga = _unbroadcast(ga, a.shape)
    if needs[1]:
        gb = _t(g) @ a2 if tb else _t(a2) @ g
        gb = _unbroadcast(gb, b.shape)
    return [ga, gb]


def _conv_geometry(x, w, stride, padding):
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    return n, cin, h, wd, cout, kh, kw, ho, wo


def _im2col(xp, kh, kw, ho, wo, stride):
    """Patches as a (cin*kh*kw, n*ho*wo) matrix."""
    n, cin = xp.shape[:2]
    cols = np.empty((cin, kh, kw, n, ho, wo))
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(cin * kh * kw, n * ho * wo)


def _conv2d_fwd(xs, attrs):
    x, w = xs
    stride = attrs.get("stride", 1)
    padding = attrs.get("padding", 0)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input channels differ for shapes {x.shape} and {w.shape}")
    n, cin, h, wd, cout, kh, kw, ho, wo = _conv_geometry(x, w, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel larger than padded input for shapes {x.shape} and {w.shape}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _im2col(xp, kh, kw, ho, wo, stride)
    out = w.reshape(cout, -1) @ cols
    out = out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols


def _conv2d_bwd(g, xs, out, cols, attrs, needs):
    x, w = xs
    stride = attrs.get("stride", 1)
    padding = attrs.get("padding", 0)
    n, cin, h, wd, cout, kh, kw, ho, wo = _conv_geometry(x, w, stride, padding)
    g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
    gx = gw = None
    if needs[1]:
        gw = (g2 @ cols.T).reshape(w.shape)
    if needs[0]:
        dcols = (w.reshape(cout, -1).T @ g2).reshape(cin, kh, kw, n, ho, wo)
        dxp = np.zeros((cin, n, h + 2 * padding, wd + 2 * padding))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
        dxp = dxp[:, :, padding : padding + h, padding : padding + wd]
        gx = np.ascontiguousarray(dxp.transpose(1, 0, 2, 3))
    return [gx, gw]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu_fwd(xs, attrs):
    s = _sigmoid(xs[0])
    return xs[0] * s, s


def _silu_bwd(g, xs, out, s, attrs, needs):
    x = xs[0]
    return [g * (s + x * s * (1.0 - s))]


def _softmax_fwd(xs, attrs):
    axis = attrs.get("axis", -1)
    x = xs[0]
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True), None


def _softmax_bwd(g, xs, y, saved, attrs, needs):
    axis = attrs.get("axis", -1)
    return [y * (g - (g * y).sum(axis=axis, keepdims=True))]


def _normalize_fwd(xs, attrs):
    x = xs[0]
    groups = attrs["group_count"]
    eps = attrs.get("epsilon", 1e-5)
    if x.ndim < 2 or x.shape[1] % groups:
        raise ShapeError(f"normalize: {groups} groups do not divide channels of shape {x.shape}")
    xg = x.reshape(x.shape[0], groups, -1)
    centered = xg - xg.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    y = centered * inv_std
    return y.reshape(x.shape), (y, inv_std)


def _normalize_bwd(g, xs, out, saved, attrs, needs):
    y, inv_std = saved
    gg = g.reshape(y.shape)
    dx = inv_std * (gg - gg.mean(axis=-1, keepdims=True) - y * (gg * y).mean(axis=-1, keepdims=True))
    return [dx.reshape(xs[0].shape)]


def _reshape_fwd(xs, attrs):
    x = xs[0]
    shape = tuple(attrs["shape"])
    try:
        return x.reshape(shape), None
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None


def _reshape_bwd(g, xs, out, saved, attrs, needs):
    return [g.reshape(xs[0].shape)]


def _concat_fwd(xs, attrs):
    axis = attrs.get("axis", 0)
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(
            a != b for k, (a, b) in enumerate(zip(ref, x.shape)) if k != axis % len(ref)
        ):
            raise ShapeError(f"concat: shapes {ref} and {x.shape} differ off axis {axis}")
    return np.concatenate(xs, axis=axis), None


def _concat_bwd(g, xs, out, saved, attrs, needs):
    axis = attrs.get("axis", 0)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    parts = np.split(g, bounds, axis=axis)
    return [p if need else None for p, need in zip(parts, needs)]


def _slice_index(shape, attrs):
    axis = attrs.get("axis", 0) % len(shape)
    idx = [slice(None)] * len(shape)
    idx[axis] = slice(attrs.get("start"), attrs.get("stop"), attrs.get("step"))
    return tuple(idx)


def _slice_fwd(xs, attrs):
    return xs[0][_slice_index(xs[0].shape, attrs)], None


def _slice_bwd(g, xs, out, saved, attrs, needs):
    full = np.zeros(xs[0].shape)
    full[_slice_index(xs[0].shape, attrs)] = g
    return [full]


def _embed_fwd(xs, attrs):
    table = xs[0]
    idx = np.asarray(attrs["indices"], dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embed_lookup: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embed_lookup: indices out of range for table of shape {table.shape}")
    return table[idx], idx


def _embed_bwd(g, xs, out, idx, attrs, needs):
    gt = np.zeros(xs[0].shape)
    np.add.at(gt, idx, g)
    return [gt]


def _sum_fwd(xs, attrs):
    axis = attrs.get("axis")
    if isinstance(axis, list):
        axis = tuple(axis)
    return np.asarray(xs[0].sum(axis=axis, keepdims=attrs.get("keepdims", False))), None


def _sum_bwd(g, xs, out, saved, attrs, needs):
    x = xs[0]
    axis = attrs.get("axis")
    if axis is not None and not attrs.get("keepdims", False):
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        g = np.expand_dims(g, tuple(a % x.ndim for a in axes))
    return [np.broadcast_to(g, x.shape).copy()]


OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (_add_fwd, _add_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "scale": (_scale_fwd, _scale_bwd),
    "matmul": (_matmul_fwd, _matmul_bwd),
    "conv2d": (_conv2d_fwd, _conv2d_bwd),
    "silu": (_silu_fwd, _silu_bwd),
    "softmax": (_softmax_fwd, _softmax_bwd),
    "normalize": (_normalize_fwd, _normalize_bwd),
    "reshape": (_reshape_fwd, _reshape_bwd),
    "concat": (_concat_fwd, _concat_bwd),
    "slice": (_slice_fwd, _slice_bwd),
    "embed_lookup": (_embed_fwd, _embed_bwd),
    "sum": (_sum_fwd, _sum_bwd),
}

_ARITY = {"add": 2, "mul": 2, "matmul": 2, "conv2d": 2}


def apply_op(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Run op ``kind`` on ``inputs`` and record it on the active tape, if any."""
    if kind not in OPS:
        raise ValueError(f"unknown op kind {kind!r}")
    attrs = dict(attrs or {})
    inputs = [_as_tensor(x) for x in inputs]
    want = _ARITY.get(kind, None if kind == "concat" else 1)
    if want is not None and len(inputs) != want:
        raise ValueError(f"{kind}: expected {want} inputs, got {len(inputs)}")
    if kind == "concat" and not inputs:
        raise ValueError("concat: needs at least one input")

    fwd, _ = OPS[kind]
    out_data, saved = fwd([x.data for x in inputs], attrs)
    requires_grad = any(x.requires_grad for x in inputs)
    out = Tensor(out_data, requires_grad=requires_grad)

    tape = current_tape()
    if tape is not None:
        ids = tuple(tape.node_of(x) for x in inputs)
        if not requires_grad:
            saved = None
        tape.nodes.append(Node(kind, ids, attrs, saved, out.shape, requires_grad))
        out._tape = tape
        out._node_id = len(tape.nodes) - 1
        tape.values[out._node_id] = out_data
    return out


def backward(root: Tensor, tape: Tape) -> dict[int, np.ndarray]:
    """Gradients of scalar ``root`` for every ancestor node on ``tape``."""
    if root.size != 1:
        raise ValueError(f"backward: root must be a scalar, got shape {root.shape}")
    if root._tape is not tape:
        raise ValueError("backward: root was not recorded on this tape")

    nodes = tape.nodes
    values = tape.values
    grads: dict[int, np.ndarray] = {root._node_id: np.ones(root.shape)}
    for nid in range(root._node_id, -1, -1):
        g = grads.get(nid)
        node = nodes[nid]
        if g is None or node.kind == "leaf" or not node.requires_grad:
            continue
        needs = [nodes[i].requires_grad for i in node.inputs]
        _, bwd = OPS[node.kind]
        xs = [values[i] for i in node.inputs]
        in_grads = bwd(g, xs, values.get(nid), node.saved, node.attrs, needs)
        for i, gi in zip(node.inputs, in_grads):
            if gi is None or not nodes[i].requires_grad:
                continue
            if gi.shape != nodes[i].shape:
                raise ShapeError(
                    f"{node.kind} backward: gradient shape {gi.shape} does not match input shape {nodes[i].shape}"
                )
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    tape.gradients = grads
    return grads


def grad_check(
    function: Callable[[list[Tensor]], Tensor],
    params: list[Tensor],
    step: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    The error for each entry is ``|a - n| / max(1, |a|, |n|)``.  ``function``
    must be deterministic; parameters are perturbed in place and restored.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for p in params:
        p.requires_grad = True
    with Tape() as tape:
        out = function(params)
    value = out.item()
    if not np.isfinite(value):
        raise ValueError("function value is not finite")
    grads = backward(out, tape)
    analytic = [grads.get(p.node_id, np.zeros(p.shape)) if p._tape is tape else np.zeros(p.shape)
                for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            f_plus = function(params).item()
            flat[k] = orig - step
            f_minus = function(params).item()
            flat[k] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise ValueError("function value is not finite")
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = abs(a_flat[k] - numeric) / max(1.0, abs(a_flat[k]), abs(numeric))
            worst = max(worst, err)
    return worst


# Convenience wrappers -------------------------------------------------------


def add(a, b) -> Tensor:
    return apply_op("add", [a, b])


def mul(a, b) -> Tensor:
    return apply_op("mul", [a, b])


def scale(a, factor: float) -> Tensor:
    return apply_op("scale", [a], {"factor": float(factor)})


def matmul(a, b, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    return apply_op("matmul", [a, b], {"transpose_a": transpose_a, "transpose_b": transpose_b})


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    return apply_op("conv2d", [x, w], {"stride": stride, "padding": padding})


def silu(x) -> Tensor:
    return apply_op("silu", [x])


def softmax(x, axis: int = -1) -> Tensor:
    return apply_op("softmax", [x], {"axis": axis})


def normalize(x, group_count: int, epsilon: float = 1e-5) -> Tensor:
    return apply_op("normalize", [x], {"group_count": group_count, "epsilon": epsilon})


def reshape(x, shape) -> Tensor:
    return apply_op("reshape", [x], {"shape": tuple(shape)})


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    return apply_op("concat", list(xs), {"axis": axis})


def slice_(x, axis: int, start=None, stop=None, step=None) -> Tensor:
    return apply_op("slice", [x], {"axis": axis, "start": start, "stop": stop, "step": step})


def embed_lookup(table, indices) -> Tensor:
    return apply_op("embed_lookup", [table], {"indices": np.asarray(indices, dtype=np.int64)})


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    return apply_op("sum", [x], {"axis": axis, "keepdims": keepdims})
