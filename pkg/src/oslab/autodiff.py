"""Dense float64 tensors with a recording tape and reverse-mode gradients.

Usage::

    tape = Tape()
    with tape:
        y = reduce_sum(mul(x, x))
    grads = backward(tape, y)      # {"x": 2 * x.data}

Primitives never broadcast except ``scale`` (tensor times a Python scalar);
every other shape alignment is explicit.  Plain numpy arrays passed to a
primitive are treated as constants.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "TapeError",
    "Tensor",
    "Tape",
    "apply_primitive",
    "backward",
    "grad_check",
    "PRIMITIVES",
]


class ShapeError(ValueError):
    """Operand shapes do not fit the primitive's signature."""

    def __init__(self, op: str, shapes: Sequence[tuple], detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{op}: incompatible operand shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class TapeError(RuntimeError):
    pass


class Tensor:
    """Immutable float64 array, optionally a named leaf parameter."""

    __slots__ = ("data", "name", "_tape", "_index")

    def __init__(self, data: Any, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        arr.flags.writeable = False
        self.data = arr
        self.name = name
        self._tape: Tape | None = None
        self._index = -1

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.name = None
        t._tape = None
        t._index = -1
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    saved: Any
    attrs: dict


@dataclass
class Primitive:
    forward: Callable  # (arrays, **attrs) -> (out, saved)
    vjp: Callable  # (g, arrays, out, saved, **attrs) -> list of input grads (None = no grad)
    check: Callable | None = None  # (shapes, **attrs) -> None or raises ShapeError


PRIMITIVES: dict[str, Primitive] = {}

_active = threading.local()


def _current_tape() -> "Tape | None":
    stack = getattr(_active, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive applications, consumed by :func:`backward`."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        stack = getattr(_active, "stack", None)
        if stack is None:
            stack = _active.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: tuple, out: Tensor, saved: Any, attrs: dict) -> None:
        out._tape = self
        out._index = len(self.nodes)
        self.nodes.append(Node(op, inputs, out, saved, attrs))

    def replay(self) -> list[np.ndarray]:
        """Recompute every node's output from leaves, in recorded order."""
        values: dict[int, np.ndarray] = {}
        outs = []
        for node in self.nodes:
            arrays = [values.get(id(t), t.data) for t in node.inputs]
            out, _ = PRIMITIVES[node.op].forward(arrays, **node.attrs)
            values[id(node.output)] = out
            outs.append(out)
        return outs


# ---------------------------------------------------------------------------
# primitive application


def _as_tensor(x: Any) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def apply_primitive(op: str, inputs: Sequence[Any], **attrs) -> Tensor:
    try:
        prim = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    tensors = tuple(_as_tensor(x) for x in inputs)
    arrays = [t.data for t in tensors]
    if prim.check is not None:
        prim.check([a.shape for a in arrays], **attrs)
    out_arr, saved = prim.forward(arrays, **attrs)
    out = Tensor._wrap(out_arr)
    tape = _current_tape()
    if tape is not None and any(t.name is not None or t._tape is tape for t in tensors):
        tape.record(op, tensors, out, saved, attrs)
    return out


def _unbroadcast_check(op):
    def check(shapes, **_):
        if shapes[0] != shapes[1]:
            raise ShapeError(op, shapes, "operands must have identical shapes")

    return check


# matmul: (m,k)@(k,n) or batched (b,m,k)@(b,k,n)
def _matmul_check(shapes, **_):
    a, b = shapes
    if len(a) != len(b) or len(a) not in (2, 3):
        raise ShapeError("matmul", shapes, "need two 2-D or two 3-D operands")
    if a[-1] != b[-2] or (len(a) == 3 and a[0] != b[0]):
        raise ShapeError("matmul", shapes, "inner or batch extents differ")


def _matmul_fwd(arrays):
    a, b = arrays
    return a @ b, None


def _matmul_vjp(g, arrays, out, saved):
    a, b = arrays
    return [g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g]


PRIMITIVES["matmul"] = Primitive(_matmul_fwd, _matmul_vjp, _matmul_check)

PRIMITIVES["add"] = Primitive(
    lambda arrays: (arrays[0] + arrays[1], None),
    lambda g, arrays, out, saved: [g, g],
    _unbroadcast_check("add"),
)

PRIMITIVES["mul"] = Primitive(
    lambda arrays: (arrays[0] * arrays[1], None),
    lambda g, arrays, out, saved: [g * arrays[1], g * arrays[0]],
    _unbroadcast_check("mul"),
)


def _concat_check(shapes, axis):
    nd = len(shapes[0])
    ax = axis % nd
    for s in shapes:
        if len(s) != nd or any(s[i] != shapes[0][i] for i in range(nd) if i != ax):
            raise ShapeError("concat", shapes, f"extents must agree off axis {axis}")


def _concat_fwd(arrays, axis):
    return np.concatenate(arrays, axis=axis), [a.shape[axis] for a in arrays]


def _concat_vjp(g, arrays, out, sizes, axis):
    cuts = np.cumsum(sizes)[:-1]
    return list(np.split(g, cuts, axis=axis))


PRIMITIVES["concat"] = Primitive(_concat_fwd, _concat_vjp, _concat_check)


def _slice_fwd(arrays, key):
    return arrays[0][key].copy(), None


def _slice_vjp(g, arrays, out, saved, key):
    gx = np.zeros_like(arrays[0])
    gx[key] = g
    return [gx]


PRIMITIVES["slice"] = Primitive(_slice_fwd, _slice_vjp)


def _sigmoid_fwd(arrays):
    # tanh form is overflow-free for any finite input
    return 0.5 * (1.0 + np.tanh(0.5 * arrays[0])), None


PRIMITIVES["sigmoid"] = Primitive(
    _sigmoid_fwd, lambda g, arrays, out, saved: [g * out * (1.0 - out)]
)

PRIMITIVES["tanh"] = Primitive(
    lambda arrays: (np.tanh(arrays[0]), None),
    lambda g, arrays, out, saved: [g * (1.0 - out * out)],
)

PRIMITIVES["relu"] = Primitive(
    lambda arrays: (np.maximum(arrays[0], 0.0), None),
    lambda g, arrays, out, saved: [g * (arrays[0] > 0)],
)


def _log_softmax_fwd(arrays):
    x = arrays[0]
    shifted = x - x.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return out, None


def _log_softmax_vjp(g, arrays, out, saved):
    return [g - np.exp(out) * g.sum(axis=-1, keepdims=True)]


PRIMITIVES["log_softmax"] = Primitive(_log_softmax_fwd, _log_softmax_vjp)


def _softmax_fwd(arrays):
    x = arrays[0]
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True), None


def _softmax_vjp(g, arrays, out, saved):
    return [out * (g - (g * out).sum(axis=-1, keepdims=True))]


PRIMITIVES["softmax"] = Primitive(_softmax_fwd, _softmax_vjp)


def _embed_check(shapes, ids):
    if len(shapes[0]) != 2:
        raise ShapeError("embedding", shapes, "table must be 2-D")
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= shapes[0][0]):
        raise ShapeError("embedding", shapes, f"index out of range [0, {shapes[0][0]})")


def _embed_fwd(arrays, ids):
    return arrays[0][ids], None


def _embed_vjp(g, arrays, out, saved, ids):
    table = arrays[0]
    flat = np.asarray(ids).reshape(-1)
    gt = np.zeros_like(table)
    np.add.at(gt, flat, g.reshape(flat.size, table.shape[1]))
    return [gt]


PRIMITIVES["embedding"] = Primitive(_embed_fwd, _embed_vjp, _embed_check)


def _reduce_fwd(arrays, axis, mean):
    x = arrays[0]
    if axis is None:
        s = x.sum().reshape(1)
        return (s / x.size if mean else s), None
    s = x.sum(axis=axis)
    return (s / x.shape[axis] if mean else s), None


def _reduce_vjp(g, arrays, out, saved, axis, mean):
    x = arrays[0]
    if axis is None:
        n = x.size
        gx = np.full_like(x, g.reshape(-1)[0])
    else:
        n = x.shape[axis]
        gx = np.broadcast_to(np.expand_dims(g, axis), x.shape).copy()
    return [gx / n if mean else gx]


PRIMITIVES["reduce"] = Primitive(_reduce_fwd, _reduce_vjp)

PRIMITIVES["scale"] = Primitive(
    lambda arrays, c: (arrays[0] * c, None),
    lambda g, arrays, out, saved, c: [g * c],
)

PRIMITIVES["dropout"] = Primitive(
    lambda arrays: (arrays[0] * arrays[1], None),
    lambda g, arrays, out, saved: [g * arrays[1], None],
    _unbroadcast_check("dropout"),
)


def _reshape_check(shapes, shape):
    n = int(np.prod(shapes[0]))
    known = int(np.prod([d for d in shape if d != -1]))
    wild = sum(d == -1 for d in shape)
    if wild > 1 or (wild == 0 and known != n) or (wild == 1 and (known == 0 or n % known)):
        raise ShapeError("reshape", [shapes[0], tuple(shape)], "element counts differ")


PRIMITIVES["reshape"] = Primitive(
    lambda arrays, shape: (arrays[0].reshape(shape), None),
    lambda g, arrays, out, saved, shape: [g.reshape(arrays[0].shape)],
    _reshape_check,
)

PRIMITIVES["transpose"] = Primitive(
    lambda arrays: (np.ascontiguousarray(np.swapaxes(arrays[0], -1, -2)), None),
    lambda g, arrays, out, saved: [np.swapaxes(g, -1, -2)],
)


# ---------------------------------------------------------------------------
# friendly wrappers


def matmul(a, b) -> Tensor:
    return apply_primitive("matmul", (a, b))


def add(a, b) -> Tensor:
    return apply_primitive("add", (a, b))


def sub(a, b) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a, b) -> Tensor:
    return apply_primitive("mul", (a, b))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    return apply_primitive("concat", tuple(xs), axis=axis)


def slice_(x, key) -> Tensor:
    if not isinstance(key, tuple):
        key = (key,)
    return apply_primitive("slice", (x,), key=key)


def sigmoid(x) -> Tensor:
    return apply_primitive("sigmoid", (x,))


def tanh(x) -> Tensor:
    return apply_primitive("tanh", (x,))


def relu(x) -> Tensor:
    return apply_primitive("relu", (x,))


def log_softmax(x) -> Tensor:
    return apply_primitive("log_softmax", (x,))


def softmax(x) -> Tensor:
    return apply_primitive("softmax", (x,))


def embedding(table, ids) -> Tensor:
    return apply_primitive("embedding", (table,), ids=np.asarray(ids, dtype=np.int64))


def reduce_sum(x, axis: int | None = None) -> Tensor:
    return apply_primitive("reduce", (x,), axis=axis, mean=False)


def reduce_mean(x, axis: int | None = None) -> Tensor:
    return apply_primitive("reduce", (x,), axis=axis, mean=True)


def scale(x, c: float) -> Tensor:
    return apply_primitive("scale", (x,), c=float(c))


def dropout(x, mask) -> Tensor:
    return apply_primitive("dropout", (x, mask))


def reshape(x, shape) -> Tensor:
    return apply_primitive("reshape", (x,), shape=tuple(shape))


def transpose(x) -> Tensor:
    return apply_primitive("transpose", (x,))


# ---------------------------------------------------------------------------
# reverse pass


def backward(tape: Tape, output: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``output`` w.r.t. every named leaf that reaches it.

    The tape is consumed: a second call raises :class:`TapeError`.
    """
    if tape.consumed:
        raise TapeError("tape already consumed")
    if output.data.size != 1:
        raise TapeError(f"backward needs a scalar output, got shape {output.shape}")
    if output._tape is not tape:
        raise TapeError("output was not recorded on this tape (detached)")

    adj: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    grads: dict[str, np.ndarray] = {}
    for node in reversed(tape.nodes[: output._index + 1]):
        g = adj.pop(id(node.output), None)
        if g is None:
            continue
        arrays = [t.data for t in node.inputs]
        in_grads = PRIMITIVES[node.op].vjp(g, arrays, node.output.data, node.saved, **node.attrs)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None:
                continue
            if t._tape is tape:
                key = id(t)
                prev = adj.get(key)
                adj[key] = gi if prev is None else prev + gi
            elif t.name is not None:
                prev = grads.get(t.name)
                grads[t.name] = np.array(gi, dtype=np.float64) if prev is None else prev + gi
    tape.consumed = True
    tape.nodes = []
    return grads


def grad_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-6,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps the list of (named) parameter tensors to a scalar tensor.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    params = [p if p.name is not None else Tensor(p.data, name=f"p{i}") for i, p in enumerate(params)]
    tape = Tape()
    with tape:
        out = f(params)
    val = out.item()
    if not np.isfinite(val):
        raise FloatingPointError("f is not finite at params")
    if out._tape is tape:
        analytic = backward(tape, out)
    else:
        analytic = {}

    worst = 0.0
    for i, p in enumerate(params):
        base = p.data
        ga = analytic.get(p.name, np.zeros_like(base))
        for idx in np.ndindex(base.shape):
            up = base.copy()
            dn = base.copy()
            up[idx] += epsilon
            dn[idx] -= epsilon
            fu = f([Tensor(up, p.name) if j == i else q for j, q in enumerate(params)]).item()
            fd = f([Tensor(dn, p.name) if j == i else q for j, q in enumerate(params)]).item()
            if not (np.isfinite(fu) and np.isfinite(fd)):
                raise FloatingPointError(f"f not finite near {p.name}{idx}")
            num = (fu - fd) / (2 * epsilon)
            a = float(ga[idx])
            err = abs(a - num) / max(1e-12, abs(a) + abs(num))
            worst = max(worst, err)
    return worst
