"""Small reverse-mode autodiff engine over float64 numpy arrays.

Every primitive stores its inputs and a backward rule written with plain
arithmetic operators, so the same rule runs on raw arrays (ordinary
backward) or on ``Tensor`` objects (``create_graph=True``), which is what
makes vector-Jacobian products themselves differentiable. Exactly one level
of nesting is supported.
"""

from __future__ import annotations

import itertools
import threading
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "NonFiniteError",
    "GraphError",
    "SecondOrderError",
    "Tensor",
    "Graph",
    "ParamStore",
    "tensor",
    "constant",
    "no_grad",
    "matmul",
    "concat",
    "time_affine",
    "tanh",
    "sigmoid",
    "softplus",
    "exp",
    "log",
    "vjp",
    "grad",
]


class AutodiffError(RuntimeError):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


class GraphError(AutodiffError):
    pass


class SecondOrderError(AutodiffError):
    pass


_ids = itertools.count()


class _State(threading.local):
    def __init__(self):
        self.enabled = True
        self.level = 0


_state = _State()


@contextmanager
def no_grad():
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextmanager
def _recording(level: int):
    prev = (_state.enabled, _state.level)
    _state.enabled = True
    _state.level = level
    try:
        yield
    finally:
        _state.enabled, _state.level = prev


class Tensor:
    """Dense float64 array, optionally tracked on the gradient tape."""

    __slots__ = ("data", "requires_grad", "_op", "_inputs", "_id", "order", "name", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self._op = None
        self._inputs = ()
        self._id = next(_ids)
        self.order = 0
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, op: "_Op", inputs: tuple) -> "Tensor":
        if not np.isfinite(data).all():
            raise NonFiniteError(f"{op.name} produced a non-finite value")
        t = cls.__new__(cls)
        t.data = data
        t._id = next(_ids)
        t.name = None
        track = _state.enabled and any(isinstance(x, Tensor) and x.requires_grad for x in inputs)
        if track:
            t.requires_grad = True
            t._op = op
            t._inputs = inputs
            t.order = max([_state.level] + [x.order for x in inputs if isinstance(x, Tensor)])
        else:
            t.requires_grad = False
            t._op = None
            t._inputs = ()
            t.order = 0
        return t

    # --- array-like surface -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return _apply(_TRANSPOSE, self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return constant(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise ShapeError("division only by python scalars")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return _apply(_NEG, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return _apply(_GetItem(key), self)

    def sum(self, axis: int | None = None) -> "Tensor":
        return _apply(_Sum(axis), self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _apply(_Reshape(tuple(shape)), self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    if isinstance(data, Tensor):
        return data
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --- primitives ---------------------------------------------------------------


class _Op:
    name = "op"
    second_order = True

    def forward(self, *xs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g, out, inputs, needs):
        """Return one cotangent (or None) per input.

        ``g``, ``out`` and ``inputs`` are either all arrays or all tensors.
        """
        raise NotImplementedError


def _apply(op: _Op, *inputs) -> Tensor:
    arrays = [x.data if isinstance(x, Tensor) else x for x in inputs]
    out = op.forward(*arrays)
    return Tensor._from_op(out, op, inputs)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer)) and not isinstance(x, bool)


def _same_shape(a, b, opname: str):
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


class _Add(_Op):
    name = "add"

    def forward(self, a, b):
        if a.shape != b.shape and not (b.ndim == 1 and a.ndim == 2 and a.shape[1] == b.shape[0]):
            raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
        return a + b

    def backward(self, g, out, inputs, needs):
        ga = g if needs[0] else None
        gb = None
        if needs[1]:
            gb = g if inputs[1].shape == g.shape else g.sum(axis=0)
        return ga, gb


class _Sub(_Op):
    name = "sub"

    def forward(self, a, b):
        if a.shape != b.shape and not (b.ndim == 1 and a.ndim == 2 and a.shape[1] == b.shape[0]):
            raise ShapeError(f"sub: shape mismatch {a.shape} vs {b.shape}")
        return a - b

    def backward(self, g, out, inputs, needs):
        ga = g if needs[0] else None
        gb = None
        if needs[1]:
            gb = -g if inputs[1].shape == g.shape else -(g.sum(axis=0))
        return ga, gb


class _Mul(_Op):
    name = "mul"

    def forward(self, a, b):
        _same_shape(a, b, "mul")
        return a * b

    def backward(self, g, out, inputs, needs):
        a, b = inputs
        return (g * b if needs[0] else None, g * a if needs[1] else None)


class _Scale(_Op):
    name = "scale"

    def __init__(self, c: float):
        self.c = float(c)

    def forward(self, a):
        return a * self.c

    def backward(self, g, out, inputs, needs):
        return (g * self.c,)


class _Shift(_Op):
    name = "shift"

    def __init__(self, c: float):
        self.c = float(c)

    def forward(self, a):
        return a + self.c

    def backward(self, g, out, inputs, needs):
        return (g,)


class _Neg(_Op):
    name = "neg"

    def forward(self, a):
        return -a

    def backward(self, g, out, inputs, needs):
        return (-g,)


class _MatMul(_Op):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
        return a @ b

    def backward(self, g, out, inputs, needs):
        a, b = inputs
        return (g @ b.T if needs[0] else None, a.T @ g if needs[1] else None)


class _Transpose(_Op):
    name = "transpose"

    def forward(self, a):
        if a.ndim != 2:
            raise ShapeError("transpose expects a 2-D tensor")
        return a.T

    def backward(self, g, out, inputs, needs):
        return (g.T,)


class _Concat(_Op):
    name = "concat"

    def __init__(self, axis: int):
        self.axis = axis

    def forward(self, *xs):
        return np.concatenate(xs, axis=self.axis)

    def backward(self, g, out, inputs, needs):
        grads = []
        start = 0
        for x, need in zip(inputs, needs):
            stop = start + x.shape[self.axis]
            if need:
                key = (slice(None),) * self.axis + (slice(start, stop),)
                grads.append(g[key])
            else:
                grads.append(None)
            start = stop
        return tuple(grads)


class _GetItem(_Op):
    name = "getitem"

    def __init__(self, key):
        if not isinstance(key, tuple):
            key = (key,)
        for k in key:
            if not isinstance(k, (slice, int)):
                raise GraphError("only basic slicing is supported")
        self.key = key

    def forward(self, a):
        return a[self.key]

    def backward(self, g, out, inputs, needs):
        return (_embed(g, self.key, inputs[0].shape),)


class _Embed(_Op):
    """Adjoint of basic slicing: place a block inside a zero array."""

    name = "embed"

    def __init__(self, key, shape):
        self.key = key
        self.shape = shape

    def forward(self, a):
        out = np.zeros(self.shape)
        out[self.key] = a
        return out

    def backward(self, g, out, inputs, needs):
        return (g[self.key],)


def _embed(g, key, shape):
    if isinstance(g, Tensor):
        return _apply(_Embed(key, shape), g)
    out = np.zeros(shape)
    out[key] = g
    return out


class _Sum(_Op):
    name = "sum"

    def __init__(self, axis):
        self.axis = axis

    def forward(self, a):
        return np.sum(a, axis=self.axis)

    def backward(self, g, out, inputs, needs):
        shape = inputs[0].shape
        return (_broadcast_back(g, self.axis, shape),)


class _Broadcast(_Op):
    """Adjoint of ``sum``: repeat along the reduced axis."""

    name = "broadcast"

    def __init__(self, axis, shape):
        self.axis = axis
        self.shape = shape

    def forward(self, g):
        return _np_broadcast_back(g, self.axis, self.shape)

    def backward(self, g, out, inputs, needs):
        return (g.sum(axis=self.axis),)


def _np_broadcast_back(g, axis, shape):
    if axis is None:
        return np.full(shape, float(g))
    return np.array(np.broadcast_to(np.expand_dims(g, axis), shape))


def _broadcast_back(g, axis, shape):
    if isinstance(g, Tensor):
        return _apply(_Broadcast(axis, shape), g)
    return _np_broadcast_back(g, axis, shape)


class _Reshape(_Op):
    name = "reshape"

    def __init__(self, shape):
        self.shape = shape

    def forward(self, a):
        return a.reshape(self.shape)

    def backward(self, g, out, inputs, needs):
        return (g.reshape(inputs[0].shape),)


class _TimeAffine(_Op):
    """``[h ; t] @ W + b`` without materialising the concatenation."""

    name = "time_affine"

    def __init__(self, t: float):
        self.t = float(t)

    def forward(self, h, W, b):
        n = h.shape[1]
        if h.ndim != 2 or W.shape[0] != n + 1 or b.shape != (W.shape[1],):
            raise ShapeError(f"time_affine: incompatible shapes {h.shape}, {W.shape}, {b.shape}")
        return h @ W[:n] + (b + self.t * W[n])

    def backward(self, g, out, inputs, needs):
        h, W, b = inputs
        n = h.shape[1]
        gh = g @ W[:n].T if needs[0] else None
        gW = gb = None
        if needs[1] or needs[2]:
            gsum = g.sum(axis=0)
            if needs[2]:
                gb = gsum
            if needs[1]:
                top = h.T @ g
                row = (gsum * self.t).reshape(1, W.shape[1])
                gW = concat([top, row], axis=0) if isinstance(g, Tensor) else np.vstack([top, row])
        return gh, gW, gb


class _Tanh(_Op):
    name = "tanh"

    def forward(self, a):
        return np.tanh(a)

    def backward(self, g, out, inputs, needs):
        return (_tanh_grad(g, out),)


class _TanhGrad(_Op):
    """``g * (1 - y²)``, the cotangent rule of tanh given its output ``y``."""

    name = "tanh_grad"

    def forward(self, g, y):
        _same_shape(g, y, "tanh_grad")
        return g * (1.0 - y * y)

    def backward(self, G, out, inputs, needs):
        g, y = inputs
        return (
            _tanh_grad(G, y) if needs[0] else None,
            (G * g * y) * -2.0 if needs[1] else None,
        )


def _tanh_grad(g, y):
    if isinstance(g, Tensor):
        return _apply(_TANH_GRAD, g, y)
    return g * (1.0 - y * y)


class _Sigmoid(_Op):
    name = "sigmoid"

    def forward(self, a):
        return _np_sigmoid(a)

    def backward(self, g, out, inputs, needs):
        return (g * (out * (1.0 - out)),)


class _Softplus(_Op):
    name = "softplus"

    def forward(self, a):
        return _np_softplus(a)

    def backward(self, g, out, inputs, needs):
        return (_softplus_grad(g, inputs[0]),)


class _SoftplusGrad(_Op):
    """``g * sigmoid(x)``, the cotangent rule of softplus."""

    name = "softplus_grad"

    def forward(self, g, x):
        _same_shape(g, x, "softplus_grad")
        return g * _np_sigmoid(x)

    def backward(self, G, out, inputs, needs):
        g, x = inputs
        gg = _softplus_grad(G, x) if needs[0] else None
        gx = None
        if needs[1]:
            s = sigmoid(x)
            gx = G * g * (s * (1.0 - s))
        return gg, gx


def _softplus_grad(g, x):
    if isinstance(g, Tensor):
        return _apply(_SOFTPLUS_GRAD, g, x)
    return g * _np_sigmoid(x)


class _Exp(_Op):
    name = "exp"

    def forward(self, a):
        return np.exp(a)

    def backward(self, g, out, inputs, needs):
        return (g * out,)


class _Log(_Op):
    name = "log"

    def forward(self, a):
        if np.any(a <= 0):
            raise NonFiniteError("log of a non-positive value")
        return np.log(a)

    def backward(self, g, out, inputs, needs):
        return (g * _reciprocal(inputs[0]),)


class _Reciprocal(_Op):
    name = "reciprocal"

    def forward(self, a):
        return 1.0 / a

    def backward(self, g, out, inputs, needs):
        return (-(g * (out * out)),)


def _reciprocal(x):
    return _apply(_RECIPROCAL, x) if isinstance(x, Tensor) else 1.0 / x


def _np_sigmoid(a):
    # tanh form is overflow-free on both tails
    return 0.5 * np.tanh(0.5 * a) + 0.5


def _np_softplus(a):
    # x + log1p(exp(-x)) for x > 0, log1p(exp(x)) otherwise
    return np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))


_TRANSPOSE = _Transpose()
_NEG = _Neg()
_TANH = _Tanh()
_TANH_GRAD = _TanhGrad()
_SOFTPLUS_GRAD = _SoftplusGrad()
_SIGMOID = _Sigmoid()
_SOFTPLUS = _Softplus()
_EXP = _Exp()
_LOG = _Log()
_RECIPROCAL = _Reciprocal()
_ADD = _Add()
_SUB = _Sub()
_MUL = _Mul()
_MATMUL = _MatMul()


def add(a, b) -> Tensor:
    if _is_scalar(b):
        return _apply(_Shift(b), _as_tensor(a))
    if _is_scalar(a):
        return _apply(_Shift(a), _as_tensor(b))
    return _apply(_ADD, _as_tensor(a), _as_tensor(b))


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return _apply(_Shift(-float(b)), _as_tensor(a))
    if _is_scalar(a):
        return _apply(_Shift(a), _apply(_NEG, _as_tensor(b)))
    return _apply(_SUB, _as_tensor(a), _as_tensor(b))


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        return _apply(_Scale(b), _as_tensor(a))
    if _is_scalar(a):
        return _apply(_Scale(a), _as_tensor(b))
    return _apply(_MUL, _as_tensor(a), _as_tensor(b))


def matmul(a, b) -> Tensor:
    return _apply(_MATMUL, _as_tensor(a), _as_tensor(b))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = tuple(_as_tensor(x) for x in xs)
    return _apply(_Concat(axis), *xs)


def time_affine(h, W, b, t: float) -> Tensor:
    """``concat([h, t·1], axis=1) @ W + b`` as a single primitive."""
    return _apply(_TimeAffine(t), _as_tensor(h), _as_tensor(W), _as_tensor(b))


def tanh(x):
    if isinstance(x, Tensor):
        return _apply(_TANH, x)
    return np.tanh(x)


def sigmoid(x):
    if isinstance(x, Tensor):
        return _apply(_SIGMOID, x)
    return _np_sigmoid(np.asarray(x, dtype=np.float64))


def softplus(x):
    if isinstance(x, Tensor):
        return _apply(_SOFTPLUS, x)
    return _np_softplus(np.asarray(x, dtype=np.float64))


def exp(x):
    if isinstance(x, Tensor):
        return _apply(_EXP, x)
    return np.exp(x)


def log(x):
    if isinstance(x, Tensor):
        return _apply(_LOG, x)
    return np.log(x)


# --- graph traversal ----------------------------------------------------------


@dataclass
class Graph:
    """Topologically ordered view of the nodes feeding one output.

    ``nodes`` holds every tracked tensor between the stop set and the
    output; ``roots`` are the leaf tensors (parameters and other inputs that
    require gradients).
    """

    nodes: list[Tensor] = field(default_factory=list)
    roots: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor, stop_at: Iterable[Tensor] = ()) -> "Graph":
        stop = {t._id for t in stop_at}
        floor = min(stop) if stop else -1
        seen: dict[int, Tensor] = {}
        stack = [output]
        while stack:
            t = stack.pop()
            if t._id in seen or not t.requires_grad:
                continue
            if t._id < floor and t._id not in stop:
                # created before every stop tensor, so it cannot depend on them
                continue
            seen[t._id] = t
            if t._id in stop:
                continue
            for x in t._inputs:
                if isinstance(x, Tensor):
                    stack.append(x)
        nodes = [seen[k] for k in sorted(seen)]
        roots = [t for t in nodes if t._op is None]
        return cls(nodes, roots)

    def __len__(self):
        return len(self.nodes)

    @property
    def op_count(self) -> int:
        return sum(1 for t in self.nodes if t._op is not None)


def _backprop(output: Tensor, cotangent, wrt: Sequence[Tensor], create_graph: bool, allow_unused: bool):
    for w in wrt:
        if not isinstance(w, Tensor):
            raise TypeError("gradients can only be taken with respect to tensors")
    if create_graph and output.order >= 1:
        raise SecondOrderError(
            "create_graph on an output that already depends on a differentiated graph; "
            "only one level of nesting is supported"
        )

    graph = Graph.trace(output, stop_at=wrt)
    wrt_ids = {w._id for w in wrt}
    relevant = set()
    for t in graph.nodes:
        if t._id in wrt_ids:
            relevant.add(t._id)
        elif any(isinstance(x, Tensor) and x._id in relevant for x in t._inputs):
            relevant.add(t._id)

    if output._id not in relevant:
        if not allow_unused:
            raise GraphError("input is not on the graph of the output")
        return [None] * len(wrt)

    if create_graph:
        cot = _as_tensor(cotangent)
    else:
        cot = np.asarray(cotangent.data if isinstance(cotangent, Tensor) else cotangent, dtype=np.float64)
    if cot.shape != output.shape:
        raise ShapeError(f"cotangent shape {cot.shape} does not match output shape {output.shape}")

    grads: dict[int, object] = {output._id: cot}
    results: dict[int, object] = {}
    ctx = _recording(1) if create_graph else no_grad()
    with ctx:
        for t in reversed(graph.nodes):
            g = grads.pop(t._id, None)
            if g is None:
                continue
            if t._id in wrt_ids:
                results[t._id] = g
                continue
            if t._op is None:
                continue
            if create_graph and not t._op.second_order:
                raise SecondOrderError(f"primitive '{t._op.name}' has no second-order rule")
            needs = [isinstance(x, Tensor) and x._id in relevant for x in t._inputs]
            if create_graph:
                ins = t._inputs
                out = t
            else:
                ins = tuple(x.data if isinstance(x, Tensor) else x for x in t._inputs)
                out = t.data
            in_grads = t._op.backward(g, out, ins, needs)
            for x, gx, need in zip(t._inputs, in_grads, needs):
                if not need or gx is None:
                    continue
                prev = grads.get(x._id)
                grads[x._id] = gx if prev is None else prev + gx
    out_list = []
    for w in wrt:
        g = results.get(w._id)
        if g is None and not allow_unused:
            raise GraphError("input is not on the graph of the output")
        out_list.append(g)
    return out_list


def vjp(output: Tensor, inputs, cotangent, create_graph: bool = False, allow_unused: bool = False):
    """cotangentᵀ · ∂output/∂inputs.

    ``inputs`` may be one tensor or a sequence; the return value mirrors it.
    With ``create_graph`` the result is a tracked ``Tensor``; otherwise a
    plain array.
    """
    single = isinstance(inputs, Tensor)
    wrt = [inputs] if single else list(inputs)
    res = _backprop(output, cotangent, wrt, create_graph, allow_unused)
    return res[0] if single else res


def grad(scalar_output: Tensor, params) -> list[np.ndarray]:
    """Gradients of a one-element output; unused parameters get zeros."""
    if scalar_output.size != 1:
        raise ShapeError(f"grad needs a scalar output, got shape {scalar_output.shape}")
    tensors = list(params.values()) if isinstance(params, ParamStore) else list(params)
    if not scalar_output.requires_grad:
        return [np.zeros_like(p.data) for p in tensors]
    res = _backprop(scalar_output, np.ones(scalar_output.shape), tensors, False, True)
    return [np.zeros_like(p.data) if g is None else g for p, g in zip(tensors, res)]


# --- parameters ---------------------------------------------------------------


class ParamStore:
    """Named parameter tensors with a stable order."""

    def __init__(self, items: Iterable[tuple[str, Tensor]] = ()):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        for name, t in items:
            self.add(name, t)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        if t.name is None:
            t.name = name
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def values(self) -> list[Tensor]:
        return list(self._params.values())

    def items(self):
        return self._params.items()

    @property
    def count(self) -> int:
        return int(sum(t.size for t in self._params.values()))

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: t.shape for k, t in self._params.items()}

    def flatten(self) -> np.ndarray:
        if not self._params:
            return np.zeros(0)
        return np.concatenate([t.data.ravel() for t in self._params.values()])

    def unflatten(self, vec: np.ndarray) -> "OrderedDict[str, np.ndarray]":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.count,):
            raise ShapeError(f"expected a vector of length {self.count}, got {vec.shape}")
        out = OrderedDict()
        i = 0
        for k, t in self._params.items():
            n = t.size
            out[k] = vec[i:i + n].reshape(t.shape).copy()
            i += n
        return out

    def assign(self, vec: np.ndarray) -> None:
        for k, arr in self.unflatten(vec).items():
            self._params[k].data = arr

    def assign_dict(self, arrays) -> None:
        for k, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != self._params[k].shape:
                raise ShapeError(f"{k}: expected shape {self._params[k].shape}, got {arr.shape}")
            self._params[k].data = arr.copy()
