"""Dense float64 tensors with reverse-mode automatic differentiation.

Execution is define-by-run: operations performed while a ``Graph`` is active
are appended to its tape, and ``backward`` replays the tape in reverse to
accumulate gradients into leaf tensors. Graphs are meant to live for a single
forward/backward pass; training loops open a fresh one per step.

The op set is deliberately small: 2-D matrix products, elementwise arithmetic
with scalar broadcasting only, a handful of shape ops (concat, row slice, row
repeat), sigmoid/relu, and the two losses used by the training objectives.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, ValidationError

__all__ = [
    "Tensor",
    "Graph",
    "AdamState",
    "backward",
    "zero_grad",
    "adam_step",
    "set_debug_checks",
    "no_grad_params",
    "elementwise",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "sigmoid",
    "relu",
    "mse_loss",
    "bce_loss",
    "concat_cols",
    "stack_rows",
    "slice_rows",
    "add_bias",
    "row_scale",
    "col_scale",
    "take_row",
    "repeat_rows",
]

# Debug-mode NaN checks after every forward op; off by default, enabled in the
# test suite.
_DEBUG_CHECKS = False

# Sigmoid outputs are clamped to the open interval: float64 rounds the exact
# value to 0.0 / 1.0 for |x| beyond ~37, which downstream log terms cannot take.
_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)

_BCE_CLAMP = 1e-7


def set_debug_checks(enabled: bool) -> None:
    """Toggle per-op NaN checks (slow; intended for tests and debugging)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class Tensor:
    """A dense float64 array with an optional gradient accumulator.

    ``requires_grad`` marks leaves that should receive gradients; tensors
    produced by recorded ops propagate the flag automatically. ``grad`` is
    ``None`` until ``backward`` first accumulates into it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_from_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._from_op = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Operator sugar; the named functions below are the actual ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("kind", "inputs", "output", "saved", "needs")

    def __init__(self, kind, inputs, output, saved):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.saved = saved
        # requires_grad captured at record time; freezing contexts may restore
        # flags before backward runs
        self.needs = tuple(t.requires_grad for t in inputs)


class Graph:
    """Tape of recorded operations for one forward pass.

    Used as a context manager; only one graph may record at a time (graph
    recording is confined to a single thread per training run).
    """

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Graph":
        global _ACTIVE
        if _ACTIVE is not None:
            raise ValidationError("a graph is already recording; graphs do not nest")
        _ACTIVE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE
        _ACTIVE = None


_ACTIVE: Graph | None = None


class no_grad_params:
    """Temporarily clear ``requires_grad`` on the given tensors.

    Used by the attack loops: the model is held fixed while only the input
    receives gradient steps, so recording parameter branches would both waste
    work and pollute ``grad`` buffers mid-training.
    """

    def __init__(self, *tensor_groups):
        self._tensors = [t for group in tensor_groups for t in group]
        self._saved: list[bool] = []

    def __enter__(self):
        self._saved = [t.requires_grad for t in self._tensors]
        for t in self._tensors:
            t.requires_grad = False
        return self

    def __exit__(self, *exc):
        for t, flag in zip(self._tensors, self._saved):
            t.requires_grad = flag


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _emit(kind: str, out_data: np.ndarray, inputs: tuple, saved: tuple = ()) -> Tensor:
    if _DEBUG_CHECKS and np.isnan(out_data).any():
        raise ArithmeticError(f"NaN produced by op '{kind}'")
    needs = _ACTIVE is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        out._from_op = True
        _ACTIVE.nodes.append(_Node(kind, inputs, out, saved))
    return out


_BACKWARD: dict[str, callable] = {}


def _grad_rule(kind):
    def register(fn):
        _BACKWARD[kind] = fn
        return fn

    return register


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _binary(kind: str, a, b):
    a = _as_tensor(a)
    if isinstance(b, (int, float, np.floating, np.integer)):
        return _scalar_variant(kind, a, float(b))
    b = _as_tensor(b)
    if a.shape == b.shape:
        ops = {"add": np.add, "sub": np.subtract, "mul": np.multiply}
        return _emit(kind, ops[kind](a.data, b.data), (a, b))
    if b.size == 1:
        return _scalar_tensor_variant(kind, a, b)
    if a.size == 1 and kind in ("add", "mul"):
        return _scalar_tensor_variant(kind, b, a)
    raise ShapeError(f"{kind}: operand shapes {a.shape} and {b.shape} differ and neither is scalar")


def _scalar_variant(kind: str, a: Tensor, c: float) -> Tensor:
    if kind == "add":
        return _emit("add_const", a.data + c, (a,), (c,))
    if kind == "sub":
        return _emit("add_const", a.data - c, (a,), (-c,))
    return _emit("scale", a.data * c, (a,), (c,))


def _scalar_tensor_variant(kind: str, a: Tensor, s: Tensor) -> Tensor:
    c = float(s.data)
    ops = {"add": a.data + c, "sub": a.data - c, "mul": a.data * c}
    return _emit(kind + "_s", ops[kind], (a, s))


def add(a, b) -> Tensor:
    return _binary("add", a, b)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b)


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar."""
    return _scalar_variant("mul", _as_tensor(a), float(c))


def elementwise(kind: str, a, b) -> Tensor:
    """Dispatch on op-kind: one of add, sub, mul, scale."""
    if kind == "scale":
        return scale(a, b)
    if kind not in ("add", "sub", "mul"):
        raise ValidationError(f"unknown elementwise op-kind '{kind}'")
    return _binary(kind, a, b)


@_grad_rule("add")
def _(node, g):
    return g, g


@_grad_rule("sub")
def _(node, g):
    return g, -g


@_grad_rule("mul")
def _(node, g):
    a, b = node.inputs
    return g * b.data, g * a.data


@_grad_rule("add_const")
def _(node, g):
    return (g,)


@_grad_rule("scale")
def _(node, g):
    (c,) = node.saved
    return (g * c,)


@_grad_rule("add_s")
def _(node, g):
    return g, np.asarray(g.sum()).reshape(node.inputs[1].shape)


@_grad_rule("sub_s")
def _(node, g):
    return g, np.asarray(-g.sum()).reshape(node.inputs[1].shape)


@_grad_rule("mul_s")
def _(node, g):
    a, s = node.inputs
    return g * float(s.data), np.asarray((g * a.data).sum()).reshape(s.shape)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Standard 2-D matrix product."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _emit("matmul", a.data @ b.data, (a, b))


@_grad_rule("matmul")
def _(node, g):
    a, b = node.inputs
    ga = g @ b.data.T if node.needs[0] else None
    gb = a.data.T @ g if node.needs[1] else None
    return ga, gb


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a 2-D tensor, got shape {a.shape}")
    return _emit("transpose", a.data.T.copy(), (a,))


@_grad_rule("transpose")
def _(node, g):
    return (g.T.copy(),)


def add_bias(a, b) -> Tensor:
    """Add a length-d bias vector to every row of an (n, d) tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 1 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: rows of {a.shape} do not match bias {b.shape}")
    return _emit("add_bias", a.data + b.data, (a, b))


@_grad_rule("add_bias")
def _(node, g):
    return g, g.sum(axis=0)


def row_scale(a, coeffs) -> Tensor:
    """Scale each row of an (n, d) tensor by a constant per-row coefficient.

    The coefficients are not differentiated through; they carry noise-schedule
    constants.
    """
    a = _as_tensor(a)
    c = np.asarray(coeffs, dtype=np.float64).reshape(-1, 1)
    if a.data.ndim != 2 or c.shape[0] != a.shape[0]:
        raise ShapeError(f"row_scale: {c.shape[0]} coefficients for {a.shape} rows")
    return _emit("row_scale", a.data * c, (a,), (c,))


@_grad_rule("row_scale")
def _(node, g):
    (c,) = node.saved
    return (g * c,)


def col_scale(a, s) -> Tensor:
    """Scale each row of an (n, d) tensor by a differentiable (n, 1) gate."""
    a, s = _as_tensor(a), _as_tensor(s)
    if a.data.ndim != 2 or s.shape != (a.shape[0], 1):
        raise ShapeError(f"col_scale: gate shape {s.shape} does not match {a.shape}")
    return _emit("col_scale", a.data * s.data, (a, s))


@_grad_rule("col_scale")
def _(node, g):
    a, s = node.inputs
    return g * s.data, (g * a.data).sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# shape ops


def concat_cols(parts) -> Tensor:
    parts = tuple(_as_tensor(p) for p in parts)
    rows = {p.shape[0] for p in parts}
    if not parts or len(rows) != 1 or any(p.data.ndim != 2 for p in parts):
        raise ShapeError(f"concat_cols: incompatible shapes {[p.shape for p in parts]}")
    widths = tuple(p.shape[1] for p in parts)
    return _emit("concat_cols", np.concatenate([p.data for p in parts], axis=1), parts, (widths,))


@_grad_rule("concat_cols")
def _(node, g):
    (widths,) = node.saved
    grads, off = [], 0
    for w in widths:
        grads.append(g[:, off : off + w])
        off += w
    return tuple(grads)


def stack_rows(parts) -> Tensor:
    parts = tuple(_as_tensor(p) for p in parts)
    cols = {p.shape[1] for p in parts}
    if not parts or len(cols) != 1 or any(p.data.ndim != 2 for p in parts):
        raise ShapeError(f"stack_rows: incompatible shapes {[p.shape for p in parts]}")
    heights = tuple(p.shape[0] for p in parts)
    return _emit("stack_rows", np.concatenate([p.data for p in parts], axis=0), parts, (heights,))


@_grad_rule("stack_rows")
def _(node, g):
    (heights,) = node.saved
    grads, off = [], 0
    for h in heights:
        grads.append(g[off : off + h])
        off += h
    return tuple(grads)


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for {a.shape}")
    return _emit("slice_rows", a.data[start:stop].copy(), (a,), (start, stop))


@_grad_rule("slice_rows")
def _(node, g):
    start, stop = node.saved
    out = np.zeros_like(node.inputs[0].data)
    out[start:stop] = g
    return (out,)


def take_row(m, idx: int) -> Tensor:
    """Select one row of a matrix, keeping it 2-D; scatters gradient back."""
    m = _as_tensor(m)
    if m.data.ndim != 2 or not (0 <= idx < m.shape[0]):
        raise ShapeError(f"take_row: row {idx} out of range for {m.shape}")
    return _emit("take_row", m.data[idx : idx + 1].copy(), (m,), (idx,))


@_grad_rule("take_row")
def _(node, g):
    (idx,) = node.saved
    out = np.zeros_like(node.inputs[0].data)
    out[idx] = g[0]
    return (out,)


def repeat_rows(a, n: int) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2 or a.shape[0] != 1:
        raise ShapeError(f"repeat_rows: expected shape (1, d), got {a.shape}")
    return _emit("repeat_rows", np.repeat(a.data, n, axis=0), (a,))


@_grad_rule("repeat_rows")
def _(node, g):
    return (g.sum(axis=0, keepdims=True),)


# ---------------------------------------------------------------------------
# nonlinearities and losses


def sigmoid(a) -> Tensor:
    """Numerically stable logistic function, output strictly inside (0, 1)."""
    a = _as_tensor(a)
    x = a.data
    pos = 1.0 / (1.0 + np.exp(-np.clip(x, 0.0, None)))
    ex = np.exp(np.clip(x, None, 0.0))
    s = np.where(x >= 0, pos, ex / (1.0 + ex))
    s = np.clip(s, _SIG_LO, _SIG_HI)
    return _emit("sigmoid", s, (a,), (s,))


@_grad_rule("sigmoid")
def _(node, g):
    (s,) = node.saved
    return (g * s * (1.0 - s),)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("relu", np.maximum(a.data, 0.0), (a,))


@_grad_rule("relu")
def _(node, g):
    return (g * (node.inputs[0].data > 0.0),)


def mse_loss(pred, target) -> Tensor:
    """Mean of squared differences over all elements; zero iff pred == target."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shapes {pred.shape} and {target.shape} differ")
    d = pred.data - target.data
    return _emit("mse_loss", np.asarray(np.mean(d * d)), (pred, target))


@_grad_rule("mse_loss")
def _(node, g):
    pred, target = node.inputs
    base = g * 2.0 * (pred.data - target.data) / pred.data.size
    return base, -base


def bce_loss(p, labels) -> Tensor:
    """Binary cross-entropy of probabilities against 0/1 labels, averaged.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs; gradient is
    cut outside the clamp range.
    """
    p = _as_tensor(p)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape not in (p.shape, ()):
        raise ShapeError(f"bce_loss: labels shape {y.shape} does not match {p.shape}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValidationError("bce_loss: labels must be 0 or 1")
    y = np.broadcast_to(y, p.shape)
    inside = (p.data >= _BCE_CLAMP) & (p.data <= 1.0 - _BCE_CLAMP)
    pc = np.clip(p.data, _BCE_CLAMP, 1.0 - _BCE_CLAMP)
    loss = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    return _emit("bce_loss", np.asarray(np.mean(loss)), (p,), (pc, y, inside))


@_grad_rule("bce_loss")
def _(node, g):
    pc, y, inside = node.saved
    gp = g * (pc - y) / (pc * (1.0 - pc)) / pc.size
    return (gp * inside,)


# ---------------------------------------------------------------------------
# backward pass and optimizer


def backward(loss: Tensor, graph: Graph) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

    Visits the tape once, in reverse recording order. Repeated calls keep
    accumulating; callers zero gradients between steps.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ValidationError("backward: loss must be a scalar tensor")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad and not loss._from_op:
        _accumulate(loss, pending[id(loss)])
    for node in reversed(graph.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi, needed in zip(node.inputs, _BACKWARD[node.kind](node, g), node.needs):
            if gi is None or not needed:
                continue
            if inp._from_op:
                key = id(inp)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
            else:
                _accumulate(inp, gi)


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    if leaf.grad is None:
        leaf.grad = np.array(g, dtype=np.float64)
    else:
        leaf.grad = leaf.grad + g


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


class AdamState:
    """First/second-moment buffers and step counter for a parameter list."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]


def adam_step(params, state: AdamState) -> None:
    """One bias-corrected Adam update; gradients are left untouched."""
    params = list(params)
    if len(params) != len(state.params) or any(a is not b for a, b in zip(params, state.params)):
        raise ValidationError("adam_step: parameter list does not match optimizer state")
    for p in params:
        if p.grad is None:
            raise ValidationError("adam_step: parameter has no gradient; run backward first")
        if p.grad.shape != p.data.shape:
            raise ValidationError("adam_step: gradient shape does not match parameter")
    state.step += 1
    b1t = 1.0 - state.beta1**state.step
    b2t = 1.0 - state.beta2**state.step
    for p, m, v in zip(params, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * p.grad
        v *= state.beta2
        v += (1.0 - state.beta2) * (p.grad * p.grad)
        p.data -= state.lr * (m / b1t) / (np.sqrt(v / b2t) + state.eps)
