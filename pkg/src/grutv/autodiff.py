"""Dense float64 tensors with a recording tape and reverse-mode gradients.

Every primitive appends a node to the active :class:`Tape` (if any).  The
tape can be replayed with some leaves replaced by a stack of alternative
values; the stack axis rides in front of every intermediate, which is what
lets :func:`grad_check` evaluate all central-difference perturbations of a
parameter in a handful of vectorised passes.

Forward kernels therefore always see arrays carrying one extra leading
"replica" axis (size 1 during normal evaluation), and operate on the
trailing "core" dimensions.  Backward rules only ever see core arrays.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from grutv.errors import DimensionError, UsageError

__all__ = [
    "Tensor",
    "Tape",
    "GradReport",
    "affine",
    "concat",
    "sigmoid",
    "tanh",
    "exp",
    "relu",
    "log",
    "clamp",
    "hadamard",
    "add",
    "sub",
    "scale",
    "total",
    "forward_primitive",
    "backward",
    "grad_check",
    "compare_gradients",
]

_ACTIVE = contextvars.ContextVar("grutv_tape", default=None)

# Largest doubles strictly inside the open unit interval / (-1, 1).
_ONE_BELOW = np.nextafter(1.0, 0.0)
_TINY = np.nextafter(0.0, 1.0)


class Tensor:
    """A float64 array, optionally bound to a node on a tape."""

    __slots__ = ("data", "node", "tape")

    def __init__(self, data, node=None, tape=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node = node
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, node={self.node})"


@dataclass
class Node:
    kind: str
    inputs: tuple
    value: np.ndarray
    attrs: dict | None = None


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in evaluation order, so the list is topologically
    sorted by construction.  Use as a context manager to make it the tape
    that primitives record onto.
    """

    nodes: list = field(default_factory=list)
    leaves: list = field(default_factory=list)
    outputs: list = field(default_factory=list)

    def __post_init__(self):
        self._tokens = []

    def __enter__(self):
        self._tokens.append(_ACTIVE.set(self))
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._tokens.pop())
        return False

    def __len__(self):
        return len(self.nodes)

    def _push(self, kind, inputs, value, attrs=None):
        self.nodes.append(Node(kind, inputs, value, attrs))
        return len(self.nodes) - 1

    def leaf(self, value):
        """Register a differentiable input.  The array is copied, never mutated."""
        value = np.array(value, dtype=np.float64)
        idx = self._push("leaf", (), value)
        self.leaves.append(idx)
        return Tensor(value, idx, self)

    def const(self, value):
        value = np.asarray(value, dtype=np.float64)
        return Tensor(value, self._push("const", (), value), self)

    def mark_output(self, tensor):
        self.outputs.append(tensor.node)
        return tensor

    def replay(self, overrides=None, upto=None):
        """Re-evaluate the recorded graph.

        ``overrides`` maps leaf node ids to stacks of shape ``(R, *leaf.shape)``.
        Returns the list of node values, each with a leading replica axis
        (size 1 where nothing upstream was overridden).  Nodes after ``upto``
        are skipped.
        """
        overrides = overrides or {}
        stop = len(self.nodes) if upto is None else upto + 1
        values = [None] * stop
        for i in range(stop):
            node = self.nodes[i]
            if node.kind in ("leaf", "const"):
                if i in overrides:
                    v = np.asarray(overrides[i], dtype=np.float64)
                    if v.shape[1:] != node.value.shape:
                        raise DimensionError(
                            f"replay override for node {i}: expected stack of "
                            f"{list(node.value.shape)}, got {list(v.shape)}"
                        )
                    values[i] = v
                else:
                    values[i] = node.value[None]
                continue
            args = [values[j] for j in node.inputs]
            values[i] = _FORWARD[node.kind](args, node.attrs)
        return values


def active_tape():
    return _ACTIVE.get()


# ---------------------------------------------------------------------------
# forward kernels (replica-lifted arrays)


def _lift(arrays):
    """Pad replica-lifted arrays to a common rank by inserting axes after the replica axis."""
    nd = max(a.ndim for a in arrays)
    out = []
    for a in arrays:
        if a.ndim < nd:
            a = a.reshape(a.shape[:1] + (1,) * (nd - a.ndim) + a.shape[1:])
        out.append(a)
    return out


def _fwd_affine(args, attrs):
    x, w, b = args
    p, q = w.shape[-2:]
    lead = x.shape[1:-1]
    r = max(x.shape[0], w.shape[0], b.shape[0])
    y = np.matmul(x.reshape(x.shape[0], -1, p), w)
    y = y + b[:, None, :]
    return y.reshape((r,) + lead + (q,))


def _fwd_concat(args, attrs):
    args = _lift(args)
    lead = np.broadcast_shapes(*(a.shape[:-1] for a in args))
    return np.concatenate([np.broadcast_to(a, lead + a.shape[-1:]) for a in args], axis=-1)


def _fwd_sigmoid(args, attrs):
    return np.clip(expit(args[0]), _TINY, _ONE_BELOW)


def _fwd_tanh(args, attrs):
    return np.clip(np.tanh(args[0]), -_ONE_BELOW, _ONE_BELOW)


def _fwd_exp(args, attrs):
    return np.exp(args[0])


def _fwd_relu(args, attrs):
    return np.maximum(args[0], 0.0)


def _fwd_log(args, attrs):
    return np.log(args[0])


def _fwd_clamp(args, attrs):
    return np.clip(args[0], attrs["lo"], attrs["hi"])


def _fwd_hadamard(args, attrs):
    a, b = _lift(args)
    return a * b


def _fwd_add(args, attrs):
    a, b = _lift(args)
    return a + b


def _fwd_sub(args, attrs):
    a, b = _lift(args)
    return a - b


def _fwd_scale(args, attrs):
    return attrs["c"] * args[0]


def _fwd_total(args, attrs):
    a = args[0]
    return a.reshape(a.shape[0], -1).sum(axis=1)


_FORWARD = {
    "affine": _fwd_affine,
    "concat": _fwd_concat,
    "sigmoid": _fwd_sigmoid,
    "tanh": _fwd_tanh,
    "exp": _fwd_exp,
    "relu": _fwd_relu,
    "log": _fwd_log,
    "clamp": _fwd_clamp,
    "hadamard": _fwd_hadamard,
    "add": _fwd_add,
    "sub": _fwd_sub,
    "scale": _fwd_scale,
    "total": _fwd_total,
}


# ---------------------------------------------------------------------------
# backward rules (core arrays); each returns one gradient per input


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _bwd_affine(g, ins, out, attrs):
    x, w, b = ins
    p, q = w.shape
    gx = _unbroadcast(g @ w.T, x.shape)
    g2 = g.reshape(-1, q)
    x2 = np.broadcast_to(x, g.shape[:-1] + (p,)).reshape(-1, p)
    return gx, x2.T @ g2, _unbroadcast(g, b.shape)


def _bwd_concat(g, ins, out, attrs):
    grads = []
    start = 0
    for a in ins:
        width = a.shape[-1]
        grads.append(_unbroadcast(g[..., start:start + width], a.shape))
        start += width
    return tuple(grads)


def _bwd_sigmoid(g, ins, out, attrs):
    return (g * out * (1.0 - out),)


def _bwd_tanh(g, ins, out, attrs):
    return (g * (1.0 - out * out),)


def _bwd_exp(g, ins, out, attrs):
    return (g * out,)


def _bwd_relu(g, ins, out, attrs):
    return (g * (ins[0] > 0.0),)


def _bwd_log(g, ins, out, attrs):
    return (g / ins[0],)


def _bwd_clamp(g, ins, out, attrs):
    x = ins[0]
    return (g * ((x >= attrs["lo"]) & (x <= attrs["hi"])),)


def _bwd_hadamard(g, ins, out, attrs):
    a, b = ins
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _bwd_add(g, ins, out, attrs):
    a, b = ins
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _bwd_sub(g, ins, out, attrs):
    a, b = ins
    return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)


def _bwd_scale(g, ins, out, attrs):
    return (attrs["c"] * g,)


def _bwd_total(g, ins, out, attrs):
    return (np.full(ins[0].shape, float(g)),)


_BACKWARD = {
    "affine": _bwd_affine,
    "concat": _bwd_concat,
    "sigmoid": _bwd_sigmoid,
    "tanh": _bwd_tanh,
    "exp": _bwd_exp,
    "relu": _bwd_relu,
    "log": _bwd_log,
    "clamp": _bwd_clamp,
    "hadamard": _bwd_hadamard,
    "add": _bwd_add,
    "sub": _bwd_sub,
    "scale": _bwd_scale,
    "total": _bwd_total,
}


# ---------------------------------------------------------------------------
# primitive application


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _apply(kind, inputs, attrs=None):
    inputs = [_as_tensor(t) for t in inputs]
    value = _FORWARD[kind]([t.data[None] for t in inputs], attrs)[0]
    tape = _ACTIVE.get()
    if tape is None:
        return Tensor(value)
    ids = []
    for t in inputs:
        if t.tape is tape and t.node is not None:
            ids.append(t.node)
        else:
            ids.append(tape._push("const", (), t.data))
    return Tensor(value, tape._push(kind, tuple(ids), value, attrs), tape)


def _same_trailing(kind, a, b):
    sa, sb = a.shape, b.shape
    if not sa or not sb:
        if sa or sb:
            raise DimensionError(f"{kind}: shapes {list(sa)} and {list(sb)} do not conform")
        return
    if sa[-1] != sb[-1]:
        raise DimensionError(f"{kind}: shapes {list(sa)} and {list(sb)} do not conform")
    try:
        np.broadcast_shapes(sa, sb)
    except ValueError:
        raise DimensionError(f"{kind}: shapes {list(sa)} and {list(sb)} do not conform") from None


def affine(x, w, b):
    """``x @ w + b`` with ``w`` of shape (p, q); ``x`` may carry leading batch axes."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if w.data.ndim != 2 or x.data.ndim < 1 or b.shape != (w.shape[1],) or x.shape[-1] != w.shape[0]:
        raise DimensionError(
            f"affine: matrix {list(w.shape)}, vector {list(x.shape)}, bias {list(b.shape)} do not conform"
        )
    return _apply("affine", (x, w, b))


def concat(*xs):
    xs = [_as_tensor(x) for x in xs]
    if not xs or any(x.data.ndim < 1 for x in xs):
        raise DimensionError(f"concat: expects vectors, got {[list(x.shape) for x in xs]}")
    try:
        np.broadcast_shapes(*(x.shape[:-1] for x in xs))
    except ValueError:
        raise DimensionError(f"concat: leading shapes {[list(x.shape) for x in xs]} differ") from None
    return _apply("concat", xs)


def sigmoid(x):
    return _apply("sigmoid", (x,))


def tanh(x):
    return _apply("tanh", (x,))


def exp(x):
    return _apply("exp", (x,))


def relu(x):
    return _apply("relu", (x,))


def log(x):
    return _apply("log", (x,))


def clamp(x, lo, hi):
    return _apply("clamp", (x,), {"lo": float(lo), "hi": float(hi)})


def hadamard(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_trailing("hadamard", a, b)
    return _apply("hadamard", (a, b))


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_trailing("add", a, b)
    return _apply("add", (a, b))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_trailing("sub", a, b)
    return _apply("sub", (a, b))


def scale(c, x):
    c = float(np.asarray(c).reshape(()) if np.ndim(c) else c)
    return _apply("scale", (x,), {"c": c})


def total(x):
    """Sum of all entries, as a 0-d tensor."""
    return _apply("total", (x,))


_PRIMITIVES = {
    "affine": affine,
    "concat": concat,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "relu": relu,
    "log": log,
    "hadamard": hadamard,
    "add": add,
    "sub": sub,
    "total": total,
}


def forward_primitive(kind, *inputs, **attrs):
    """Apply a primitive by name, e.g. ``forward_primitive("scale", 2.0, x)``."""
    if kind == "scale":
        return scale(*inputs)
    if kind == "clamp":
        return clamp(inputs[0], attrs.get("lo", inputs[1] if len(inputs) > 1 else None),
                     attrs.get("hi", inputs[2] if len(inputs) > 2 else None))
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise UsageError(f"unknown primitive {kind!r}") from None
    return fn(*inputs)


# ---------------------------------------------------------------------------
# reverse mode


def backward(tape, seed=1.0, output=None):
    """Gradients of ``<seed, output>`` with respect to every leaf on ``tape``.

    ``output`` defaults to the last recorded node.  Returns ``{leaf_node_id:
    gradient}``; leaf values are left untouched.
    """
    if not tape.nodes:
        raise UsageError("backward: tape is empty")
    out_id = len(tape.nodes) - 1 if output is None else (
        output.node if isinstance(output, Tensor) else int(output))
    out_value = tape.nodes[out_id].value
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != out_value.shape:
        if seed.ndim == 0:
            seed = np.full(out_value.shape, float(seed))
        else:
            raise DimensionError(
                f"backward: seed shape {list(seed.shape)} does not match output {list(out_value.shape)}"
            )
    grads = [None] * (out_id + 1)
    grads[out_id] = seed
    nodes = tape.nodes
    for i in range(out_id, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = nodes[i]
        if not node.inputs:
            continue
        ins = [nodes[j].value for j in node.inputs]
        parts = _BACKWARD[node.kind](g, ins, node.value, node.attrs)
        for j, gj in zip(node.inputs, parts):
            if nodes[j].kind == "const":
                continue
            if grads[j] is None:
                grads[j] = gj
            else:
                grads[j] = grads[j] + gj
    result = {}
    for leaf in tape.leaves:
        if leaf <= out_id and grads[leaf] is not None:
            result[leaf] = grads[leaf]
        else:
            result[leaf] = np.zeros_like(nodes[leaf].value)
    return result


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradReport:
    max_abs_error: dict
    max_rel_error: dict
    tolerance: float
    passed: bool

    @property
    def worst_rel_error(self):
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def worst_abs_error(self):
        return max(self.max_abs_error.values(), default=0.0)


def _relative_error(analytic, numeric, floor):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def compare_gradients(analytic, numeric, tolerance, floor=1e-6):
    """Build a :class:`GradReport` from two ``{name: gradient}`` maps.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    coordinates whose true gradient is zero from dividing noise by noise.
    """
    abs_err, rel_err = {}, {}
    for name, a in analytic.items():
        a = np.asarray(a, dtype=np.float64)
        n = np.asarray(numeric[name], dtype=np.float64)
        if a.shape != n.shape:
            raise DimensionError(f"gradient {name!r}: shapes {list(a.shape)} and {list(n.shape)} differ")
        if a.size == 0:
            abs_err[name] = rel_err[name] = 0.0
            continue
        abs_err[name] = float(np.max(np.abs(a - n)))
        rel_err[name] = float(np.max(_relative_error(a, n, floor)))
    worst = max(rel_err.values(), default=0.0)
    return GradReport(abs_err, rel_err, tolerance, bool(worst <= tolerance))


def numeric_gradient(tape, leaf, output, epsilon, chunk=512):
    """Central differences of ``output`` w.r.t. every coordinate of ``leaf``, via batched replay."""
    base = tape.nodes[leaf].value
    n = base.size
    flat = base.reshape(-1)
    out = np.empty(n)
    for start in range(0, n, chunk):
        idx = np.arange(start, min(n, start + chunk))
        k = len(idx)
        stack = np.repeat(flat[None], 2 * k, axis=0)
        stack[np.arange(k), idx] += epsilon
        stack[k + np.arange(k), idx] -= epsilon
        values = tape.replay({leaf: stack.reshape((2 * k,) + base.shape)}, upto=output)
        f = values[output].reshape(2 * k, -1)[:, 0]
        out[idx] = (f[:k] - f[k:]) / (2.0 * epsilon)
    return out.reshape(base.shape)


def grad_check(f, point, epsilon=1e-5, tolerance=1e-6, floor=1e-6):
    """Compare reverse-mode gradients of scalar ``f`` against central differences.

    ``point`` is a mapping ``name -> array`` (or a sequence of arrays, named by
    position).  ``f`` receives the corresponding leaf tensors as keyword (or
    positional) arguments and must return a single-element tensor.
    """
    if epsilon <= 0:
        raise UsageError("grad_check: epsilon must be positive")
    named = isinstance(point, dict)
    items = list(point.items()) if named else [(str(i), p) for i, p in enumerate(point)]
    with Tape() as tape:
        leaves = {name: tape.leaf(value) for name, value in items}
        out = f(**leaves) if named else f(*leaves.values())
    if not isinstance(out, Tensor) or out.node is None:
        raise UsageError("grad_check: f must return a taped tensor")
    if out.data.size != 1:
        raise UsageError(f"grad_check: f must be scalar-valued, got shape {list(out.shape)}")
    grads = backward(tape, np.ones_like(out.data), out)
    analytic = {name: grads[t.node] for name, t in leaves.items()}
    numeric = {name: numeric_gradient(tape, t.node, out.node, epsilon) for name, t in leaves.items()}
    return compare_gradients(analytic, numeric, tolerance, floor)
