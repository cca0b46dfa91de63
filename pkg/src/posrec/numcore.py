"""Dense float64 tensors, a reverse-mode tape, Adam, and a finite-difference checker.

Everything downstream (encodings, the session model, the training loop) is
built on the small primitive set in this module.  Design rules:

* all values are 64-bit floats, row-major;
* a primitive only records itself on the active tape when at least one of
  its inputs requires a gradient;
* one backward pass visits every tape node exactly once, in reverse order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-12
LAYER_NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes do not conform to the primitive being applied."""


class TapeError(ValueError):
    """The requested backward pass cannot be run on this tape."""


def _shape_error(op: str, *shapes) -> ShapeError:
    listing = " and ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{op}: incompatible shapes {listing}")


class Tensor:
    """A dense float64 array plus a gradient-tracking flag.

    Tensors are value objects: no primitive mutates its inputs.  The only
    sanctioned mutation is an optimizer writing fresh values into a
    parameter's ``data`` between training steps.
    """

    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node = None  # producing tape node, None for leaves

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


class _TapeNode:
    __slots__ = ("op", "inputs", "output", "backward_fn", "tape")

    def __init__(self, op, inputs, output, backward_fn, tape):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.tape = tape


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Append-only record of primitive applications, used as a context manager.

    Only one tape may be active at a time; nesting replaces the active tape
    for the inner block.  A tape is single-owner and must not be shared
    across concurrent tasks.
    """

    def __init__(self):
        self.nodes: list[_TapeNode] = []
        self._outer = None

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        self._outer = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._outer
        self._outer = None
        return False

    def __len__(self) -> int:
        return len(self.nodes)


def _emit(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward_fn) -> Tensor:
    tape = _ACTIVE_TAPE
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        node = _TapeNode(op, inputs, out, backward_fn, tape)
        out.node = node
        tape.nodes.append(node)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    """2-D matrix product, with optional operand transposes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise _shape_error("matmul", a.shape, b.shape)
    ae = a.data.T if transpose_a else a.data
    be = b.data.T if transpose_b else b.data
    if ae.shape[1] != be.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)

    def backward_fn(g):
        ga_e = g @ be.T
        gb_e = ae.T @ g
        ga = ga_e.T if transpose_a else ga_e
        gb = gb_e.T if transpose_b else gb_e
        return (ga, gb)

    return _emit("matmul", (a, b), ae @ be, backward_fn)


def _broadcast_pair(op: str, a: Tensor, b: Tensor):
    """Allow same-shape operands, or a 1-D vector against the last axis."""
    if a.shape == b.shape:
        return None
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "b"
    if a.data.ndim == 1 and b.data.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return "a"
    raise _shape_error(op, a.shape, b.shape)


def _reduce_to_vector(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    bcast = _broadcast_pair("add", a, b)

    def backward_fn(g):
        ga = _reduce_to_vector(g) if bcast == "a" else g
        gb = _reduce_to_vector(g) if bcast == "b" else g
        return (ga, gb)

    return _emit("add", (a, b), a.data + b.data, backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product (Hadamard)."""
    a, b = _as_tensor(a), _as_tensor(b)
    bcast = _broadcast_pair("elementwise-mul", a, b)
    ad, bd = a.data, b.data

    def backward_fn(g):
        ga = g * bd
        gb = g * ad
        if bcast == "a":
            ga = _reduce_to_vector(ga)
        elif bcast == "b":
            gb = _reduce_to_vector(gb)
        return (ga, gb)

    return _emit("elementwise-mul", (a, b), ad * bd, backward_fn)


def concat(parts) -> Tensor:
    """Concatenate along the last axis."""
    parts = tuple(_as_tensor(p) for p in parts)
    if not parts:
        raise ShapeError("concat-last-axis: no operands")
    lead = parts[0].shape[:-1]
    if any(p.shape[:-1] != lead or p.data.ndim == 0 for p in parts):
        raise _shape_error("concat-last-axis", *[p.shape for p in parts])
    widths = [p.shape[-1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def backward_fn(g):
        return tuple(g[..., offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _emit("concat-last-axis", parts, np.concatenate([p.data for p in parts], axis=-1), backward_fn)


def slice_axis(t: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start:stop) along one axis."""
    t = _as_tensor(t)
    if not -t.data.ndim <= axis < t.data.ndim:
        raise _shape_error("slice", t.shape, (axis,))
    axis = axis % t.data.ndim
    if not 0 <= start <= stop <= t.shape[axis]:
        raise ShapeError(f"slice: bounds [{start}:{stop}) invalid for shape {t.shape} axis {axis}")
    idx = tuple(slice(start, stop) if k == axis else slice(None) for k in range(t.data.ndim))
    shape = t.shape

    def backward_fn(g):
        full = np.zeros(shape, dtype=np.float64)
        full[idx] = g
        return (full,)

    return _emit("slice", (t,), t.data[idx].copy(), backward_fn)


def gather_rows(t: Tensor, indices) -> Tensor:
    """Select rows of a 2-D tensor; duplicate indices accumulate gradient."""
    t = _as_tensor(t)
    idx = np.asarray(indices, dtype=np.int64)
    if t.data.ndim != 2 or idx.ndim != 1:
        raise _shape_error("gather-rows", t.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= t.shape[0]):
        raise ShapeError(f"gather-rows: index out of range for {t.shape[0]} rows")
    shape = t.shape

    def backward_fn(g):
        full = np.zeros(shape, dtype=np.float64)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("gather-rows", (t,), t.data[idx].copy(), backward_fn)


def softmax(t: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    t = _as_tensor(t)
    z = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _emit("softmax-last-axis", (t,), s, backward_fn)


def sigmoid(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    s = 1.0 / (1.0 + np.exp(-t.data))

    def backward_fn(g):
        return (g * s * (1.0 - s),)

    return _emit("sigmoid", (t,), s, backward_fn)


def tanh(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    y = np.tanh(t.data)

    def backward_fn(g):
        return (g * (1.0 - y * y),)

    return _emit("tanh", (t,), y, backward_fn)


def sin(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    x = t.data

    def backward_fn(g):
        return (g * np.cos(x),)

    return _emit("sin", (t,), np.sin(x), backward_fn)


def log(t: Tensor) -> Tensor:
    """Natural log with the argument clamped at 1e-12 to avoid -inf."""
    t = _as_tensor(t)
    clamped = np.maximum(t.data, LOG_CLAMP)

    def backward_fn(g):
        return (g / clamped,)

    return _emit("log", (t,), np.log(clamped), backward_fn)


def reduce_sum(t: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    t = _as_tensor(t)
    shape = t.shape

    def backward_fn(g):
        return (np.full(shape, float(g), dtype=np.float64),)

    return _emit("sum", (t,), np.asarray(t.data.sum()), backward_fn)


def reduce_mean(t: Tensor) -> Tensor:
    """Mean of all entries, as a scalar tensor."""
    t = _as_tensor(t)
    shape = t.shape
    n = t.data.size

    def backward_fn(g):
        return (np.full(shape, float(g) / n, dtype=np.float64),)

    return _emit("mean", (t,), np.asarray(t.data.mean()), backward_fn)


def scale(t: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    t = _as_tensor(t)
    c = float(c)

    def backward_fn(g):
        return (g * c,)

    return _emit("scale", (t,), t.data * c, backward_fn)


def layer_norm(t: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize each row (last axis) to zero mean and unit variance.

    No affine rescale is applied here; callers multiply by a gain vector
    and add a bias vector if they want one.
    """
    t = _as_tensor(t)
    x = t.data
    if x.ndim == 0:
        raise _shape_error("layer-normalize", t.shape)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * inv
    d = x.shape[-1]

    def backward_fn(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _emit("layer-normalize", (t,), y, backward_fn)


def reshape(t: Tensor, shape) -> Tensor:
    t = _as_tensor(t)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != t.data.size:
        raise _shape_error("reshape", t.shape, shape)
    old = t.shape

    def backward_fn(g):
        return (g.reshape(old),)

    return _emit("reshape", (t,), t.data.reshape(shape).copy(), backward_fn)


#: primitive-id -> callable; the dispatch table behind ``forward_primitives``.
PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "elementwise-mul": mul,
    "concat-last-axis": lambda *parts: concat(parts),
    "slice": slice_axis,
    "gather-rows": gather_rows,
    "softmax-last-axis": softmax,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "log": log,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "scale": scale,
    "layer-normalize": layer_norm,
    # extras beyond the base set: a smooth test function and plumbing
    "sin": sin,
    "reshape": reshape,
}


def forward_primitives(op: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by id; unknown ids are rejected."""
    fn = PRIMITIVES.get(op)
    if fn is None:
        raise ValueError(f"unknown primitive {op!r}; known: {sorted(PRIMITIVES)}")
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(tape: Tape, root: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(root)/d(leaf) for every requires_grad leaf on the tape.

    Returns a map keyed by leaf tensor identity.  Gradients of intermediate
    (non-leaf) results are discarded.
    """
    if root.data.size != 1:
        raise TapeError(f"backward root must be scalar, got shape {root.shape}")
    if root.node is None or root.node.tape is not tape:
        raise TapeError("backward root was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        in_grads = node.backward_fn(g_out)
        for inp, g in zip(node.inputs, in_grads):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = np.array(g, dtype=np.float64, copy=True)
            if inp.node is None:
                leaves[key] = inp
    return {t: grads[key] for key, t in leaves.items()}


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Optimizer state for a flat, string-keyed parameter registry."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)
    skipped_updates: int = 0


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One Adam update with bias correction, in place.

    ``weight_decay`` enters as an additive l2 gradient term.  A parameter
    whose gradient contains NaN/Inf keeps its old value; the skip is
    counted and logged.
    """
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise _shape_error(f"adam_step[{name}]", p.shape, g.shape)
        if not np.all(np.isfinite(g)):
            state.skipped_updates += 1
            logger.warning("adam_step: non-finite gradient for %r, update skipped", name)
            continue
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# finite-difference checker
# ---------------------------------------------------------------------------

def grad_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between tape gradients of ``f`` and central differences.

    ``f`` maps one tensor to a scalar tensor and must be pure.  The error at
    each coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    with Tape() as tape:
        probe = Tensor(np.array(x.data, copy=True), requires_grad=True)
        out = f(probe)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ValueError("grad_check: f must return a scalar tensor")
    analytic = backward(tape, out).get(probe)
    if analytic is None:
        analytic = np.zeros_like(x.data)

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        bumped = np.array(x.data, copy=True).reshape(-1)
        bumped[i] = flat[i] + h
        hi = f(Tensor(bumped.reshape(x.shape))).item()
        bumped[i] = flat[i] - h
        lo = f(Tensor(bumped.reshape(x.shape))).item()
        num_flat[i] = (hi - lo) / (2.0 * h)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
