"""Reverse-mode automatic differentiation on a flat gradient tape.

Everything is dense float64. A ``Tensor`` wraps a numpy array; while a
``Tape`` is active, every primitive applied to a tensor that requires
gradients appends one node to the tape. ``Tape.backward`` walks the nodes
in reverse construction order (which is a valid topological order) and
accumulates vector-Jacobian products into a per-node gradient map.

The module also carries the training-side update rules (plain gradient
descent and Adam), the gradient-reversal primitive used for adversarial
feature learning, and a finite-difference gradient checker.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

Array = np.ndarray

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NumericsError(ArithmeticError):
    """Raised when a non-finite value would corrupt a parameter update."""


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """Dense float64 array with an optional handle into the active tape."""

    __slots__ = ("data", "requires_grad", "node_id", "tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None
        self.tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    # Operator sugar; constants are wrapped as non-grad tensors.
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

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "input_ids", "backward_fn")

    def __init__(self, op: str, input_ids, backward_fn):
        self.op = op
        self.input_ids = input_ids
        self.backward_fn = backward_fn


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Node ids are assigned in construction order, so inputs always precede
    consumers and a single reverse sweep implements backpropagation. A tape
    is single-use: after ``backward`` it is finalized and refuses further
    recording.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self.gradients: dict[int, Array] = {}
        self._finalized = False

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def __len__(self) -> int:
        return len(self._nodes)

    def _register_leaf(self, t: Tensor) -> int:
        if self._finalized:
            raise RuntimeError("tape already consumed by backward")
        node_id = len(self._nodes)
        self._nodes.append(_Node("leaf", (), None))
        t.node_id = node_id
        t.tape = self
        return node_id

    def _record(self, op: str, inputs: Sequence[Tensor], out_data: Array,
                backward_fn) -> Tensor:
        if self._finalized:
            raise RuntimeError("tape already consumed by backward")
        input_ids = []
        for t in inputs:
            if t.requires_grad:
                if t.tape is not self or t.node_id is None:
                    self._register_leaf(t)
                input_ids.append(t.node_id)
            else:
                input_ids.append(None)
        out = Tensor(out_data, requires_grad=True)
        out.node_id = len(self._nodes)
        out.tape = self
        self._nodes.append(_Node(op, tuple(input_ids), backward_fn))
        return out

    def backward(self, loss: Tensor) -> dict[int, Array]:
        """Accumulate d(loss)/d(node) for every node reachable from ``loss``.

        The loss must be a scalar recorded on this tape. Returns the
        node-id -> gradient map (also kept in ``self.gradients``); the tape
        is finalized afterwards and cannot record further operations.
        """
        if not self._nodes:
            raise ValueError("backward on an empty tape")
        if loss.tape is not self or loss.node_id is None:
            raise ValueError("loss tensor was not recorded on this tape")
        if loss.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, Array] = {
            loss.node_id: np.ones_like(loss.data)
        }
        for node_id in range(loss.node_id, -1, -1):
            g = grads.get(node_id)
            if g is None:
                continue
            node = self._nodes[node_id]
            if node.backward_fn is None:
                continue
            input_grads = node.backward_fn(g)
            for in_id, in_g in zip(node.input_ids, input_grads):
                if in_id is None or in_g is None:
                    continue
                if in_id in grads:
                    grads[in_id] = grads[in_id] + in_g
                else:
                    grads[in_id] = in_g
        self.gradients = grads
        self._finalized = True
        return grads

    def grad(self, t: Tensor) -> Array:
        """Gradient for ``t`` after backward; zeros if ``t`` was unreachable."""
        if t.tape is self and t.node_id is not None:
            g = self.gradients.get(t.node_id)
            if g is not None:
                return g
        return np.zeros_like(t.data)


def backward(tape: Tape, loss: Tensor) -> dict[int, Array]:
    """Functional form of ``Tape.backward``."""
    return tape.backward(loss)


def _active_tape_for(inputs: Sequence[Tensor]) -> Tape | None:
    if _ACTIVE_TAPE is None:
        return None
    if any(t.requires_grad for t in inputs):
        return _ACTIVE_TAPE
    return None


def _emit(op: str, inputs: Sequence[Tensor], out_data: Array,
          backward_builder: Callable[[], Callable]) -> Tensor:
    """Return the op result, recording a tape node only when needed."""
    tape = _active_tape_for(inputs)
    if tape is None:
        out = Tensor(out_data)
        out.requires_grad = any(t.requires_grad for t in inputs)
        return out
    return tape._record(op, inputs, out_data, backward_builder())


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Forward primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ValueError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def build():
        sa, sb = a.shape, b.shape

        def bwd(g):
            return (_unbroadcast(g, sa), _unbroadcast(g, sb))

        return bwd

    return _emit("add", (a, b), out, build)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError:
        raise ValueError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")

    def build():
        sa, sb = a.shape, b.shape

        def bwd(g):
            return (_unbroadcast(g, sa), _unbroadcast(-g, sb))

        return bwd

    return _emit("sub", (a, b), out, build)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ValueError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def build():
        ad, bd = a.data, b.data

        def bwd(g):
            return (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))

        return bwd

    return _emit("mul", (a, b), out, build)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def build():
        def bwd(g):
            return (c * g,)

        return bwd

    return _emit("scale", (a,), c * a.data, build)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(
            f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = np.matmul(a.data, b.data)

    def build():
        ad, bd = a.data, b.data

        def bwd(g):
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
            return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))

        return bwd

    return _emit("matmul", (a, b), out, build)


def conv1d(signal: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Strided cross-correlation, valid windows only (no padding).

    ``signal`` is (B, C, L) and ``kernel`` (O, C, K); the result is
    (B, O, T) with T = floor((L - K) / stride) + 1. Plain 1-D inputs are
    treated as single-channel, single-filter and return a 1-D result.
    """
    flat = signal.ndim == 1 and kernel.ndim == 1
    if flat:
        signal = reshape(signal, (1, 1, signal.shape[0]))
        kernel = reshape(kernel, (1, 1, kernel.shape[0]))
    if signal.ndim != 3 or kernel.ndim != 3:
        raise ValueError(
            f"conv1d: expected (B, C, L) signal and (O, C, K) kernel, "
            f"got {signal.shape} and {kernel.shape}")
    if signal.shape[1] != kernel.shape[1]:
        raise ValueError(
            f"conv1d: channel mismatch between signal {signal.shape} "
            f"and kernel {kernel.shape}")
    if stride < 1:
        raise ValueError(f"conv1d: stride must be positive, got {stride}")
    B, C, L = signal.shape
    O, _, K = kernel.shape
    if L < K:
        raise ValueError(
            f"conv1d: signal length {L} shorter than kernel length {K}")
    T = (L - K) // stride + 1
    xd, wd = signal.data, kernel.data
    # im2col: gather the strided windows once so both passes are single
    # BLAS contractions instead of K separate reductions.
    win = np.lib.stride_tricks.sliding_window_view(xd, K, axis=2)
    win = win[:, :, ::stride]                                   # (B, C, T, K)
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3))      # (B, T, C, K)
    cols = cols.reshape(B, T, C * K)
    wmat = wd.reshape(O, C * K)
    out = np.ascontiguousarray(np.matmul(cols, wmat.T).transpose(0, 2, 1))

    def build():
        def bwd(g):
            gt = np.ascontiguousarray(g.transpose(0, 2, 1))     # (B, T, O)
            gw = (gt.reshape(B * T, O).T
                  @ cols.reshape(B * T, C * K)).reshape(O, C, K)
            gcols = np.matmul(gt, wmat).reshape(B, T, C, K)
            gcols = gcols.transpose(0, 2, 1, 3)                 # (B, C, T, K)
            gx = np.zeros_like(xd)
            for k in range(K):
                sl = slice(k, k + (T - 1) * stride + 1, stride)
                gx[:, :, sl] += gcols[:, :, :, k]
            return (gx, gw)

        return bwd

    result = _emit("conv1d", (signal, kernel), out, build)
    if flat:
        result = reshape(result, (T,))
    return result


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def build():
        mask = x.data > 0.0

        def bwd(g):
            return (g * mask,)

        return bwd

    return _emit("relu", (x,), out, build)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian error linear unit, x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * cdf

    def build():
        deriv = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        deriv *= xd
        deriv += cdf

        def bwd(g):
            return (g * deriv,)

        return bwd

    return _emit("gelu", (x,), out, build)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax: axis {axis} invalid for shape {x.shape}")
    out = x.data - np.max(x.data, axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= np.sum(out, axis=axis, keepdims=True)

    def build():
        def bwd(g):
            dot = np.sum(g * out, axis=axis, keepdims=True)
            gx = g - dot
            gx *= out
            return (gx,)

        return bwd

    return _emit("softmax", (x,), out, build)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"log_softmax: axis {axis} invalid for shape {x.shape}")
    m = np.max(x.data, axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse

    def build():
        p = np.exp(out)

        def bwd(g):
            return (g - p * np.sum(g, axis=axis, keepdims=True),)

        return bwd

    return _emit("log_softmax", (x,), out, build)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(
            f"layer_norm: gain/bias must have shape ({d},), "
            f"got {gain.shape} and {bias.shape}")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    var = np.var(x.data, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gain.data * xhat + bias.data

    def build():
        gd = gain.data
        reduce_axes = tuple(range(x.ndim - 1))

        def bwd(g):
            gg = np.sum(g * xhat, axis=reduce_axes)
            gb = np.sum(g, axis=reduce_axes)
            gi = g * gd
            gx = inv * (gi - np.mean(gi, axis=-1, keepdims=True)
                        - xhat * np.mean(gi * xhat, axis=-1, keepdims=True))
            return (gx, gg, gb)

        return bwd

    return _emit("layer_norm", (x, gain, bias), out, build)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def build():
        shape = x.shape

        def bwd(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return bwd

    return _emit("sum", (x,), out, build)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    n = x.size if axis is None else np.prod(
        [x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])

    def build():
        shape = x.shape
        inv_n = 1.0 / float(n)

        def bwd(g):
            if axis is None:
                return (np.broadcast_to(g * inv_n, shape).copy(),)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g * inv_n, shape).copy(),)

        return bwd

    return _emit("mean", (x,), out, build)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ValueError(
            f"concat: shapes {[t.shape for t in tensors]} do not align "
            f"on axis {axis}")

    def build():
        sizes = [t.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def bwd(g):
            return tuple(np.split(g, splits, axis=axis))

        return bwd

    return _emit("concat", tensors, out, build)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def build():
        orig = x.shape

        def bwd(g):
            return (g.reshape(orig),)

        return bwd

    return _emit("reshape", (x,), out, build)


def transpose(x: Tensor, axes) -> Tensor:
    out = np.transpose(x.data, axes)

    def build():
        inverse = np.argsort(axes)

        def bwd(g):
            return (np.transpose(g, inverse),)

        return bwd

    return _emit("transpose", (x,), out, build)


def gradient_reversal(x: Tensor, grl_scale: float) -> Tensor:
    """Identity in the forward pass; multiplies gradients by -grl_scale.

    The forward output shares the input buffer, so it is bit-identical for
    every scale value. With a negative scale the layer passes gradients
    through amplified instead of reversed (plain multi-task behaviour at
    scale -1).
    """
    lam = float(grl_scale)

    def build():
        def bwd(g):
            return ((-lam) * g,)

        return bwd

    return _emit("grl", (x,), x.data, build)


# ---------------------------------------------------------------------------
# Parameters and update rules
# ---------------------------------------------------------------------------

PARAM_GROUPS = ("extractor", "spoof_head", "speaker_head")


class ParameterSet:
    """Named, group-partitioned collection of trainable tensors.

    Groups separate the shared feature extractor from the two classifier
    heads so the update rules can be written (and checked) per group.
    Iteration order is insertion order and is the canonical serialization
    order for checkpoints.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._groups: dict[str, str] = {}

    def add(self, name: str, data: Array, group: str) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        if group not in PARAM_GROUPS:
            raise ValueError(f"unknown parameter group: {group}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        self._groups[name] = group
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def group_of(self, name: str) -> str:
        return self._groups[name]

    def group_names(self, group: str) -> list[str]:
        return [n for n, g in self._groups.items() if g == group]

    def n_scalars(self) -> int:
        return sum(t.size for t in self._params.values())

    def collect_grads(self, tape: Tape) -> dict[str, Array]:
        """Per-name gradients after backward; zeros for untouched params."""
        return {name: tape.grad(t) for name, t in self._params.items()}

    def state(self) -> dict[str, Array]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state(self, state: dict[str, Array]) -> None:
        for name, t in self._params.items():
            if name not in state:
                raise ValueError(f"missing parameter in state: {name}")
            src = np.asarray(state[name], dtype=np.float64)
            if src.shape != t.shape:
                raise ValueError(
                    f"shape mismatch for parameter {name}: "
                    f"have {t.shape}, loading {src.shape}")
            t.data = src.copy()


@dataclass
class OptimizerState:
    """Update-rule state; SGD carries no moments, Adam carries two."""

    kind: str
    lr: float
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)

    @classmethod
    def sgd(cls, lr: float) -> "OptimizerState":
        return cls(kind="sgd", lr=lr)

    @classmethod
    def adam(cls, params: ParameterSet, lr: float, beta1: float = 0.9,
             beta2: float = 0.999, eps: float = 1e-8) -> "OptimizerState":
        state = cls(kind="adam", lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, t in params.items():
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        return state


def _require_grads(params: ParameterSet, grads: dict[str, Array]) -> None:
    missing = [n for n in params if n not in grads]
    if missing:
        raise ValueError(f"missing gradient entries for: {', '.join(missing)}")


def sgd_step(params: ParameterSet, grads: dict[str, Array], lr: float) -> None:
    """In-place descent step: p <- p - lr * g for every parameter."""
    _require_grads(params, grads)
    for name, t in params.items():
        t.data = t.data - lr * grads[name]


def adam_step(params: ParameterSet, grads: dict[str, Array],
              state: OptimizerState) -> None:
    """Standard Adam recursion with bias correction; increments step_count."""
    if state.kind != "adam":
        raise ValueError(f"adam_step on optimizer state of kind {state.kind}")
    _require_grads(params, grads)
    for name in params:
        if not np.all(np.isfinite(grads[name])):
            raise NumericsError(
                f"non-finite gradient for parameter {name}; update aborted")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        mhat = state.m[name] / bc1
        vhat = state.v[name] / bc2
        p.data = p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)


def optimizer_step(params: ParameterSet, grads: dict[str, Array],
                   state: OptimizerState) -> None:
    if state.kind == "sgd":
        sgd_step(params, grads, state.lr)
        state.step_count += 1
    elif state.kind == "adam":
        adam_step(params, grads, state)
    else:
        raise ValueError(f"unknown optimizer kind: {state.kind}")


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    max_abs_err: float
    worst_coord: int
    analytic_at_worst: float
    numeric_at_worst: float
    n_coords: int


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    threshold: float

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def worst(self) -> GradCheckEntry | None:
        return max(self.entries, key=lambda e: e.max_rel_err, default=None)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.threshold

    def summary(self) -> str:
        lines = [
            f"{'PASS' if self.passed else 'FAIL'} "
            f"max_rel_err={self.max_rel_err:.3e} threshold={self.threshold:.1e}"
        ]
        w = self.worst
        if w is not None:
            lines.append(
                f"worst: {w.name}[{w.worst_coord}] "
                f"analytic={w.analytic_at_worst:.6e} "
                f"numeric={w.numeric_at_worst:.6e}")
        return "\n".join(lines)


def check_gradients(closure: Callable[[], Tensor], params: ParameterSet,
                    eps: float = 1e-5, coords_per_tensor: int = 32,
                    seed: int = 0, rel_floor: float = 1e-3,
                    abs_floor: float = 1e-10,
                    threshold: float = 1e-5) -> GradCheckReport:
    """Compare backpropagated gradients against central finite differences.

    ``closure`` must be a deterministic function of the current parameter
    values that returns the scalar loss tensor. Large tensors are
    subsampled (at least ``coords_per_tensor`` coordinates, seed-pinned).
    A coordinate where both gradients are below ``abs_floor`` counts as
    exact agreement; otherwise the error is |a - n| / max(|a|, |n|,
    ``rel_floor``), so vanishing coordinates are judged on an absolute
    scale where finite differences are meaningful.
    """
    if not 0.0 < eps <= 1e-3:
        raise ValueError(f"eps must be in (0, 1e-3], got {eps}")
    with Tape() as tape:
        loss = closure()
    if len(tape) == 0 or loss.tape is not tape or loss.node_id is None:
        # constant closure: nothing reached the tape, all gradients vanish
        analytic = {name: np.zeros_like(p.data) for name, p in params.items()}
    else:
        tape.backward(loss)
        analytic = params.collect_grads(tape)

    entries = []
    for idx, (name, p) in enumerate(params.items()):
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= coords_per_tensor:
            coords = np.arange(n)
        else:
            rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
            coords = np.sort(rng.choice(n, size=coords_per_tensor, replace=False))
        a_flat = analytic[name].reshape(-1)
        worst_rel = 0.0
        worst_abs = 0.0
        worst_coord = int(coords[0]) if len(coords) else 0
        worst_a = worst_n = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = closure().item()
            flat[c] = orig - eps
            f_minus = closure().item()
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = a_flat[c]
            abs_err = abs(a - numeric)
            if max(abs(a), abs(numeric)) < abs_floor:
                rel = 0.0
            else:
                rel = abs_err / max(abs(a), abs(numeric), rel_floor)
            if rel >= worst_rel:
                worst_rel = rel
                worst_abs = abs_err
                worst_coord = int(c)
                worst_a = float(a)
                worst_n = float(numeric)
        entries.append(GradCheckEntry(
            name=name, max_rel_err=worst_rel, max_abs_err=worst_abs,
            worst_coord=worst_coord, analytic_at_worst=worst_a,
            numeric_at_worst=worst_n, n_coords=len(coords)))
    return GradCheckReport(entries=entries, threshold=threshold)
