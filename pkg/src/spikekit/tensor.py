"""Dense float64 tensors with tape-based reverse-mode differentiation.

The engine is deliberately small: row-major float64 buffers, a recording
tape that replays backward rules in reverse order, and the one custom
gradient this project needs -- a Heaviside spike forward paired with a
rectangular surrogate backward. Elementwise ops accept identical shapes
or a scalar on either side; there is no general broadcasting.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, GradCheckError, ParameterError

Array = np.ndarray

# Backward rule: given the gradient on the op output, return one gradient
# per input (None for inputs that do not need one). Returned arrays may be
# views; the tape copies on aliasing hazards.
BackwardRule = Callable[[Array], tuple[Optional[Array], ...]]


def _as_array(value) -> Array:
    return np.asarray(value, dtype=np.float64)


class Tensor:
    """A dense n-dimensional float64 value, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Array] = None

    # -- conveniences -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A view of the same buffer that does not track gradients."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{req})"

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


# -- the tape ----------------------------------------------------------

_ACTIVE_TAPE: Optional["Tape"] = None


class Tape:
    """Ordered record of forward operations; backward replays it reversed.

    Use as a context manager around the forward pass. Gradients accumulate
    into the ``grad`` buffer of every requires_grad leaf reached from the
    loss; repeated backward calls accumulate further (call ``zero_grad``
    on leaves between steps).
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], BackwardRule]] = []
        self._output_ids: set[int] = set()

    def __len__(self) -> int:
        return len(self._records)

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(leaf) into every reachable requires_grad leaf."""
        if loss.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.shape}"
            )
        if not self._records:
            raise ContractError("backward on an empty tape")
        # id -> (tensor, grad buffer, owned). "owned" marks buffers this
        # pass allocated itself and may therefore mutate in place.
        grads: dict[int, list] = {id(loss): [loss, np.ones_like(loss.data), True]}
        for out, inputs, rule in reversed(self._records):
            entry = grads.pop(id(out), None)
            if entry is None:
                continue
            contributions = rule(entry[1])
            for tensor, contrib in zip(inputs, contributions):
                if contrib is None or not tensor.requires_grad:
                    continue
                # numpy collapses 0-d results to scalars; keep ndarray form
                if not isinstance(contrib, np.ndarray):
                    contrib = np.asarray(contrib)
                slot = grads.get(id(tensor))
                if slot is None:
                    grads[id(tensor)] = [tensor, contrib, False]
                elif slot[2]:
                    np.add(slot[1], contrib, out=slot[1])
                else:
                    slot[1] = np.asarray(slot[1] + contrib)
                    slot[2] = True
        for tid, (tensor, grad, owned) in grads.items():
            if tid in self._output_ids:
                continue  # intermediate value, not a leaf
            if tensor.grad is None:
                tensor.grad = grad if owned else grad.copy()
            else:
                tensor.grad = np.asarray(tensor.grad + grad)


def _record(out: Tensor, inputs: Sequence[Tensor], rule: BackwardRule) -> Tensor:
    """Attach a backward rule for ``out`` to the active tape, if any."""
    if out.requires_grad and _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE._records.append((out, tuple(inputs), rule))
        _ACTIVE_TAPE._output_ids.add(id(out))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Module-level alias for ``tape.backward(loss)``."""
    tape.backward(loss)


# -- shape rules -------------------------------------------------------


def _wrap(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise DimensionError(
        f"{op}: shapes {a.shape} and {b.shape} are neither identical nor scalar"
    )


def _reduce_to(grad: Array, shape: tuple[int, ...]) -> Array:
    """Collapse a gradient onto a scalar operand's shape."""
    if grad.shape == shape:
        return grad
    return grad.sum().reshape(shape) if shape else np.asarray(grad.sum())


# -- arithmetic --------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "add")
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad)

    def rule(g: Array):
        ga = _reduce_to(g, a.shape) if a.requires_grad else None
        gb = _reduce_to(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "sub")
    out = Tensor(a.data - b.data, a.requires_grad or b.requires_grad)

    def rule(g: Array):
        ga = _reduce_to(g, a.shape) if a.requires_grad else None
        gb = _reduce_to(-g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "mul")
    out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad)

    def rule(g: Array):
        ga = _reduce_to(g * b.data, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), rule)


def scale(a, factor: float) -> Tensor:
    """Multiply by a compile-time constant (no gradient for the factor)."""
    a = _wrap(a)
    factor = float(factor)
    out = Tensor(a.data * factor, a.requires_grad)
    return _record(out, (a,), lambda g: (g * factor,))


def add_const(a, constant: float) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data + float(constant), a.requires_grad)
    return _record(out, (a,), lambda g: (g,))


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.shape} @ {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner extents differ: {a.shape} @ {b.shape}"
        )
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad)

    def rule(g: Array):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), rule)


# -- nonlinearities ----------------------------------------------------


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    # tanh form of the logistic; noticeably faster than exp on large buffers.
    s = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    out = Tensor(s, a.requires_grad)
    return _record(out, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = _wrap(a)
    t = np.tanh(a.data)
    out = Tensor(t, a.requires_grad)
    return _record(out, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a) -> Tensor:
    a = _wrap(a)
    e = np.exp(a.data)
    out = Tensor(e, a.requires_grad)
    return _record(out, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.log(a.data), a.requires_grad)
    return _record(out, (a,), lambda g: (g / a.data,))


def compare_ge(a, b) -> Tensor:
    """Elementwise 0/1 mask for a >= b. Carries no gradient."""
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "compare_ge")
    return Tensor((a.data >= b.data).astype(np.float64), requires_grad=False)


def spike_surrogate(h: Tensor, v_th, a: float) -> Tensor:
    """Heaviside spike forward, width-``a`` rectangular surrogate backward.

    Forward emits 1 where h - v_th > 0 (strict), else 0. Backward passes
    upstream/a where |h - v_th| < a/2 (strict), else 0, for both h and,
    with opposite sign, the threshold.
    """
    if a <= 0:
        raise ParameterError(f"surrogate width must be positive, got {a}")
    h, v_th = _wrap(h), _wrap(v_th)
    _check_elementwise(h, v_th, "spike_surrogate")
    diff = np.asarray(h.data - v_th.data)
    spikes = (diff > 0).astype(np.float64)
    out = Tensor(spikes, h.requires_grad or v_th.requires_grad)
    np.abs(diff, out=diff)
    window = diff < (a / 2.0)
    inv_a = 1.0 / a

    def rule(g: Array):
        base = g * window
        base *= inv_a
        gh = base if h.requires_grad else None
        gv = _reduce_to(-base, v_th.shape) if v_th.requires_grad else None
        return gh, gv

    return _record(out, (h, v_th), rule)


# -- structure ---------------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _wrap(a)
    original = a.shape
    out = Tensor(a.data.reshape(shape), a.requires_grad)
    return _record(out, (a,), lambda g: (g.reshape(original),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), a.requires_grad)
    shape = a.shape

    def rule(g: Array):
        if axis is None:
            return (np.broadcast_to(g.reshape(()), shape),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record(out, (a,), rule)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    count = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def log_softmax(a: Tensor) -> Tensor:
    """Numerically stable log-softmax over the last axis."""
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    value = shifted - lse
    out = Tensor(value, a.requires_grad)
    softmax = np.exp(value)

    def rule(g: Array):
        return (g - softmax * g.sum(axis=-1, keepdims=True),)

    return _record(out, (a,), rule)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ContractError("stack of zero tensors")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise DimensionError(f"stack shapes differ: {shape} vs {t.shape}")
    out = Tensor(
        np.stack([t.data for t in tensors]),
        any(t.requires_grad for t in tensors),
    )

    def rule(g: Array):
        return tuple(g[i] if t.requires_grad else None for i, t in enumerate(tensors))

    return _record(out, tuple(tensors), rule)


def index0(a: Tensor, i: int) -> Tensor:
    """Slice along the leading axis (out = a[i])."""
    a = _wrap(a)
    out = Tensor(a.data[i], a.requires_grad)

    def rule(g: Array):
        full = np.zeros_like(a.data)
        full[i] = g
        return (full,)

    return _record(out, (a,), rule)


# -- gradient checking -------------------------------------------------


class GradCheckResult:
    """Per-parameter deviation between tape and finite-difference gradients."""

    __slots__ = ("name", "max_abs_dev", "max_rel_dev")

    def __init__(self, name: str, max_abs_dev: float, max_rel_dev: float):
        self.name = name
        self.max_abs_dev = max_abs_dev
        self.max_rel_dev = max_rel_dev

    def __repr__(self) -> str:
        return (
            f"GradCheckResult({self.name}: abs={self.max_abs_dev:.3e}, "
            f"rel={self.max_rel_dev:.3e})"
        )


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-4,
) -> dict[str, GradCheckResult]:
    """Compare tape gradients of a scalar function against central differences.

    ``f`` must be a deterministic closure over ``params`` returning a scalar
    Tensor. Raises GradCheckError when any evaluation or gradient is not
    finite, naming the parameter being probed.
    """
    if eps <= 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise GradCheckError(f"non-finite tape gradient for parameter {name!r}")
        analytic[name] = g.copy()

    results = {}
    for name, p in params.items():
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            hi = f().item()
            flat[i] = saved - eps
            lo = f().item()
            flat[i] = saved
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise GradCheckError(
                    f"non-finite evaluation while probing parameter {name!r}"
                )
            nflat[i] = (hi - lo) / (2.0 * eps)
        dev = np.abs(analytic[name] - numeric)
        denom = np.maximum(np.maximum(np.abs(analytic[name]), np.abs(numeric)), 1e-12)
        # Where both sides vanish, the comparison is exact, not 0/0.
        both_zero = (np.abs(analytic[name]) < 1e-12) & (np.abs(numeric) < 1e-12)
        rel = np.where(both_zero, 0.0, dev / denom)
        results[name] = GradCheckResult(name, float(np.max(dev, initial=0.0)),
                                        float(np.max(rel, initial=0.0)))
    return results


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad)
