"""Dense float64 tensors recorded on an explicit reverse-mode tape.

Forward operations append (output, inputs, backward_rule) nodes to the
innermost active ``Tape``; because nodes are appended in execution order the
tape is topologically sorted by construction, and ``backward`` is a single
reverse sweep. With no tape active (evaluation, explanation) the same
operations run without any recording overhead.
"""

import numpy as np

from .errors import DimensionError, PreconditionError


class Tensor:
    """An n-dimensional float64 array plus an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.size == 0:
            raise DimensionError("tensors must have at least one element")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise PreconditionError(
                f"item() needs a one-element tensor, got shape {self.shape}"
            )
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return add(self, other)

    def __mul__(self, other):
        if not isinstance(other, (int, float)):
            return NotImplemented
        return scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


_TAPE_STACK = []


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of one forward pass, consumed by a single backward."""

    def __init__(self):
        self.nodes = []
        self._spent = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def backward(self, loss):
        backward(self, loss)


def record(out, inputs, backward_rule):
    """Attach a node for `out = f(inputs)` to the active tape, if any.

    `backward_rule(out_grad)` must return one gradient array (or None) per
    input, in order.
    """
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append((out, inputs, backward_rule))
    return out


def backward(tape, loss):
    """Reverse-sweep the tape, accumulating grads into requires_grad tensors."""
    if loss.data.size != 1:
        raise PreconditionError(
            f"backward needs a scalar loss, got shape {loss.shape}"
        )
    if tape._spent:
        raise PreconditionError("tape already consumed by a previous backward")
    if not any(out is loss for out, _, _ in tape.nodes):
        raise PreconditionError("loss tensor was not recorded on this tape")
    tape._spent = True

    loss.grad = np.ones_like(loss.data)
    for out, inputs, rule in reversed(tape.nodes):
        gout = out.grad
        if gout is None:
            continue
        gins = rule(gout)
        for tensor, gin in zip(inputs, gins):
            if gin is None or not tensor.requires_grad:
                continue
            if tensor.grad is None:
                tensor.grad = gin
            else:
                tensor.grad = tensor.grad + gin


def add(a, b):
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data + b.data)
    return record(out, (a, b), lambda g: (g, g))


def scale(a, alpha):
    """Multiply by a python float."""
    out = Tensor(a.data * alpha)
    return record(out, (a,), lambda g: (g * alpha,))
