"""
Dense N-dimensional tensors and the recording tape used for reverse-mode
differentiation.

Operations only record onto a tape while one is active::

    with Tape() as tape:
        loss = (x * x).sum()
    grads = backward(loss, tape)

Outside of a tape nothing is recorded, so inference keeps no adjoint state.
"""
import collections
import threading

import numpy as np

from .utils import InvalidArgument, MissingTape, TapeConsumed

_local = threading.local()

Record = collections.namedtuple("Record", ("output", "inputs", "adjoint"))


def current_tape():
    return getattr(_local, "tape", None)


class Tape:
    "Ordered record of the differentiable operations run while it is active"

    def __init__(self):
        self.records = []
        self.consumed = False
        self._previous = []

    def __enter__(self):
        self._previous.append(current_tape())
        _local.tape = self
        return self

    def __exit__(self, exc_type, exc_value, tb):
        _local.tape = self._previous.pop()

    def __len__(self):
        return len(self.records)

    def record(self, output, inputs, adjoint):
        self.records.append(Record(output, tuple(inputs), adjoint))
        output._tape = self

    def backward(self, loss):
        return backward(loss, self)


class Tensor:
    # numpy defers to our reflected operators, e.g. ndarray * Tensor
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def size(self):
        return int(self.data.size)

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, name=self.name)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return "<Tensor{} shape={} requires_grad={}>".format(
            " {}".format(self.name) if self.name else "", self.shape, self.requires_grad
        )

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def apply(data, inputs, adjoint):
    """
    Wrap forward ``data`` in a Tensor, recording ``adjoint`` on the active tape
    when any of ``inputs`` requires gradients.

    ``adjoint(grad)`` returns one gradient (or None) per input.
    """
    tape = current_tape()
    requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires_grad)
    if requires_grad:
        tape.record(out, inputs, adjoint)
    return out


def unbroadcast(grad, shape):
    "Sum ``grad`` down to ``shape``, undoing numpy broadcasting"
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def adjoint(grad):
        return unbroadcast(grad, a.shape), unbroadcast(grad, b.shape)

    return apply(a.data + b.data, (a, b), adjoint)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def adjoint(grad):
        return unbroadcast(grad, a.shape), unbroadcast(-grad, b.shape)

    return apply(a.data - b.data, (a, b), adjoint)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def adjoint(grad):
        return (
            unbroadcast(grad * b.data, a.shape),
            unbroadcast(grad * a.data, b.shape),
        )

    return apply(a.data * b.data, (a, b), adjoint)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def adjoint(grad):
        return (
            unbroadcast(grad / b.data, a.shape),
            unbroadcast(-grad * out / b.data, b.shape),
        )

    return apply(out, (a, b), adjoint)


def power(a, exponent):
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise InvalidArgument("power: exponent must be a plain number")

    def adjoint(grad):
        return (grad * exponent * a.data ** (exponent - 1),)

    return apply(a.data ** exponent, (a,), adjoint)


def log(a):
    a = as_tensor(a)

    def adjoint(grad):
        return (grad / a.data,)

    return apply(np.log(a.data), (a,), adjoint)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def adjoint(grad):
        return (grad * out,)

    return apply(out, (a,), adjoint)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def adjoint(grad):
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, a.shape).copy(),)

    return apply(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), adjoint)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.size // max(np.size(out), 1)

    def adjoint(grad):
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad / count, a.shape).copy(),)

    return apply(out, (a,), adjoint)


def backward(loss, tape):
    """
    Reverse sweep over ``tape`` from the scalar ``loss``.

    Returns a map of ``id(tensor)`` to gradient for every leaf tensor that
    requires gradients, and accumulates the same values into ``tensor.grad``.
    A tape can only be swept once.
    """
    if loss.size != 1:
        raise InvalidArgument(
            "backward: loss must hold a single element, got shape {}".format(loss.shape)
        )
    if loss._tape is not tape:
        raise MissingTape("backward: loss was not recorded on this tape")
    if tape.consumed:
        raise TapeConsumed("backward: tape was already swept; record the forward pass again")
    tape.consumed = True
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = collections.OrderedDict()
    for record in reversed(tape.records):
        grad = grads.pop(id(record.output), None)
        if grad is None:
            continue
        for tensor, input_grad in zip(record.inputs, record.adjoint(grad)):
            if input_grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + input_grad
            else:
                grads[key] = input_grad
            if tensor._tape is None:
                leaves[key] = tensor
    result = {}
    for key, tensor in leaves.items():
        grad = grads[key].reshape(tensor.shape)
        tensor.grad = grad if tensor.grad is None else tensor.grad + grad
        result[key] = grad
    return result
