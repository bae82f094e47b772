"""
Tests for the tape and the reverse sweep.
"""
from .fixtures import check_gradient_draws
from combinet.tensor import Tape, Tensor, backward
from combinet.utils import InvalidArgument, MissingTape, TapeConsumed
import numpy as np
import pytest


def test_square_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = (x * x).sum()
    grads = backward(loss, tape)
    assert [2.0, 4.0, 6.0] == grads[id(x)].tolist()
    assert [2.0, 4.0, 6.0] == x.grad.tolist()


def test_nothing_recorded_outside_tape():
    x = Tensor([1.0], requires_grad=True)
    y = x * 3.0
    assert not y.requires_grad
    with Tape() as tape:
        z = x * 3.0
    assert z.requires_grad
    assert 1 == len(tape)


def test_shared_input_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with Tape() as tape:
        loss = (x * x + x * 4.0).sum()
    assert [8.0] == backward(loss, tape)[id(x)].tolist()


def test_ndarray_on_the_left():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    weights = np.array([[1.0, 2.0], [3.0, 4.0]])
    with Tape() as tape:
        loss = (weights * x).sum()
    assert weights.tolist() == backward(loss, tape)[id(x)].tolist()


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(InvalidArgument):
        backward(y, tape)


def test_backward_needs_recording_tape():
    x = Tensor([1.0], requires_grad=True)
    loss = (x * 2.0).sum()
    with pytest.raises(MissingTape):
        backward(loss, Tape())


def test_tape_sweeps_once():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        loss = (x * 2.0).sum()
    backward(loss, tape)
    with pytest.raises(TapeConsumed):
        backward(loss, tape)


def test_nested_tapes_restore_outer():
    outer = Tape()
    with outer:
        with Tape() as inner:
            pass
        x = Tensor([1.0], requires_grad=True)
        x * 2.0
    assert 0 == len(inner)
    assert 1 == len(outer)


@pytest.mark.parametrize(
    "fn",
    [
        lambda a, b: a * b + a,
        lambda a, b: a / (b * b + 1.0),
        lambda a, b: (a - b) ** 2,
        lambda a, b: (a * a + 1.0).log() + b.exp(),
        lambda a, b: a.sum(axis=1, keepdims=True) * b,
        lambda a, b: a.mean(axis=0) + b.sum(axis=0),
    ],
)
def test_elementwise_gradients(fn):
    assert check_gradient_draws(fn, (3, 4), (3, 4)) < 1e-5


def test_broadcast_gradient_is_summed():
    bias = Tensor(np.zeros((1, 3, 1, 1)), requires_grad=True)
    x = Tensor(np.ones((2, 3, 4, 4)))
    with Tape() as tape:
        loss = (x + bias).sum()
    assert [[[[32.0]], [[32.0]], [[32.0]]]] == backward(loss, tape)[id(bias)].tolist()
