"""Tape, variables and the flat parameter store."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class TapeError(RuntimeError):
    pass


class Var:
    """A value on the tape.

    Parameter leaves own a gradient buffer that is a view into the
    :class:`ParamStore`; backward adds into it in place.
    """

    __slots__ = ("value", "grad", "requires_grad", "owns_grad", "name")

    def __init__(self, value, requires_grad: bool = False, grad: np.ndarray | None = None,
                 name: str | None = None):
        self.value = value
        self.requires_grad = requires_grad
        self.grad = grad
        self.owns_grad = grad is not None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}(shape={getattr(self.value, 'shape', ())}, requires_grad={self.requires_grad})"


def leaf(value, name: str | None = None) -> Var:
    """A differentiable input that is not part of a ParamStore."""
    value = np.asarray(value, dtype=np.float64)
    return Var(value, requires_grad=True, grad=np.zeros_like(value), name=name)


def const(value) -> Var:
    return Var(value, requires_grad=False)


Backward = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of executed ops; supports exactly one reverse sweep.

    With ``enabled=False`` nothing is recorded, which is what evaluation uses.
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.nodes: list[tuple[Var, tuple, Backward]] = []
        self.consumed = False

    def record(self, value, inputs: Sequence[Var | None], backward: Backward) -> Var:
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        req = self.enabled and any(x is not None and x.requires_grad for x in inputs)
        out = Var(value, requires_grad=req)
        if req:
            self.nodes.append((out, tuple(inputs), backward))
        return out

    def __len__(self):
        return len(self.nodes)


def backward(tape: Tape, loss: Var, loss_grad: float = 1.0) -> None:
    """Reverse sweep from ``loss``; parameter gradients accumulate in place."""
    if tape.consumed:
        raise TapeError("tape consumed twice")
    tape.consumed = True
    if not loss.requires_grad:
        return
    seed = np.full(np.shape(loss.value), loss_grad, dtype=np.float64)
    if loss.owns_grad:
        loss.grad += seed
    else:
        loss.grad = seed
    nodes, tape.nodes = tape.nodes, []
    while nodes:
        out, inputs, fn = nodes.pop()
        g = out.grad
        if g is None:
            continue
        if not out.owns_grad:
            out.grad = None
        grads = fn(g)
        for x, gx in zip(inputs, grads):
            if x is None or gx is None or not x.requires_grad:
                continue
            if x.owns_grad:
                x.grad += gx
            elif x.grad is None:
                x.grad = gx
            else:
                x.grad = x.grad + gx


class ParamStore:
    """All trainable parameters in one flat float64 array with named views."""

    def __init__(self):
        self._pending: list[tuple[str, np.ndarray]] = []
        self.views: dict[str, tuple[int, tuple[int, ...]]] = {}
        self.values = np.zeros(0)
        self.grads = np.zeros(0)
        self._vars: dict[str, Var] = {}

    def add(self, name: str, init: np.ndarray) -> None:
        if self._vars:
            raise TapeError("parameter store already finalized")
        if name in self.views or any(n == name for n, _ in self._pending):
            raise KeyError(f"duplicate parameter {name!r}")
        self._pending.append((name, np.asarray(init, dtype=np.float64)))

    def finalize(self) -> "ParamStore":
        offset = 0
        for name, arr in self._pending:
            self.views[name] = (offset, arr.shape)
            offset += arr.size
        self.values = np.zeros(offset)
        self.grads = np.zeros(offset)
        for name, arr in self._pending:
            self.view(name)[...] = arr
        self._pending = []
        for name in self.views:
            self._vars[name] = Var(self.view(name), requires_grad=True,
                                   grad=self.view(name, grads=True), name=name)
        return self

    def view(self, name: str, grads: bool = False) -> np.ndarray:
        off, shape = self.views[name]
        n = int(np.prod(shape, dtype=np.int64))
        buf = self.grads if grads else self.values
        return buf[off:off + n].reshape(shape)

    def __getitem__(self, name: str) -> Var:
        return self._vars[name]

    def __contains__(self, name: str) -> bool:
        return name in self.views

    def __len__(self):
        return self.values.size

    def names(self) -> list[str]:
        return list(self.views)

    def zero_grad(self) -> None:
        self.grads[...] = 0.0

    def load(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise ValueError(f"expected {self.values.size} parameters, got {values.size}")
        self.values[...] = values
