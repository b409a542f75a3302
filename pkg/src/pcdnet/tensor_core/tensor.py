"""Tensor, Parameter and the Tape that records differentiable operations.

Operations only record themselves while a :class:`Tape` is active, so code that
runs outside ``with Tape():`` is gradient-free inference by construction::

    with Tape() as tape:
        y = ops.relu(x)
        loss = ops.sum_all(y)
    tape.backward(loss)
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import NumericError

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def check_finite(arr: np.ndarray, what: str = "tensor") -> None:
    # A single reduction is far cheaper than isfinite() over the whole array.
    if arr.size and not np.isfinite(arr.sum()):
        raise NumericError(f"non-finite values in {what}")


def _checks_every_op() -> bool:
    return getattr(_state, "every_op", True)


@contextmanager
def leaf_checks_only():
    """Skip per-op finite checks; leaf gradients are still checked.

    NaN and Inf propagate, so a bad intermediate still surfaces in the loss or
    in some parameter gradient. Training uses this to save a full pass over
    every activation.
    """
    prev = _checks_every_op()
    _state.every_op = False
    try:
        yield
    finally:
        _state.every_op = prev


class Tensor:
    """Shaped float array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


class Parameter(Tensor):
    """A named, learnable tensor. Frozen parameters still receive gradients
    but optimizers leave them untouched."""

    __slots__ = ("trainable",)

    def __init__(self, data, name: str, trainable: bool = True):
        super().__init__(data, requires_grad=True, name=name)
        self.trainable = trainable

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    inputs: tuple
    output: Tensor
    backward: BackwardFn
    op: str


@dataclass
class Tape:
    """Ordered record of executed operations."""

    nodes: list = field(default_factory=list)
    _produced: set = field(default_factory=set, repr=False)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            stack.remove(self)

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._produced.add(id(node.output))

    def backward(self, output: Tensor, seed: Optional[np.ndarray] = None) -> None:
        """Propagate d(output) back through every recorded op, newest first.

        Leaf tensors (those not produced on this tape) accumulate into
        ``.grad``; intermediates only live for the duration of the call.
        """
        if seed is None:
            if output.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            seed = np.ones_like(output.data)
        if id(output) not in self._produced:
            if output.requires_grad:
                output.accumulate(seed)
            return
        grads = {id(output): np.asarray(seed, dtype=output.dtype)}
        every_op = _checks_every_op()
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if every_op or key not in self._produced:
                    check_finite(gi, f"gradient of {node.op}")
                if key in self._produced:
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
                else:
                    t.accumulate(gi)


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap an op's forward output and record it on the active tape."""
    if _checks_every_op() or data.size == 1:
        check_finite(data, f"output of {op}")
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(Node(tuple(inputs), out, backward, op))
    return out
