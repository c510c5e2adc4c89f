"""
Dense tensor type and the gradient tape.

Tensors wrap a contiguous row-major (C order) numpy array. Training and inference run in
32-bit floats; `check_mode()` switches the default dtype to float64 for the finite-difference
oracle. Operations are recorded on the tape only when at least one input requires a
gradient and recording is enabled (see `no_grad()`).
"""

import contextlib
import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from cfld.common.errors import ContractError

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_state = threading.local()


def default_dtype() -> type:
    return getattr(_state, "dtype", np.float32)


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def is_shape_only() -> bool:
    return getattr(_state, "shape_only", False)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording on the current thread."""
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextlib.contextmanager
def check_mode() -> Iterator[None]:
    """64-bit shadow mode: new tensors default to float64."""
    previous = default_dtype()
    _state.dtype = np.float64
    try:
        yield
    finally:
        _state.dtype = previous


@contextlib.contextmanager
def shape_only() -> Iterator[None]:
    """Build modules without allocating parameter memory.

    Parameters created in this mode are read-only zero-stride views; they carry the right
    shapes for counting but must never be used in a forward pass.
    """
    previous = is_shape_only()
    _state.shape_only = True
    try:
        yield
    finally:
        _state.shape_only = previous


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


@dataclass(eq=False)
class Node:
    op: str
    parents: tuple["Tensor", ...]
    backward: BackwardFn
    seq: int
    out_id: int


class Tape:
    """Ordered record of differentiable operations.

    Nodes get sequence numbers in execution order, so a node's inputs always carry smaller
    numbers than the node itself. Nodes hang off their output tensors rather than a global
    list: a graph is released as soon as its tensors are.
    """

    def __init__(self) -> None:
        self._counter = itertools.count()
        self._lock = threading.Lock()

    def record(
        self,
        op: str,
        out: "Tensor",
        parents: tuple["Tensor", ...],
        backward: BackwardFn,
    ) -> None:
        with self._lock:
            seq = next(self._counter)
        out._node = Node(op=op, parents=parents, backward=backward, seq=seq, out_id=id(out))

    def backward(self, loss: "Tensor") -> None:
        """Propagate d(loss)/d(.) to every reachable leaf, visiting nodes in reverse order."""
        nodes: dict[int, Node] = {}
        stack = [loss]
        while stack:
            tensor = stack.pop()
            node = tensor._node
            if node is None or node.seq in nodes:
                continue
            nodes[node.seq] = node
            stack.extend(node.parents)

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for seq in sorted(nodes, reverse=True):
            node = nodes[seq]
            grad = grads.pop(node.out_id, None)
            if grad is None:
                continue
            for parent, parent_grad in zip(node.parents, node.backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = unbroadcast(parent_grad, parent.shape)
                if parent._node is None:
                    parent.accumulate_grad(parent_grad)
                    continue
                key = id(parent)
                grads[key] = grads[key] + parent_grad if key in grads else parent_grad


TAPE = Tape()


class Tensor:
    """Dense n-dimensional float array with optional tape participation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        array = np.asarray(data)
        dtype = default_dtype()
        if array.dtype != dtype:
            array = array.astype(dtype)
        self.data: np.ndarray = array
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @classmethod
    def from_op(
        cls,
        op: str,
        data: np.ndarray,
        parents: tuple["Tensor", ...],
        backward: BackwardFn,
    ) -> "Tensor":
        out = cls(data)
        if grad_enabled() and any(parent.requires_grad for parent in parents):
            out.requires_grad = True
            TAPE.record(op, out, parents, backward)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def accumulate_grad(self, grad: np.ndarray) -> None:
        grad = np.asarray(grad, dtype=self.data.dtype)
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every leaf that requires a gradient.

    Gradients accumulate across calls; reset them with `zero_grad()` on the leaves or the
    optimiser.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.accumulate_grad(np.ones_like(loss.data))
            return
        raise ContractError(
            "Loss is not on the tape: it was computed from constants or under no_grad()"
        )
    TAPE.backward(loss)
