"""Dense tensors plus a recorded operation graph for reverse-mode gradients.

Values live in plain C-contiguous numpy arrays. Training math runs in
float32; verification (finite-difference checks) selects float64 per
tensor. There is no broadcasting anywhere: every operation states its
exact shape contract and rejects anything else.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_ALLOWED_DTYPES = (np.float32, np.float64)


class Tensor:
    """N-dimensional array of reals with an optional gradient buffer.

    ``data`` is C-contiguous (row-major). ``grad`` is either None or an
    array of identical shape/dtype. Tensors are treated as immutable
    after creation except for gradient accumulation and optimizer
    updates, which replace ``data`` wholesale.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad: bool = True):
        typed = isinstance(data, (np.ndarray, np.generic))
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not typed or arr.dtype not in _ALLOWED_DTYPES:
            # python scalars/lists land in float32; numpy values keep their dtype
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.dtype not in _ALLOWED_DTYPES:
            raise ValueError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        if arr.ndim == 0:
            self.data: np.ndarray = arr.copy()  # ascontiguousarray would force 1-d
        else:
            self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A gradient-stopping view: same values, no history, no grad."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, delta: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = delta.copy()
        else:
            self.grad += delta

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class Node:
    """One recorded operation: tag, input tensors, output, backward rule."""

    __slots__ = ("tag", "inputs", "out", "backward_fn")

    def __init__(self, tag: str, inputs: Sequence[Tensor], out: Tensor,
                 backward_fn: Callable[[np.ndarray], None]):
        self.tag = tag
        self.inputs = tuple(inputs)
        self.out = out
        self.backward_fn = backward_fn


class Graph:
    """Operation tape in creation order.

    Creation order is a valid topological order because an operation's
    inputs necessarily exist before its output. Backward walks the tape
    once, in reverse.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, tag: str, inputs: Sequence[Tensor], out: Tensor,
               backward_fn: Callable[[np.ndarray], None]) -> None:
        self.nodes.append(Node(tag, inputs, out, backward_fn))

    def __len__(self) -> int:
        return len(self.nodes)


def backward(root: Tensor, graph: Graph) -> None:
    """Populate gradients of everything ``root`` depends on.

    Seeds the root gradient with 1 and visits each recorded node exactly
    once in reverse creation order; fan-out contributions sum. Leaves
    that do not influence the root keep ``grad is None`` (read as zero).
    """
    if root.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.shape}")
    root.grad = np.ones_like(root.data)
    for node in reversed(graph.nodes):
        out_grad = node.out.grad
        if out_grad is None:
            continue
        node.backward_fn(out_grad)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()
