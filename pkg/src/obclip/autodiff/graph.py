"""Tape, tensors and the reverse pass.

A :class:`Graph` is an append-only tape. Every tracked :class:`Tensor` points
at one node on one graph; untracked tensors (``graph is None``) are plain
constants. Nodes keep the arrays their backward rule reads in ``saved`` so the
tape's memory footprint can be audited node by node.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np


class AutodiffError(Exception):
    """Base class for errors raised by the differentiation engine."""


class ShapeError(AutodiffError, ValueError):
    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class AxisError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


class GraphError(AutodiffError):
    pass


@dataclass
class Node:
    op: str
    inputs: tuple  # node ids, or None for constant inputs
    backward: Optional[Callable]
    saved: tuple = ()
    tag: Optional[str] = None
    flops: int = 0
    name: Optional[str] = None


class Tensor:
    """Dense float64 array, optionally bound to a node on a :class:`Graph`."""

    __slots__ = ("data", "graph", "node_id")
    __array_priority__ = 100

    def __init__(self, data, graph: Optional["Graph"] = None, node_id: Optional[int] = None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.graph = graph
        self.node_id = node_id

    @classmethod
    def _wrap(cls, arr: np.ndarray, graph=None, node_id=None) -> "Tensor":
        # skips the defensive copy; arr must be freshly produced by an op
        t = object.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.graph = graph
        t.node_id = node_id
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.graph is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        where = f", node={self.node_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{where})"

    # operator sugar; the functional ops in ``ops`` are the real API
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.add(self, ops.neg(other))

    def __mul__(self, other):
        from . import ops
        if isinstance(other, (int, float)) or (isinstance(other, Tensor) and other.size == 1 and self.size != 1):
            return ops.scalar_mul(self, other)
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Graph:
    """Append-only tape of differentiable operations.

    Single-owner: do not build or differentiate one graph from several threads.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.values: list[np.ndarray] = []
        self.grads: Optional[dict[int, np.ndarray]] = None
        self.check_finite = check_finite
        self._tag: Optional[str] = None

    def __len__(self) -> int:
        return len(self.nodes)

    @contextmanager
    def tag(self, name: str) -> Iterator[None]:
        """Label every node created inside the block with ``name``."""
        prev, self._tag = self._tag, name
        try:
            yield
        finally:
            self._tag = prev

    def leaf(self, data, name: Optional[str] = None) -> Tensor:
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        node = Node("leaf", (), None, (), self._tag, 0, name)
        return self._append(node, arr)

    def _append(self, node: Node, arr: np.ndarray) -> Tensor:
        self.nodes.append(node)
        self.values.append(arr)
        return Tensor._wrap(arr, self, len(self.nodes) - 1)

    def record(self, op: str, inputs: Sequence[Tensor], out: np.ndarray,
               backward: Callable, saved: tuple = (), flops: int = 0) -> Tensor:
        out = np.asarray(out, dtype=np.float64)
        if self.check_finite and not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{op}: produced non-finite values")
        ids = tuple(t.node_id if t.tracked else None for t in inputs)
        node = Node(op, ids, backward, tuple(saved), self._tag, int(flops))
        return self._append(node, out)

    def saved_elements(self, node_id: int) -> int:
        return int(sum(a.size for a in self.nodes[node_id].saved))

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient buffer for ``t`` from the last backward pass (zeros if unreached)."""
        if self.grads is None:
            raise GraphError("backward has not been run on this graph")
        if t.graph is not self:
            raise GraphError("tensor does not belong to this graph")
        g = self.grads.get(t.node_id)
        return np.zeros_like(t.data) if g is None else g


def backward(graph: Graph, root: Tensor) -> dict[int, Tensor]:
    """Reverse pass from a scalar ``root``; returns node id -> gradient."""
    if root.graph is not graph:
        raise GraphError("root was not produced on this graph")
    if root.size != 1:
        raise ShapeError("backward", root.shape, detail="root must be a scalar")
    grads: list[Optional[np.ndarray]] = [None] * len(graph.nodes)
    grads[root.node_id] = np.ones_like(root.data)
    for i in range(root.node_id, -1, -1):
        g = grads[i]
        node = graph.nodes[i]
        if g is None or node.backward is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if inp is None or gi is None:
                continue
            grads[inp] = gi if grads[inp] is None else grads[inp] + gi
    graph.grads = {i: g for i, g in enumerate(grads) if g is not None}
    return {i: Tensor._wrap(g.copy()) for i, g in graph.grads.items()}


def _base(a: np.ndarray) -> np.ndarray:
    while a.base is not None and isinstance(a.base, np.ndarray):
        a = a.base
    return a


def retained_elements(graph: Graph, tag: str, include_outputs_of: Sequence[Tensor] = ()) -> int:
    """Elements of storage allocated inside ``tag`` that the tape keeps for backward.

    Saved arrays that are views of (or identical to) values produced outside the
    tagged subgraph are not counted; shared storage is counted once. Values in
    ``include_outputs_of`` (e.g. the logits handed to the loss) are added.
    """
    outside = {id(_base(graph.values[i])) for i, n in enumerate(graph.nodes) if n.tag != tag}
    seen: dict[int, int] = {}
    arrays = [a for n in graph.nodes if n.tag == tag for a in n.saved]
    arrays += [t.data for t in include_outputs_of]
    for a in arrays:
        b = _base(a)
        if id(b) in outside:
            continue
        seen[id(b)] = b.size
    return int(sum(seen.values()))


def tagged_flops(graph: Graph, tag: str) -> int:
    return int(sum(n.flops for n in graph.nodes if n.tag == tag))
