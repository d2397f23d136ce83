"""Dense-tensor substrate with taped reverse-mode gradients.

Storage is row-major contiguous float32 (float64 available for
verification). There is no general autodiff DSL: the operation set in
``ops.py`` is fixed to what the networks need. Recording is explicit --
ops append tape entries to the innermost active :class:`Graph`; with no
graph open, forward passes run in pure inference mode and produce
tensors with ``requires_grad=False``.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

from ..exceptions import ContractError, NumericsError

_CHECKED = False

SUPPORTED_DTYPES = (np.float32, np.float64)


def set_checked(flag: bool) -> None:
    """Toggle checked mode: any non-finite value raises NumericsError."""
    global _CHECKED
    _CHECKED = bool(flag)


def checked_mode() -> bool:
    return _CHECKED


@contextmanager
def checked(flag: bool = True):
    prev = _CHECKED
    set_checked(flag)
    try:
        yield
    finally:
        set_checked(prev)


def _validate_finite(arr: np.ndarray, where: str) -> None:
    if _CHECKED and not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite value produced by {where}")


class Tensor:
    """A dense array with an optional gradient buffer.

    Gradients accumulate across backward passes until cleared with
    :meth:`zero_grad`.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in SUPPORTED_DTYPES:
            arr = arr.astype(np.float32)
        arr = np.ascontiguousarray(arr)
        _validate_finite(arr, "tensor construction")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ContractError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class _Entry:
    __slots__ = ("kind", "inputs", "output", "backward_fn")

    def __init__(self, kind, inputs, output, backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """Tape of recorded operations in execution (topological) order."""

    def __init__(self):
        self.entries: list[_Entry] = []

    def __len__(self) -> int:
        return len(self.entries)

    @contextmanager
    def recording(self):
        _ACTIVE.append(self)
        try:
            yield self
        finally:
            _ACTIVE.pop()


_ACTIVE: list[Graph] = []


def active_graph() -> Optional[Graph]:
    return _ACTIVE[-1] if _ACTIVE else None


def record(kind: str, inputs: Sequence[Tensor], output: Tensor,
           backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> None:
    """Append a tape entry to the active graph, if any.

    ``backward_fn`` maps the upstream gradient of ``output`` to one
    gradient array (or None) per input, in input order.
    """
    g = active_graph()
    if g is not None and output.requires_grad:
        g.entries.append(_Entry(kind, tuple(inputs), output, backward_fn))


def backward(graph: Graph, loss: Tensor) -> None:
    """Populate ``grad`` with d(loss)/d(tensor) for every recorded tensor.

    Visits the tape exactly once in reverse order. Local gradients are
    collected in a scratch map and added into each tensor's ``grad`` at
    the end, so calling backward twice on the same graph doubles the
    accumulated gradients.
    """
    if loss.size != 1:
        raise ContractError("backward requires a scalar loss")
    produced = {id(e.output) for e in graph.entries}
    if id(loss) not in produced:
        raise ContractError("loss is not an output recorded on this graph")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    for entry in reversed(graph.entries):
        g_out = grads.get(id(entry.output))
        if g_out is None:
            continue
        local = entry.backward_fn(g_out)
        for t, g_in in zip(entry.inputs, local):
            if g_in is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g_in
            else:
                grads[key] = g_in
                tensors[key] = t

    for key, t in tensors.items():
        t.accumulate_grad(np.asarray(grads[key], dtype=t.data.dtype))


def zero_grads(params) -> None:
    """Clear gradients on an iterable or mapping of tensors."""
    values = params.values() if hasattr(params, "values") else params
    for p in values:
        p.zero_grad()
