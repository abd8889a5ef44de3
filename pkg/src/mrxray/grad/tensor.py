"""Reverse-mode autodiff core: Tensor values and the operation Tape.

The engine is define-by-run: a fresh :class:`Tape` is entered for every
forward pass, operations record themselves onto the active tape, and
:func:`backward` replays the records in reverse.  Without an active tape,
operations run in plain inference mode and record nothing.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ContractError, DimensionError, NumericsError, TapeError

_FLOAT_DTYPES = (np.float32, np.float64)

# When True, every op output is checked for NaN/Inf (slow; tests only).
_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Enable per-op NaN/Inf output checks (debug mode)."""
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


class Tensor:
    """N-dimensional float array, optionally participating in gradient taping.

    ``data`` is a contiguous numpy array (float32 or float64).  ``grad`` is
    populated by :func:`backward` for requires_grad leaves and has the same
    shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Copy of the value with no grad participation."""
        return Tensor(self.data.copy(), requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # Thin operator sugar; the functional forms live in ops.py.
    def __add__(self, other: "Tensor") -> "Tensor":
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        from . import ops

        return ops.hadamard(self, other)


class _Node:
    """One recorded operation: output, inputs, and the gradient rule."""

    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward_fn):
        self.out = out
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations from one forward pass.

    Use as a context manager; nesting is not supported (one model, one
    pass, one tape).  A tape can be consumed by :func:`backward` once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise TapeError("a tape is already active; tapes do not nest")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _active_tape
        _active_tape = None

    def __len__(self) -> int:
        return len(self.nodes)


_active_tape: Optional[Tape] = None


def active_tape() -> Optional[Tape]:
    return _active_tape


def record(
    out: Tensor,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    """Attach a backward rule to ``out`` if a tape is active and any input
    requires grad.  ``backward_fn(grad_out)`` returns one gradient array (or
    None) per input, in order."""
    if _debug_checks and not np.all(np.isfinite(out.data)):
        raise NumericsError("non-finite values in op output (debug check)")
    tape = _active_tape
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, inputs, backward_fn))
    return out


def backward(tape: Tape, root: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``root``.

    ``root`` must be a scalar produced on ``tape``; a tape can only be
    consumed once.
    """
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward()")
    produced = {id(node.out) for node in tape.nodes}
    if id(root) not in produced:
        raise TapeError("root tensor was not produced on this tape (detached root)")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        gout = grads.pop(id(node.out), None)
        if gout is None:
            continue
        gins = node.backward_fn(gout)
        for tensor, gin in zip(node.inputs, gins):
            if gin is None or not tensor.requires_grad:
                continue
            if gin.shape != tensor.data.shape:
                raise DimensionError(
                    f"backward produced grad of shape {gin.shape} for tensor "
                    f"of shape {tensor.data.shape}"
                )
            acc = grads.get(id(tensor))
            grads[id(tensor)] = gin if acc is None else acc + gin

    # Leaves are requires_grad tensors not produced by any node on this tape.
    leaves: dict[int, Tensor] = {}
    for node in tape.nodes:
        for tensor in node.inputs:
            if tensor.requires_grad and id(tensor) not in produced:
                leaves.setdefault(id(tensor), tensor)
    for key, tensor in leaves.items():
        g = grads.get(key)
        if g is not None:
            tensor.grad = g if tensor.grad is None else tensor.grad + g
