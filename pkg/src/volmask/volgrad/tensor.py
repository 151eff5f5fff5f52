"""Dense tensors and a gradient tape for reverse-mode differentiation."""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_local = threading.local()


class Tensor:
    """A contiguous, row-major numpy buffer that the tape can identify.

    ``data`` is always C-contiguous so that the byte layout matches the
    declared axis order (checkpoints rely on it).
    """

    __slots__ = ("data", "__weakref__")

    def __init__(self, data, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype, order="C")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class _Record:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn):
        self.output = output
        self.inputs = inputs
        self.backward = backward


class GradientTape:
    """Records differentiable ops executed inside its context.

    Only ops with at least one tracked input are recorded. A tensor is tracked
    if it was passed to :meth:`watch` or produced by a recorded op. One tape
    belongs to one thread; the active tape is thread-local.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._tracked: dict[int, Tensor] = {}

    def __enter__(self) -> "GradientTape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.remove(self)

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            self._tracked[id(t)] = t

    def is_tracked(self, t: Tensor | None) -> bool:
        return t is not None and id(t) in self._tracked

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn) -> None:
        self._records.append(_Record(output, inputs, backward))
        self._tracked[id(output)] = output

    def __len__(self) -> int:
        return len(self._records)

    def gradient(
        self,
        target: Tensor,
        sources: Iterable[Tensor],
        target_grad: np.ndarray | None = None,
    ) -> list[np.ndarray]:
        """Gradients of ``target`` (seeded with ``target_grad``) w.r.t. ``sources``.

        ``target_grad`` defaults to ones, i.e. the gradient of ``sum(target)``.
        Records are replayed in exact reverse order; contributions to a tensor
        used by several ops are summed.
        """
        if target_grad is None:
            target_grad = np.ones_like(target.data)
        else:
            target_grad = np.asarray(target_grad, dtype=target.dtype)
            if target_grad.shape != target.shape:
                raise ValueError(f"target_grad shape {target_grad.shape} != target shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): target_grad}
        for rec in reversed(self._records):
            g = grads.get(id(rec.output))
            if g is None:
                continue
            for inp, ig in zip(rec.inputs, rec.backward(g)):
                if ig is None or inp is None:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def _tape_stack() -> list[GradientTape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> GradientTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def recording_tape(*inputs: Tensor | None) -> GradientTape | None:
    """The active tape if any of ``inputs`` is tracked by it, else None."""
    tape = active_tape()
    if tape is None:
        return None
    if any(tape.is_tracked(t) for t in inputs):
        return tape
    return None
