"""Dense tensor type and the tape that records operations for reverse mode."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericError

FLOAT_DTYPES = {"f32": np.float32, "f64": np.float64}


class Tensor:
    """An n-d array of reals plus an optional gradient slot.

    Images and feature maps are 4-d ``(batch, channels, height, width)``;
    attention code also works on 3-d ``(batch, rows, cols)`` matrix views.
    Tensors produced by ops are treated as immutable.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_from_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._from_op = False

    @property
    def shape(self) -> tuple[int, ...]:
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

    @property
    def is_leaf(self) -> bool:
        return not self._from_op

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ConfigError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other: Tensor) -> Tensor:
        from .ops import add

        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        from .ops import sub

        return sub(self, other)


@dataclass
class _Record:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of differentiable ops executed inside ``with Tape():``.

    Outside an active tape ops run in inference mode and nothing is saved.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.records: list[_Record] = []
        self.visited: list[str] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.remove(self)

    @classmethod
    def active(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

        Leaves not reachable from ``loss`` are left untouched, so callers
        zero parameter gradients beforehand (``Module.zero_grad``).
        """
        if loss.data.size != 1:
            raise ConfigError(f"loss must be scalar, got shape {loss.shape}")
        if self._consumed:
            raise RuntimeError("backward() already ran on this tape; re-run the forward pass")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            self.visited.append(rec.name)
            for t, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t._from_op:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
                elif t.grad is None:
                    t.grad = np.array(gi, dtype=t.dtype, copy=True)
                else:
                    t.grad += gi
        if id(loss) in grads and not loss._from_op and loss.requires_grad:
            loss.grad = grads[id(loss)]
        # release saved intermediates
        self.records.clear()


def check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: non-finite value in result")
    return arr


def record(
    name: str,
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``out_data`` as a Tensor and log the op on the active tape."""
    check_finite(out_data, name)
    tape = Tape.active()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        out._from_op = True
        tape.records.append(_Record(name, tuple(inputs), out, backward))
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype or np.float64)
    return Tensor(arr)
