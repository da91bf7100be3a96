"""Dense tensors with a recording tape for reverse-mode differentiation.

The tape is a Wengert list: every primitive op appends one node while a
Tape context is active. Replaying the list in reverse creation order is a
valid reverse topological order, and gradients accumulate additively when
a tensor feeds several ops.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A shaped array of 32- or 64-bit floats, optionally a trainable leaf."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad,
                      name=self.name)

    def validate_finite(self) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            label = self.name or "tensor"
            raise FloatingPointError(f"non-finite values in {label}")
        return self

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tag})"


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_TAPE_STACK: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of primitive ops, used to drive the backward pass."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> None:
        self._nodes.append(_Node(out, inputs, vjp))

    def gradients(self, loss: Tensor,
                  params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Backward pass from a scalar loss.

        Returns a map from each requested leaf parameter to its gradient
        array. Leaves never touched by the recorded computation get zeros.
        If ``params`` is omitted, every requires_grad leaf encountered on
        the tape is reported.
        """
        if loss.data.ndim != 0:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        produced = {id(node.out) for node in self._nodes}
        if id(loss) not in produced:
            raise ValueError("loss is not connected to this tape (detached graph)")

        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
        leaf_grads: dict[int, np.ndarray] = {}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            contribs = node.vjp(g)
            for inp, contrib in zip(node.inputs, contribs):
                if contrib is None:
                    continue
                key = id(inp)
                if key in produced:
                    if key in grads:
                        grads[key] = grads[key] + contrib
                    else:
                        grads[key] = contrib
                elif inp.requires_grad:
                    if key in leaf_grads:
                        leaf_grads[key] = leaf_grads[key] + contrib
                    else:
                        leaf_grads[key] = contrib

        if params is None:
            # Report leaves seen during the walk, keyed by tensor identity.
            by_id: dict[int, Tensor] = {}
            for node in self._nodes:
                for inp in node.inputs:
                    if inp.requires_grad and id(inp) not in produced:
                        by_id[id(inp)] = inp
            return {t: leaf_grads.get(i, np.zeros_like(t.data))
                    for i, t in by_id.items()}
        return {p: leaf_grads.get(id(p), np.zeros_like(p.data)) for p in params}


def backward(loss: Tensor, params: Iterable[Tensor] | None = None,
             tape: Tape | None = None) -> dict[Tensor, np.ndarray]:
    """Gradient map of a scalar loss over leaf parameters."""
    t = tape or active_tape()
    if t is None:
        raise ValueError("no active tape: wrap the forward pass in `with Tape():`")
    return t.gradients(loss, params)


class ParamStore:
    """Named, shaped parameter tensors; the unit of checkpointing."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def register(self, name: str, data, dtype=None) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = data if isinstance(data, Tensor) else Tensor(data, dtype=dtype)
        t.requires_grad = True
        t.name = name
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return sorted(self._tensors)

    def tensors(self) -> list[Tensor]:
        return [self._tensors[n] for n in self.names()]

    def items(self):
        for n in self.names():
            yield n, self._tensors[n]

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place, validating names and shapes."""
        missing = set(self._tensors) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint missing tensors: {sorted(missing)}")
        for name, t in self._tensors.items():
            arr = arrays[name]
            if tuple(arr.shape) != t.shape:
                raise ValueError(
                    f"shape mismatch for tensor {name!r}: "
                    f"checkpoint {tuple(arr.shape)} vs expected {t.shape}")
            t.data = arr.astype(t.dtype) if arr.dtype != t.dtype else arr
