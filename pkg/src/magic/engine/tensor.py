"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array (float32 by default, float64 for gradient
checks). Differentiable ops record nodes on the innermost active Tape;
Tape.backward replays them in reverse creation order, which is a valid
topological order. All reductions go through numpy with a fixed
evaluation order, so results are deterministic.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32

_TAPE_STACK: list["Tape"] = []
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible (never coerced)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"

    # arithmetic sugar; implementations live in ops.py (bound at import)
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def sum(self):
        from . import ops

        return ops.sum_all(self)

    def mean(self):
        from . import ops

        return ops.mean_all(self)


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self._nodes = []  # (out, inputs, backward_fn)
        self._produced = set()

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        assert _TAPE_STACK.pop() is self
        return False

    def __len__(self):
        return len(self._nodes)

    def clear(self):
        self._nodes.clear()
        self._produced.clear()

    def record(self, out, inputs, backward_fn):
        self._nodes.append((out, inputs, backward_fn))
        self._produced.add(id(out))

    def backward(self, loss):
        """Populate .grad of every grad-enabled leaf reachable from loss.

        Repeated calls without clearing grads accumulate.
        """
        if not isinstance(loss, Tensor) or loss.data.ndim != 0:
            raise ValueError("backward requires a scalar Tensor loss")
        grads = {id(loss): np.ones((), dtype=loss.dtype)}
        holders = {id(loss): loss}
        for out, inputs, backward_fn in reversed(self._nodes):
            g = grads.pop(id(out), None)
            holders.pop(id(out), None)
            if g is None:
                continue
            input_grads = backward_fn(g)
            for inp, gi in zip(inputs, input_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    holders[key] = inp
        for key, g in grads.items():
            t = holders[key]
            if not t.requires_grad or id(t) in self._produced:
                continue
            if t.grad is None:
                t.grad = np.array(g, dtype=t.dtype, copy=True)
            else:
                t.grad = t.grad + g


class no_grad:
    """Context manager disabling tape recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def recording(inputs):
    """True when the op on `inputs` must be recorded."""
    return (
        _GRAD_ENABLED
        and _TAPE_STACK
        and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    )


def register(out_data, inputs, backward_fn):
    """Wrap an op result, recording the node when gradients are live."""
    if recording(inputs):
        out = Tensor(out_data, requires_grad=True)
        _TAPE_STACK[-1].record(out, inputs, backward_fn)
        return out
    return Tensor(out_data, requires_grad=False)


def backward(loss):
    """Run the innermost active tape backward from a scalar loss."""
    tape = active_tape()
    if tape is None:
        raise RuntimeError("backward called with no active tape")
    tape.backward(loss)
