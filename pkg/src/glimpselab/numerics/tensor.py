"""Dense 2-D tensors with a recording tape for reverse-mode gradients.

Every primitive computes its value eagerly with numpy.  While a ``GradTape``
is active and at least one input requires a gradient, the primitive also
appends a record holding its inputs and a closure that maps the output
gradient to input gradients.  ``backward`` replays the records in reverse.
"""
from __future__ import annotations

import os
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

DEBUG = os.environ.get("GLIMPSE_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    pass


class MissingGradientError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor2:
    """A rows x cols array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        data = np.asarray(data)
        if data.ndim == 1:
            data = data.reshape(1, -1)
        if data.ndim != 2:
            raise ShapeError(f"Tensor2 needs 2-D data, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        self.data = data
        self.requires_grad = requires_grad
        self.name = name
        if DEBUG:
            _check_finite(self.data, name or "tensor")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor2{tag}({self.rows}x{self.cols}, {self.dtype}, grad={self.requires_grad})"


def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite values in {what}")


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class GradTape:
    """Ordered log of primitive operations.

    Use as a context manager; primitives called inside the block record onto
    the innermost active tape.
    """

    _stack: list["GradTape"] = []

    def __init__(self):
        self.records: list[tuple[Tensor2, tuple[Tensor2, ...], BackwardFn]] = []

    def __enter__(self) -> "GradTape":
        GradTape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        GradTape._stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor2, inputs: tuple[Tensor2, ...], fn: BackwardFn) -> None:
        self.records.append((out, inputs, fn))


def active_tape() -> Optional[GradTape]:
    return GradTape._stack[-1] if GradTape._stack else None


def _emit(value: np.ndarray, inputs: tuple[Tensor2, ...], fn: BackwardFn) -> Tensor2:
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor2(value, requires_grad=track)
    if track:
        tape.record(out, inputs, fn)
    return out


def _same_shape(op: str, a: Tensor2, b: Tensor2) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- primitives --------------------------------------------------------------

def matmul(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _emit(ad @ bd, (a, b), back)


def add(a: Tensor2, b: Tensor2) -> Tensor2:
    """Elementwise sum; ``b`` may also be a 1 x cols row broadcast over rows."""
    if a.shape == b.shape:
        return _emit(a.data + b.data, (a, b), lambda g: (g, g))
    if b.rows == 1 and b.cols == a.cols:
        return _emit(a.data + b.data, (a, b),
                     lambda g: (g, g.sum(axis=0, keepdims=True) if b.requires_grad else None))
    raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")


def sub(a: Tensor2, b: Tensor2) -> Tensor2:
    _same_shape("sub", a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor2, b: Tensor2) -> Tensor2:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data

    def back(g):
        return (g * bd if a.requires_grad else None,
                g * ad if b.requires_grad else None)

    return _emit(ad * bd, (a, b), back)


def sigmoid(a: Tensor2) -> Tensor2:
    # tanh form avoids overflow in exp for large |x|
    y = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _emit(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor2) -> Tensor2:
    y = np.tanh(a.data)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor2) -> Tensor2:
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,),
                 lambda g: (g * mask,))


def concat_cols(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.rows != b.rows:
        raise ShapeError(f"concat_cols: row mismatch {a.shape} vs {b.shape}")
    k = a.cols
    return _emit(np.concatenate([a.data, b.data], axis=1), (a, b),
                 lambda g: (g[:, :k], g[:, k:]))


def concat_rows(parts: Sequence[Tensor2]) -> Tensor2:
    cols = {p.cols for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column mismatch {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.rows for p in parts])

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _emit(np.concatenate([p.data for p in parts], axis=0), tuple(parts), back)


def slice_rows(a: Tensor2, start: int, stop: int) -> Tensor2:
    if not 0 <= start < stop <= a.rows:
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for {a.shape}")
    n, dt = a.rows, a.dtype

    def back(g):
        full = np.zeros((n, g.shape[1]), dtype=dt)
        full[start:stop] = g
        return (full,)

    return _emit(a.data[start:stop], (a,), back)


# -- loss --------------------------------------------------------------------

def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Union[Tensor2, np.ndarray],
                          targets) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of ``targets`` and its logits gradient."""
    x = logits.data if isinstance(logits, Tensor2) else np.asarray(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if x.ndim != 2 or x.shape[0] != targets.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: logits {x.shape} vs {targets.shape[0]} targets")
    if targets.size and (targets.min() < 0 or targets.max() >= x.shape[1]):
        raise ValueError("target out of range")
    n = x.shape[0]
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - z[rows, targets]))
    grad = np.exp(z - lse[:, None])
    grad[rows, targets] -= 1.0
    grad /= n
    return loss, grad.astype(x.dtype, copy=False)


# -- backward ----------------------------------------------------------------

class GradStore:
    """Gradients keyed by tensor identity."""

    def __init__(self):
        self._g: dict[int, np.ndarray] = {}
        self._keep: dict[int, Tensor2] = {}

    def accumulate(self, t: Tensor2, g: np.ndarray) -> None:
        k = id(t)
        if k in self._g:
            self._g[k] = self._g[k] + g
        else:
            self._g[k] = g
            self._keep[k] = t

    def get(self, t: Tensor2) -> Optional[np.ndarray]:
        return self._g.get(id(t))

    def __contains__(self, t: Tensor2) -> bool:
        return id(t) in self._g

    def for_params(self, params: Mapping[str, Tensor2]) -> dict[str, np.ndarray]:
        """Gradient per named parameter; raises if any parameter got none."""
        out = {}
        missing = []
        for name, p in params.items():
            g = self._g.get(id(p))
            if g is None:
                missing.append(name)
            else:
                out[name] = g
        if missing:
            raise MissingGradientError(f"no gradient reached: {', '.join(missing)}")
        return out


def backward(tape: GradTape,
             seed: Union[Mapping[Tensor2, np.ndarray], tuple[Tensor2, np.ndarray], Iterable]) -> GradStore:
    """Propagate ``seed`` gradients back through ``tape`` in reverse order."""
    store = GradStore()
    if isinstance(seed, tuple) and len(seed) == 2 and isinstance(seed[0], Tensor2):
        seed = [seed]
    elif isinstance(seed, Mapping):
        seed = list(seed.items())
    for t, g in seed:
        g = np.asarray(g)
        if g.shape != t.shape:
            raise ShapeError(f"seed gradient {g.shape} for tensor {t.shape}")
        store.accumulate(t, g)
    for out, inputs, fn in reversed(tape.records):
        g = store.get(out)
        if g is None:
            continue
        for inp, gi in zip(inputs, fn(g)):
            if gi is not None and inp.requires_grad:
                if DEBUG:
                    _check_finite(gi, "gradient")
                store.accumulate(inp, gi)
    return store
