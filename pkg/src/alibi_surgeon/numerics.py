"""Dense float tensors with a tape-based reverse-mode gradient engine.

Everything the toy transformer needs and nothing more: no general
broadcasting, no device handling. Each op computes its forward value with
numpy and, when a :class:`Tape` is active and an input requires gradients,
records a closure that pushes the output gradient back to its inputs.

Typical use::

    with Tape() as tape:
        loss = cross_entropy(forward_logits(...), targets)
    tape.backward(loss)
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors (float32 by default).

    Gradient checks run under float64 so that finite-difference round-off
    does not mask real errors.
    """
    prev = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """Row-major dense array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=default_dtype())
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A trainable leaf: value, accumulated gradient and an element-wise trainable mask."""

    __slots__ = ("trainable_mask",)

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.trainable_mask = np.ones(self.data.shape, dtype=bool)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def apply_mask(self) -> None:
        self.grad = np.where(self.trainable_mask, self.grad, 0.0).astype(self.data.dtype)


class Tape:
    """Ordered log of differentiable ops executed while the tape is active."""

    def __init__(self):
        self.entries: list[Callable[[], None]] = []
        self.consumed = False
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev

    def __len__(self) -> int:
        return len(self.entries)

    def backward(self, loss: Tensor) -> None:
        backward(loss, tape=self)


def _active_tape() -> Tape | None:
    return getattr(_state, "tape", None)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    # out-of-place on purpose: one gradient array may be handed to several inputs
    t.grad = g if t.grad is None else t.grad + g


def _result(value: np.ndarray, inputs: Sequence[Tensor], grad_fn) -> Tensor:
    """Wrap ``value`` and register ``grad_fn(out)`` on the active tape if needed."""
    if not np.all(np.isfinite(value)):
        raise NonFiniteError("non-finite value produced by tensor op")
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = value
    out.requires_grad = needs
    out.grad = None
    out.tape = tape if needs else None
    if needs:
        tape.entries.append(lambda: out.grad is not None and grad_fn(out.grad))
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every tensor upstream of the scalar ``loss``.

    Parameter gradients accumulate across calls (for gradient accumulation);
    each tape may be replayed only once.
    """
    tape = tape or loss.tape
    if tape is None:
        raise RuntimeError("loss was not produced under an active Tape")
    if tape.consumed:
        raise RuntimeError("backward already run on this tape; re-run the forward pass")
    if loss.data.size != 1:
        raise ValueError("backward needs a scalar loss")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for fn in reversed(tape.entries):
        fn()
    tape.entries.clear()


# ---------------------------------------------------------------- primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def grad_fn(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), grad_fn)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x[..., n] + bias[n], the one broadcast the model needs."""
    if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ValueError(f"add_bias: {x.shape} vs {bias.shape}")

    def grad_fn(g):
        _accumulate(x, g)
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _result(x.data + bias.data, (x, bias), grad_fn)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * np.asarray(c, dtype=x.data.dtype), (x,),
                   lambda g: _accumulate(x, g * np.asarray(c, dtype=g.dtype)))


def mul_const(x: Tensor, m: np.ndarray) -> Tensor:
    """Element-wise product with a constant array of the same shape."""
    m = np.asarray(m, dtype=x.data.dtype)
    if m.shape != x.shape:
        raise ValueError(f"mul_const: {x.shape} vs {m.shape}")
    return _result(x.data * m, (x,), lambda g: _accumulate(x, g * m))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; both operands 2-D, or both 3-D with a shared leading batch axis."""
    if a.data.ndim != b.data.ndim or a.data.ndim not in (2, 3):
        raise ValueError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")

    def grad_fn(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _result(a.data @ b.data, (a, b), grad_fn)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    out = np.ascontiguousarray(np.swapaxes(x.data, -1, -2))
    return _result(out, (x,), lambda g: _accumulate(x, np.swapaxes(g, -1, -2)))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if math.prod(shape) != x.data.size:
        raise ValueError(f"reshape: cannot view {x.shape} as {shape}")
    return _result(x.data.reshape(shape), (x,), lambda g: _accumulate(x, g.reshape(x.shape)))


def take_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of a 2-D tensor."""
    if not 0 <= start < stop <= x.shape[-1]:
        raise ValueError(f"take_cols: bad range [{start}, {stop}) for {x.shape}")

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        _accumulate(x, full)

    return _result(np.ascontiguousarray(x.data[:, start:stop]), (x,), grad_fn)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[T, H*dh] -> [H, T, dh]; head h owns columns [h*dh, (h+1)*dh)."""
    T, d = x.shape
    if d % n_heads:
        raise ValueError(f"split_heads: width {d} not divisible by {n_heads}")
    dh = d // n_heads
    out = np.ascontiguousarray(x.data.reshape(T, n_heads, dh).transpose(1, 0, 2))
    return _result(out, (x,),
                   lambda g: _accumulate(x, g.transpose(1, 0, 2).reshape(T, d)))


def concat_heads(x: Tensor) -> Tensor:
    """[H, T, dh] -> [T, H*dh], inverse of :func:`split_heads`."""
    H, T, dh = x.shape
    out = np.ascontiguousarray(x.data.transpose(1, 0, 2).reshape(T, H * dh))
    return _result(out, (x,),
                   lambda g: _accumulate(x, g.reshape(T, H, dh).transpose(1, 0, 2)))


def softmax_rows(logits: Tensor, additive_bias: np.ndarray | Tensor | None = None) -> Tensor:
    """Softmax over the last axis of ``logits + additive_bias``.

    The bias is a constant and may hold ``-inf`` to mask entries; those get
    probability exactly 0. A row with no finite entry is an error.
    """
    z = logits.data
    if additive_bias is not None:
        bias = additive_bias.data if isinstance(additive_bias, Tensor) else np.asarray(additive_bias)
        if bias.shape != z.shape:
            raise ValueError(f"softmax_rows: bias {bias.shape} vs logits {z.shape}")
        with np.errstate(invalid="ignore"):
            z = z + bias.astype(z.dtype, copy=False)
    row_max = z.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(row_max)):
        raise ValueError("softmax_rows: row with every entry masked")
    e = np.exp(z - row_max)
    p = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        _accumulate(logits, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _result(p, (logits,), grad_fn)


def layernorm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply gain and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ValueError(f"layernorm: gain/shift must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = xc * inv
    out = xhat * gain.data + shift.data

    def grad_fn(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if shift.requires_grad:
            _accumulate(shift, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accumulate(x, dx)

    return _result(out, (x, gain, shift), grad_fn)


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with the erf form of the normal CDF."""
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))
    cdf = cdf.astype(x.data.dtype, copy=False)

    def grad_fn(g):
        pdf = (_INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)).astype(x.data.dtype, copy=False)
        _accumulate(x, g * (cdf + x.data * pdf))

    return _result(x.data * cdf, (x,), grad_fn)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"embedding_lookup: id outside [0, {V})")

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        _accumulate(table, full)

    return _result(table.data[ids], (table,), grad_fn)


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood (nats) of ``targets`` under row-wise softmax."""
    N, V = logits.shape
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (N,):
        raise ValueError(f"cross_entropy: expected {N} targets, got {t.shape}")
    if N and (t.min() < 0 or t.max() >= V):
        raise IndexError(f"cross_entropy: target outside [0, {V})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    nll = logsum - z[np.arange(N), t]
    loss = np.asarray(nll.mean(), dtype=logits.data.dtype)

    def grad_fn(g):
        p = np.exp(z - logsum[:, None])
        p[np.arange(N), t] -= 1.0
        _accumulate(logits, p * (g / N))

    return _result(loss, (logits,), grad_fn)


def sum_all(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,),
                   lambda g: _accumulate(x, np.broadcast_to(g, x.shape)))


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Full contraction sum(a * b) to a scalar."""
    if a.shape != b.shape:
        raise ValueError(f"dot: shape mismatch {a.shape} vs {b.shape}")

    def grad_fn(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _result(np.asarray((a.data * b.data).sum(), dtype=a.data.dtype), (a, b), grad_fn)


# ---------------------------------------------------------------- oracle


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float | None = None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f`` receives a perturbed copy of ``x`` and must return a float; the
    caller decides precision (run under ``precision(np.float64)`` for checks).
    The default step balances truncation against round-off for the working
    precision: 1e-3 in float32, 1e-5 in float64.
    """
    if h is None:
        h = 1e-5 if default_dtype() == np.float64 else 1e-3
    x = np.array(x, dtype=np.float64 if default_dtype() == np.float64 else x.dtype, copy=True)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x.copy()))
        flat[i] = orig - h
        fm = float(f(x.copy()))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-wise relative error ||a-b|| / max(||a||, ||b||, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))
