"""Dense float64 tensors with tape-based reverse-mode differentiation.

A Tensor wraps a C-contiguous float64 ndarray. While a Tape is active,
every operation appends a backward closure to it; calling
``Tape.backward(loss)`` replays the closures in exact reverse order of
recording, which is a valid topological order because execution built
the graph eagerly. Gradients accumulate additively into ``Tensor.grad``,
so a tensor feeding several consumers receives the sum of their
contributions.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray


class Tensor:
    """A float64 array plus an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data: Array = arr
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"tensor of shape {self.shape} is not a scalar")

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # Arithmetic delegates to the op functions below.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


class Tape:
    """Ordered record of operations for one reverse pass.

    Use as a context manager; ops executed inside record themselves.
    Tapes nest (innermost wins) and are not shared across threads.
    """

    __slots__ = ("_records",)

    def __init__(self):
        self._records: list[Callable[[], None]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"

    def __len__(self) -> int:
        return len(self._records)

    def record(self, backward_fn: Callable[[], None]) -> None:
        self._records.append(backward_fn)

    def backward(self, output: Tensor, seed: Array | None = None) -> None:
        """Seed ``output.grad`` and propagate in reverse recording order."""
        if seed is None:
            if output.size != 1:
                raise ValueError("backward without a seed requires a scalar output")
            seed = np.ones_like(output.data)
        if not np.all(np.isfinite(output.data)):
            raise FloatingPointError("backward called on a non-finite output")
        output.accumulate_grad(np.asarray(seed, dtype=np.float64))
        for fn in reversed(self._records):
            fn()


_TAPE_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _result(data: Array, inputs: Sequence[Tensor], backward_builder) -> Tensor:
    """Create the output tensor and record a backward closure if needed."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(backward_builder(out))
    return out


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def build(out: Tensor):
        def bw():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g, b.shape))

        return bw

    return _result(a.data + b.data, (a, b), build)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def build(out: Tensor):
        def bw():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(-g, b.shape))

        return bw

    return _result(a.data - b.data, (a, b), build)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def build(out: Tensor):
        def bw():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

        return bw

    return _result(a.data * b.data, (a, b), build)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def build(out: Tensor):
        def bw():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return bw

    return _result(a.data / b.data, (a, b), build)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def build(out: Tensor):
        def bw():
            if out.grad is not None and a.requires_grad:
                a.accumulate_grad(-out.grad)

        return bw

    return _result(-a.data, (a,), build)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def build(out: Tensor):
        def bw():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                a.accumulate_grad(g @ b.data.T)
            if b.requires_grad:
                b.accumulate_grad(a.data.T @ g)

        return bw

    return _result(a.data @ b.data, (a, b), build)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)

    def build(out: Tensor):
        def bw():
            if out.grad is not None and a.requires_grad:
                a.accumulate_grad(out.grad.reshape(a.shape))

        return bw

    return _result(a.data.reshape(shape), (a,), build)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def build(out: Tensor):
        def bw():
            g = out.grad
            if g is None or not a.requires_grad:
                return
            if axis is None:
                a.accumulate_grad(np.broadcast_to(g, a.shape))
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            a.accumulate_grad(np.broadcast_to(g, a.shape))

        return bw

    return _result(data, (a,), build)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else _axis_count(a.shape, axis)

    def build(out: Tensor):
        def bw():
            g = out.grad
            if g is None or not a.requires_grad:
                return
            if axis is None:
                a.accumulate_grad(np.broadcast_to(g / count, a.shape))
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            a.accumulate_grad(np.broadcast_to(g / count, a.shape))

        return bw

    return _result(data, (a,), build)


def _axis_count(shape: tuple[int, ...], axis) -> int:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    n = 1
    for ax in axes:
        n *= shape[ax]
    return n


def texp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def build(out: Tensor):
        def bw():
            if out.grad is not None and a.requires_grad:
                a.accumulate_grad(out.grad * data)

        return bw

    return _result(data, (a,), build)


def tlog(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def build(out: Tensor):
        def bw():
            if out.grad is not None and a.requires_grad:
                a.accumulate_grad(out.grad / a.data)

        return bw

    return _result(np.log(a.data), (a,), build)


def tsqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def build(out: Tensor):
        def bw():
            if out.grad is not None and a.requires_grad:
                a.accumulate_grad(out.grad * 0.5 / data)

        return bw

    return _result(data, (a,), build)


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def build(out: Tensor):
        def bw():
            if out.grad is not None and a.requires_grad:
                a.accumulate_grad(out.grad * (1.0 - data * data))

        return bw

    return _result(data, (a,), build)


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    # Evaluate each branch only where it is stable.
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def build(out: Tensor):
        def bw():
            if out.grad is not None and a.requires_grad:
                a.accumulate_grad(out.grad * data * (1.0 - data))

        return bw

    return _result(data, (a,), build)


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    """Exponential linear unit: x for x > 0, alpha*(exp(x)-1) otherwise."""
    a = as_tensor(a)
    x = a.data
    neg_part = alpha * np.expm1(np.minimum(x, 0.0))
    data = np.where(x > 0, x, neg_part)

    def build(out: Tensor):
        def bw():
            if out.grad is not None and a.requires_grad:
                # d/dx alpha*(exp(x)-1) = alpha*exp(x) = value + alpha.
                a.accumulate_grad(out.grad * np.where(x > 0, 1.0, neg_part + alpha))

        return bw

    return _result(data, (a,), build)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient passes only where x > floor."""
    a = as_tensor(a)
    x = a.data

    def build(out: Tensor):
        def bw():
            if out.grad is not None and a.requires_grad:
                a.accumulate_grad(out.grad * (x > floor))

        return bw

    return _result(np.maximum(x, floor), (a,), build)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, computed with max subtraction."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def build(out: Tensor):
        def bw():
            g = out.grad
            if g is None or not a.requires_grad:
                return
            a.accumulate_grad((g - (g * data).sum(axis=axis, keepdims=True)) * data)

        return bw

    return _result(data, (a,), build)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def build(out: Tensor):
        def bw():
            g = out.grad
            if g is None:
                return
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    t.accumulate_grad(g[tuple(idx)])

        return bw

    return _result(data, tensors, build)


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Partition ``a`` along ``axis``; one tape record covers all pieces."""
    a = as_tensor(a)
    if sum(sizes) != a.shape[axis]:
        raise ValueError(f"split sizes {sizes} do not cover axis of length {a.shape[axis]}")
    offsets = np.cumsum([0] + list(sizes))
    pieces_data = []
    for lo, hi in zip(offsets[:-1], offsets[1:]):
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(lo, hi)
        pieces_data.append(np.ascontiguousarray(a.data[tuple(idx)]))
    tape = active_tape()
    needs = tape is not None and a.requires_grad
    pieces = [Tensor(d, requires_grad=needs) for d in pieces_data]
    if needs:
        def bw():
            grads = [
                p.grad if p.grad is not None else np.zeros_like(p.data)
                for p in pieces
            ]
            a.accumulate_grad(np.concatenate(grads, axis=axis))

        tape.record(bw)
    return pieces


# ---------------------------------------------------------------------------
# structured ops


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x`` [C_in, T] with ``kernels`` [C_out, C_in, K].

    Returns [C_out, T_out] with T_out = floor((T + 2*padding - K)/stride) + 1.
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if x.ndim != 2 or kernels.ndim != 3:
        raise ValueError(f"conv1d expects x rank 2 and kernels rank 3, got {x.shape}, {kernels.shape}")
    c_out, c_in, k = kernels.shape
    if x.shape[0] != c_in:
        raise ValueError(f"conv1d channel mismatch: input has {x.shape[0]}, kernels expect {c_in}")
    if bias.shape != (c_out,):
        raise ValueError(f"conv1d bias must have shape ({c_out},), got {bias.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("conv1d requires stride >= 1 and padding >= 0")
    t = x.shape[1]
    t_padded = t + 2 * padding
    if k > t_padded:
        raise ValueError(f"kernel width {k} exceeds padded length {t_padded}")
    t_out = (t_padded - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (padding, padding))) if padding else x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)[:, ::stride, :]
    # [C_in, T_out, K] -> [C_in*K, T_out] so the correlation is one GEMM.
    wmat = np.ascontiguousarray(windows.transpose(0, 2, 1)).reshape(c_in * k, t_out)
    kmat = kernels.data.reshape(c_out, c_in * k)
    data = kmat @ wmat + bias.data[:, None]

    def build(out: Tensor):
        def bw():
            g = out.grad
            if g is None:
                return
            if kernels.requires_grad:
                kernels.accumulate_grad((g @ wmat.T).reshape(c_out, c_in, k))
            if bias.requires_grad:
                bias.accumulate_grad(g.sum(axis=1))
            if x.requires_grad:
                dxp = np.zeros((c_in, t_padded))
                for j in range(k):
                    dxp[:, j : j + stride * t_out : stride] += kernels.data[:, :, j].T @ g
                x.accumulate_grad(dxp[:, padding : padding + t] if padding else dxp)

        return bw

    return _result(data, (x, kernels, bias), build)


def grad_reverse(x: Tensor, lam: float) -> Tensor:
    """Identity in the forward pass; scales the gradient by -lam going back."""
    x = as_tensor(x)
    tape = active_tape()
    needs = tape is not None and x.requires_grad
    out = Tensor(x.data, requires_grad=needs)
    if needs:
        def bw():
            if out.grad is not None:
                x.accumulate_grad(-lam * out.grad)

        tape.record(bw)
    return out


def bce_with_logits(logits: Tensor, targets: Array) -> Tensor:
    """Mean binary cross-entropy computed from pre-sigmoid logits.

    Uses max(z,0) - z*d + log1p(exp(-|z|)), stable for any logit magnitude.
    """
    logits = as_tensor(logits)
    z = logits.data
    d = np.asarray(targets, dtype=np.float64)
    if z.shape != d.shape:
        raise ValueError(f"logits shape {z.shape} != targets shape {d.shape}")
    n = z.size
    per = np.maximum(z, 0.0) - z * d + np.log1p(np.exp(-np.abs(z)))
    p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))

    def build(out: Tensor):
        def bw():
            g = out.grad
            if g is None or not logits.requires_grad:
                return
            logits.accumulate_grad(g * (p - d) / n)

        return bw

    return _result(np.float64(per.mean()), (logits,), build)


# ---------------------------------------------------------------------------
# composites (differentiated through the primitives above)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm."""
    x = as_tensor(x)
    norms = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norms < 1e-12):
        raise ValueError("l2_normalize: input has a slice with norm below 1e-12")
    n = tsqrt(tsum(mul(x, x), axis=axis, keepdims=True))
    return div(x, n)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """log(sum(exp(x))) along ``axis`` with a detached max shift."""
    x = as_tensor(x)
    m = Tensor(x.data.max(axis=axis, keepdims=True))
    lse = tlog(tsum(texp(sub(x, m)), axis=axis, keepdims=True))
    return add(lse, m)


# ---------------------------------------------------------------------------
# numeric verification


def grad_check(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-5,
) -> float:
    """Compare tape gradients of ``fn()`` against central differences.

    ``fn`` must rebuild its forward pass on every call and close over
    ``params``. Returns the maximum relative error
    |analytic - numeric| / max(1, |analytic|, |numeric|) over all entries.
    """
    params = list(params)
    for p in params:
        if not p.requires_grad:
            raise ValueError(f"grad_check parameter {p.name!r} does not require grad")
        p.zero_grad()
    with Tape() as tape:
        out = fn()
        if out.size != 1:
            raise ValueError("grad_check requires a scalar-valued fn")
        if not np.isfinite(out.data).all():
            raise FloatingPointError("grad_check: fn returned a non-finite value")
        tape.backward(out)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p in params:
        p.zero_grad()

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = fn().item()
            flat[i] = orig - step
            f_minus = fn().item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError("grad_check: non-finite value during probing")
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = abs(ana_flat[i] - numeric) / max(1.0, abs(ana_flat[i]), abs(numeric))
            if err > worst:
                worst = err
    return worst
