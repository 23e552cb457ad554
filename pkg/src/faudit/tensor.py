"""Reverse-mode automatic differentiation over float64 numpy arrays.

Ops record (output, inputs, backward-rule) entries on a thread-local tape in
creation order, which is already a topological order of the dynamic graph.
``backward`` walks the tape once in reverse, accumulates adjoints, and clears
the tape.  Each thread gets its own tape, so independent model copies can run
concurrently.

Broadcasting is deliberately restricted to scalar-vs-tensor and identical
shapes; anything else goes through an explicit ``broadcast_to`` whose backward
rule (sum over the expanded axes) is plain to read.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from . import kernels


class AutodiffError(RuntimeError):
    """Misuse of the tape or an op contract violation."""


class DomainError(AutodiffError):
    """An op was applied outside its numeric domain (e.g. log of x <= 0)."""


_state = threading.local()


def _tape() -> list:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = []
        _state.tape = tape
    return tape


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables tape recording on this thread."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_retain")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._retain = bool(requires_grad)

    # -- introspection -----------------------------------------------------
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
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def retain_grad(self) -> "Tensor":
        """Keep the adjoint on this tensor after backward (for inspection)."""
        self._retain = True
        return self

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad)


def _record(out_data, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap op output; push a tape entry when gradients can flow."""
    out = Tensor(out_data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tape().append((out, tuple(inputs), backward))
    return out


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss; fills .grad and clears the tape."""
    if loss.size != 1:
        raise AutodiffError(f"backward needs a scalar, got shape {loss.shape}")
    tape = _tape()
    if not any(entry[0] is loss for entry in tape):
        raise AutodiffError("loss is not on the active tape (already consumed?)")
    _state.tape = []

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    pending: dict[int, Tensor] = {}
    for out, inputs, rule in reversed(tape):
        gy = grads.pop(id(out), None)
        if gy is None:
            continue
        if out._retain:
            out.grad = gy
        gxs = rule(gy)
        for inp, gx in zip(inputs, gxs):
            if gx is None:
                continue
            if gx.shape != inp.data.shape:
                raise AutodiffError(
                    f"backward rule produced shape {gx.shape} for input {inp.data.shape}"
                )
            prev = grads.get(id(inp))
            grads[id(inp)] = gx if prev is None else prev + gx
            if inp._retain:
                pending[id(inp)] = inp
    # leaves (and retained tensors that were never popped as an op output)
    # receive their fully accumulated adjoint exactly once
    for tid, t in pending.items():
        if tid in grads:
            t.grad = grads[tid]


def _as_scalar(x) -> float | None:
    """Return a python float when x is scalar-like, else None."""
    if isinstance(x, (int, float, np.integer, np.floating)):
        return float(x)
    return None


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise DomainError(f"{op} produced non-finite values")
    return arr


# -- elementwise ------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    s = _as_scalar(b)
    if s is not None:
        return _record(a.data + s, [a], lambda gy: (gy,))
    if not isinstance(b, Tensor):
        raise AutodiffError(f"cannot add {type(b).__name__} to Tensor")
    if a.shape != b.shape:
        raise AutodiffError(f"add shape mismatch {a.shape} vs {b.shape}; broadcast explicitly")
    return _record(a.data + b.data, [a, b], lambda gy: (gy, gy))


def mul(a: Tensor, b) -> Tensor:
    s = _as_scalar(b)
    if s is not None:
        return _record(a.data * s, [a], lambda gy: (gy * s,))
    if not isinstance(b, Tensor):
        raise AutodiffError(f"cannot multiply Tensor by {type(b).__name__}")
    if a.shape != b.shape:
        raise AutodiffError(f"mul shape mismatch {a.shape} vs {b.shape}; broadcast explicitly")
    ad, bd = a.data, b.data
    return _record(ad * bd, [a, b], lambda gy: (gy * bd, gy * ad))


def div(a: Tensor, b) -> Tensor:
    s = _as_scalar(b)
    if s is not None:
        if s == 0.0:
            raise DomainError("division by zero")
        inv = 1.0 / s
        return _record(a.data * inv, [a], lambda gy: (gy * inv,))
    if not isinstance(b, Tensor):
        raise AutodiffError(f"cannot divide Tensor by {type(b).__name__}")
    if a.shape != b.shape:
        raise AutodiffError(f"div shape mismatch {a.shape} vs {b.shape}; broadcast explicitly")
    if np.any(b.data == 0.0):
        raise DomainError("division by zero")
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(out, [a, b], lambda gy: (gy / bd, -gy * ad / (bd * bd)))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), [a], lambda gy: (gy * mask,))


_EXP_MAX = 709.0  # np.exp overflows to inf just above this


def exp(a: Tensor) -> Tensor:
    if np.any(a.data > _EXP_MAX):
        raise DomainError("exp overflow")
    out = np.exp(a.data)
    return _record(out, [a], lambda gy: (gy * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive value")
    return _record(np.log(a.data), [a], lambda gy: (gy / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record(out, [a], lambda gy: (gy * out * (1.0 - out),))


# -- structural ---------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape
    return _record(
        a.data.reshape(shape), [a], lambda gy: (np.ascontiguousarray(gy).reshape(orig),)
    )


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(
        np.ascontiguousarray(a.data.transpose(axes)),
        [a],
        lambda gy: (np.ascontiguousarray(gy.transpose(inv)),),
    )


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast; backward sums over the expanded axes."""
    shape = tuple(shape)
    src = a.data.shape
    if len(src) > len(shape):
        raise AutodiffError(f"cannot broadcast {src} to {shape}")
    pad = len(shape) - len(src)
    for i, d in enumerate(src):
        if d != shape[pad + i] and d != 1:
            raise AutodiffError(f"cannot broadcast {src} to {shape}")
    sum_axes = tuple(range(pad)) + tuple(
        pad + i for i, d in enumerate(src) if d == 1 and shape[pad + i] != 1
    )

    def back(gy):
        g = gy.sum(axis=sum_axes) if sum_axes else gy
        return (np.ascontiguousarray(g.reshape(src)),)

    return _record(np.ascontiguousarray(np.broadcast_to(a.data, shape)), [a], back)


def getitem(a: Tensor, index) -> Tensor:
    """Basic (non-repeating) indexing: ints, slices, tuples thereof."""
    out = a.data[index]

    def back(gy):
        gx = np.zeros_like(a.data)
        gx[index] = gy.reshape(np.shape(gx[index]))
        return (gx,)

    return _record(np.ascontiguousarray(out), [a], back)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [p.data for p in parts]
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def back(gy):
        sl = [slice(None)] * gy.ndim
        outs = []
        for i in range(len(datas)):
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            outs.append(np.ascontiguousarray(gy[tuple(sl)]))
        return tuple(outs)

    return _record(np.concatenate(datas, axis=axis), list(parts), back)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(gy):
        if axis is None:
            return (np.full_like(a.data, float(gy)),)
        g = gy if keepdims else np.expand_dims(gy, axis)
        return (np.ascontiguousarray(np.broadcast_to(g, a.data.shape)),)

    return _record(out, [a], back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(sum_(a, axis, keepdims), 1.0 / float(count))


def max_(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; gradient flows to the first argmax (ties broken low)."""
    idx = a.data.argmax(axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def back(gy):
        g = gy if keepdims else np.expand_dims(gy, axis)
        gx = np.zeros_like(a.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), g, axis=axis)
        return (gx,)

    return _record(np.ascontiguousarray(out), [a], back)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2-D x 2-D, batched same-leading-dims, or batched x 2-D."""
    if not isinstance(b, Tensor):
        raise AutodiffError("matmul expects two Tensors")
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise AutodiffError(f"matmul needs ndim >= 2, got {ad.ndim} and {bd.ndim}")
    if ad.shape[-1] != bd.shape[-2]:
        raise AutodiffError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")

    if ad.ndim == bd.ndim:
        if ad.shape[:-2] != bd.shape[:-2]:
            raise AutodiffError(f"matmul leading dims differ: {ad.shape} @ {bd.shape}")

        def back(gy):
            ga = gy @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ gy
            return (np.ascontiguousarray(ga), np.ascontiguousarray(gb))

    elif bd.ndim == 2:

        def back(gy):
            ga = gy @ bd.T
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ gy.reshape(-1, n)
            return (np.ascontiguousarray(ga), np.ascontiguousarray(gb))

    else:
        raise AutodiffError(
            f"unsupported matmul arrangement: {ad.shape} @ {bd.shape}"
        )
    return _record(ad @ bd, [a, b], back)


# -- neural ops ---------------------------------------------------------------


def _as_nchw(a: Tensor) -> tuple[np.ndarray, bool]:
    if a.ndim == 3:
        return a.data[None], True
    if a.ndim == 4:
        return a.data, False
    raise AutodiffError(f"expected [c,h,w] or [n,c,h,w], got shape {a.shape}")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation; x is [ci,h,w] or [n,ci,h,w], kernel [co,ci,kh,kw]."""
    xd, squeezed = _as_nchw(x)
    kd = kernel.data
    if kd.ndim != 4:
        raise AutodiffError(f"kernel must be [co,ci,kh,kw], got {kernel.shape}")
    n, ci, h, w = xd.shape
    co, kci, kh, kw = kd.shape
    if kci != ci:
        raise AutodiffError(f"channel mismatch: input has {ci}, kernel expects {kci}")
    if (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise AutodiffError(
            f"conv2d geometry not exact: input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise AutodiffError("kernel larger than padded input")

    out = kernels.conv2d_forward(xd, kd, stride, padding)

    def back(gy):
        g = gy[None] if squeezed else gy
        gx = kernels.conv2d_backward_input(g, kd, stride, padding, h, w)
        gk = kernels.conv2d_backward_kernel(g, xd, kh, kw, stride, padding)
        return (gx[0] if squeezed else gx, gk)

    return _record(out[0] if squeezed else out, [x, kernel], back)


def pool2d(x: Tensor, kind: str = "max", size: int = 2, stride: int | None = None) -> Tensor:
    """Spatial pooling over [.., h, w].

    kind "max"/"avg" pool size x size windows; "global_avg"/"global_max"
    reduce the spatial axes away entirely (output [..] x channels).
    """
    if kind == "global_avg":
        return mean(x, axis=(x.ndim - 2, x.ndim - 1))
    if kind == "global_max":
        return max_(max_(x, axis=x.ndim - 1), axis=x.ndim - 2)
    stride = size if stride is None else stride
    xd, squeezed = _as_nchw(x)
    n, c, h, w = xd.shape
    if (h - size) % stride or (w - size) % stride:
        raise AutodiffError(f"pool2d geometry not exact: {h}x{w} size {size} stride {stride}")
    if kind == "max":
        out, idx = kernels.maxpool2d_forward(xd, size, stride)

        def back(gy):
            g = gy[None] if squeezed else gy
            gx = kernels.maxpool2d_backward(g, idx, h, w)
            return (gx[0] if squeezed else gx,)

        return _record(out[0] if squeezed else out, [x], back)
    if kind == "avg":
        if stride != size:
            raise AutodiffError("avg pooling supports non-overlapping windows only")
        oh, ow = h // size, w // size
        out = xd.reshape(n, c, oh, size, ow, size).mean(axis=(3, 5))

        def back(gy):
            g = gy[None] if squeezed else gy
            gx = np.repeat(np.repeat(g, size, axis=2), size, axis=3) / (size * size)
            return (np.ascontiguousarray(gx[0] if squeezed else gx),)

        return _record(np.ascontiguousarray(out[0] if squeezed else out), [x], back)
    raise AutodiffError(f"unknown pool kind {kind!r}")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically-stable softmax along one axis (max-subtraction trick)."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(gy):
        dot = (gy * out).sum(axis=axis, keepdims=True)
        return (out * (gy - dot),)

    return _record(out, [a], back)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean negative log-likelihood of the target class under softmax(logits).

    logits is [k] with an int target, or [n,k] with a length-n target vector.
    Computed via log-sum-exp; the backward rule is softmax minus one-hot.
    """
    ld = logits.data
    if ld.ndim == 1:
        ld2 = ld[None]
        targets = np.asarray([int(target)])
    elif ld.ndim == 2:
        ld2 = ld
        targets = np.asarray(target, dtype=np.int64)
        if targets.shape != (ld2.shape[0],):
            raise AutodiffError(
                f"target shape {targets.shape} does not match logits {logits.shape}"
            )
    else:
        raise AutodiffError(f"logits must be [k] or [n,k], got {logits.shape}")
    n, k = ld2.shape
    if np.any(targets < 0) or np.any(targets >= k):
        raise AutodiffError(f"target out of range for {k} classes")

    m = ld2.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(ld2 - m).sum(axis=1))
    losses = lse - ld2[np.arange(n), targets]
    out = losses.mean()

    def back(gy):
        sm = np.exp(ld2 - m)
        sm /= sm.sum(axis=1, keepdims=True)
        sm[np.arange(n), targets] -= 1.0
        g = sm * (float(gy) / n)
        return (g[0] if ld.ndim == 1 else g,)

    return _record(out, [logits], back)
