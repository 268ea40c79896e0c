"""Minimal reverse-mode differentiation on top of numpy.

Operations are recorded on the innermost active :class:`Tape`.  Outside of a
tape every operator is a plain numpy computation, which is what inference
uses.

>>> w = Tensor([[1.0, 2.0]], requires_grad=True)
>>> with Tape() as tape:
...     loss = total(matmul(w, Tensor([[3.0], [4.0]])))
...     tape.backward(loss)
>>> w.grad
array([[3., 4.]])
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7
STD_EPS = 1e-5
SIGMOID_CLIP = 700.0

_TAPES: list["Tape"] = []


class Tensor:
    """An n-d array with an optional gradient slot.

    ``grad`` is only populated on leaf tensors (those not produced by a
    recorded operation) and is always stored in double precision.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, _as_tensor(other))  # noqa: E731
    __mul__ = lambda self, other: mul(self, _as_tensor(other))  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, _as_tensor(other))  # noqa: E731


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Op:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of operations; replayed in exact reverse by :meth:`backward`."""

    def __init__(self):
        self.ops: list[_Op] = []
        self._produced: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self, "tapes must be exited in LIFO order"

    def __len__(self) -> int:
        return len(self.ops)

    def record(self, name, inputs, output, backward) -> None:
        if self._consumed:
            raise RuntimeError("tape already consumed by backward(); call reset() first")
        self.ops.append(_Op(name, tuple(inputs), output, backward))
        self._produced.add(id(output))

    def reset(self) -> None:
        self.ops.clear()
        self._produced.clear()
        self._consumed = False

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] | None = None) -> list[np.ndarray] | None:
        """Propagate d(loss)/d(.) to every leaf that requires grad.

        When ``wrt`` is given, returns one gradient per entry; tensors the loss
        does not depend on get zeros.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise RuntimeError("backward() called twice on one tape without reset()")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for op in reversed(self.ops):
            g = grads.pop(id(op.output), None)
            if g is None:
                continue
            for inp, gi in zip(op.inputs, op.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in self._produced:
                    leaves[key] = inp

        if id(loss) not in self._produced and loss.requires_grad:
            leaves[id(loss)] = loss
        for key, leaf in leaves.items():
            g = np.asarray(grads[key], dtype=np.float64)
            leaf.grad = g if leaf.grad is None else leaf.grad + g

        if wrt is None:
            return None
        return [
            np.array(grads[id(t)], dtype=np.float64) if id(t) in grads else np.zeros(t.shape)
            for t in wrt
        ]


def current_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor] | None = None):
    return tape.backward(loss, wrt)


def _emit(name: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    tape = current_tape()
    if requires and tape is not None:
        tape.record(name, inputs, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}") from exc
    return _emit("add", out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ValueError(f"mul: incompatible shapes {a.shape} and {b.shape}") from exc
    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return _emit("relu", out, (a,), lambda g: (g * (out > 0),))


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function, evaluated in double precision on inputs clipped to +-700."""
    x = np.asarray(a.data, dtype=np.float64)
    inside = np.abs(x) <= SIGMOID_CLIP
    xc = np.clip(x, -SIGMOID_CLIP, SIGMOID_CLIP)
    e = np.exp(-np.abs(xc))
    s = np.where(xc >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = s.astype(a.dtype)

    def bw(g):
        return ((g * (s * (1.0 - s) * inside)).astype(a.dtype),)

    return _emit("sigmoid", out, (a,), bw)


# reductions and reshapes ---------------------------------------------------

def total(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)
    return _emit("sum", out, (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),))


def mean(a: Tensor, axis: int | tuple[int, ...] = -1) -> Tensor:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % a.data.ndim for ax in axes)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    if count == 0:
        raise ValueError(f"mean over an empty axis of shape {a.shape}")
    out = a.data.mean(axis=axes, dtype=np.float64).astype(a.dtype)

    def bw(g):
        g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype),)

    return _emit("mean", out, (a,), bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def standardize(a: Tensor, axis: int | tuple[int, ...] = -1, eps: float = STD_EPS) -> Tensor:
    """(x - mean) / sqrt(var + eps) over ``axis`` (population variance, no affine).

    Reductions accumulate in double precision; elementwise work stays in the
    storage dtype.
    """
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % a.data.ndim for ax in axes)
    x = a.data
    mu = x.mean(axis=axes, keepdims=True, dtype=np.float64)
    xc = x - mu.astype(x.dtype)
    var = np.mean(np.square(xc), axis=axes, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True, dtype=np.float64).astype(g.dtype)
        gym = np.mean(g * y, axis=axes, keepdims=True, dtype=np.float64).astype(g.dtype)
        return (inv * (g - gm - y * gym),)

    return _emit("standardize", y, (a,), bw)


# linear maps ----------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} x {b.shape}")
    return _emit("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def conv1x1(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-frame channel mixing: ``out[..., :, t] = w @ x[..., :, t] + bias``.

    ``x`` is ``[k, n]`` or batched ``[B, k, n]``; ``w`` is ``[c, k]``.
    """
    if w.data.ndim != 2 or x.data.ndim not in (2, 3) or x.shape[-2] != w.shape[1]:
        raise ValueError(f"conv1x1: channel mismatch, x {x.shape} vs w {w.shape}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise ValueError(f"conv1x1: bias shape {bias.shape} != ({w.shape[0]},)")
    out = np.matmul(w.data, x.data)
    if bias is not None:
        out = out + bias.data[:, None]

    def bw(g):
        gx = np.matmul(w.data.T, g) if x.requires_grad else None
        gw = gb = None
        if x.data.ndim == 3:
            if w.requires_grad:
                gw = np.matmul(g, x.data.transpose(0, 2, 1)).sum(axis=0)
            if bias is not None and bias.requires_grad:
                gb = g.sum(axis=(0, 2))
        else:
            if w.requires_grad:
                gw = g @ x.data.T
            if bias is not None and bias.requires_grad:
                gb = g.sum(axis=1)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, w, bias) if bias is not None else (x, w)
    return _emit("conv1x1", out, inputs, bw)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride: int | tuple[int, int] = 1, padding: int | tuple[int, int] = 1) -> Tensor:
    """2-D cross-correlation of ``x [B, C, H, W]`` with ``w [O, C, kh, kw]``."""
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: shape mismatch, x {x.shape} vs w {w.shape}")
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {H}x{W}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    # columns laid out [C, kh, kw, B, Ho, Wo]: one strided block copy per tap
    cols = np.empty((C, kh, kw, B, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw].transpose(1, 0, 2, 3)
    cols = cols.reshape(C * kh * kw, B * Ho * Wo)
    wmat = w.data.reshape(O, C * kh * kw)
    out = (wmat @ cols).reshape(O, B, Ho, Wo)
    if bias is not None:
        out += bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def bw(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(O, B * Ho * Wo)
        gw = (gmat @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(C, kh, kw, B, Ho, Wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw] += gcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, ph:ph + H, pw:pw + W]
        grads = [gx, gw]
        if bias is not None:
            grads.append(gmat.sum(axis=1))
        return grads

    inputs = (x, w, bias) if bias is not None else (x, w)
    return _emit("conv2d", out, inputs, bw)


# losses ---------------------------------------------------------------------

def bce_loss(pred: Tensor, target, eps: float = BCE_EPS) -> Tensor:
    """Binary cross-entropy averaged over every entry (classes, and clips if batched)."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ValueError(f"bce_loss: pred shape {pred.shape} != target shape {t.shape}")
    p = np.asarray(pred.data, dtype=np.float64)
    pc = np.clip(p, eps, 1.0 - eps)
    inside = (p >= eps) & (p <= 1.0 - eps)
    count = p.size
    val = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc)).sum() / count

    def bw(g):
        d = (-(t / pc) + (1.0 - t) / (1.0 - pc)) * inside / count
        return ((g * d).astype(pred.dtype),)

    return _emit("bce", np.asarray(val, dtype=pred.dtype), (pred,), bw)


# finite differences ---------------------------------------------------------

def numeric_gradient(fn: Callable[[], float], arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of ``fn()`` w.r.t. ``arr``, perturbed in place."""
    grad = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn())
        flat[i] = orig - h
        fm = float(fn())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(np.ravel(a) - np.ravel(b))
    den = np.linalg.norm(np.ravel(a)) + np.linalg.norm(np.ravel(b))
    return 0.0 if den == 0 else float(num / den)


def check_gradients(build: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6) -> list[float]:
    """Relative error between taped and finite-difference gradients, one per param.

    ``build`` must construct the scalar loss from the current parameter data.
    """
    with Tape() as tape:
        loss = build()
        analytic = tape.backward(loss, params)

    def value():
        return build().data

    return [relative_error(g, numeric_gradient(value, p.data, h)) for g, p in zip(analytic, params)]


def linear_softmax_pool(m: Tensor, axis: int = -1) -> Tensor:
    """sum(m**2) / sum(m) along ``axis``; expects positive scores."""
    x = np.asarray(m.data, dtype=np.float64)
    num = (x * x).sum(axis=axis, keepdims=True)
    den = x.sum(axis=axis, keepdims=True)
    out = np.squeeze(num / den, axis=axis)

    def bw(g):
        g = np.expand_dims(np.asarray(g, dtype=np.float64), axis)
        return ((g * (2.0 * x * den - num) / (den * den)).astype(m.dtype),)

    return _emit("linear_softmax_pool", out.astype(m.dtype), (m,), bw)
