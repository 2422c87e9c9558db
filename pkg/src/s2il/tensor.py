"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`GradTape` when at
least one input requires a gradient. Outside a tape every operation is a plain
numpy computation, which is how evaluation passes and frozen teachers run.

Example:

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with GradTape():
    ...     loss = (w * w).sum()
    >>> backward(loss)
    >>> w.grad.data
    array([2., 4.])
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, NumericGuardError, ShapeError, TapeStateError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_default_dtype: type = np.float64
_tape_stack: list["GradTape"] = []

# Denominators smaller than this in magnitude trip the division guard.
DIV_EPS = 1e-12
CHECK_FINITE = True


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _default_dtype = dtype


def get_default_dtype():
    return _default_dtype


class Tensor:
    """An n-dimensional float array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = np.array(data, dtype=dtype or _default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self.name = name
        self._tape: GradTape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return detach(self)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, accumulate: bool = False) -> None:
        backward(self, accumulate=accumulate)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6, threshold=20)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class GradTape:
    """Ordered record of differentiable operations for one training step.

    Use as a context manager; operations executed inside the block are
    recorded. A tape can be replayed once, by :meth:`backward` (writes
    ``.grad`` on leaves) or :meth:`gradient` (returns gradients for arbitrary
    recorded tensors).
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []
        self._leaves: dict[int, Tensor] = {}
        self._consumed = False

    def __enter__(self) -> "GradTape":
        if self._consumed:
            raise TapeStateError("cannot re-enter a tape that has already been replayed")
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], fn: BackwardFn) -> None:
        for p in parents:
            if p.requires_grad and p._tape is None:
                self._leaves[id(p)] = p
        out._tape = self
        self._nodes.append((out, parents, fn))

    def _watch(self, leaf: Tensor) -> None:
        if leaf.requires_grad and leaf._tape is None:
            self._leaves[id(leaf)] = leaf

    def _replay(self, loss: Tensor) -> dict[int, np.ndarray]:
        if self._consumed:
            raise TapeStateError("tape already replayed; record a new step before calling backward again")
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeStateError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, fn in reversed(self._nodes):
            g = grads.get(id(out))
            if g is None:
                continue
            for p, pg in zip(parents, fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return grads

    def _finish(self) -> None:
        self._consumed = True
        self._nodes.clear()

    def backward(self, loss: Tensor, accumulate: bool = False) -> None:
        grads = self._replay(loss)
        for key, leaf in self._leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(leaf.data)
            if accumulate and leaf.grad is not None:
                leaf.grad = Tensor._wrap(leaf.grad.data + g)
            else:
                leaf.grad = Tensor._wrap(np.array(g, dtype=leaf.data.dtype))
        self._leaves.clear()
        self._finish()

    def gradient(self, loss: Tensor, sources: Iterable[Tensor]) -> list[np.ndarray]:
        """Return d(loss)/d(source) for each source without touching ``.grad``."""
        grads = self._replay(loss)
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(np.zeros_like(s.data) if g is None else g)
        self._leaves.clear()
        self._finish()
        return out


def active_tape() -> GradTape | None:
    return _tape_stack[-1] if _tape_stack else None


def backward(loss: Tensor, accumulate: bool = False) -> None:
    """Populate ``.grad`` of every requires-grad leaf that fed the loss's tape.

    Leaves seen by the tape but not reachable from ``loss`` receive zeros.
    Gradients overwrite previous values unless ``accumulate`` is set.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise TapeStateError("loss has no recorded provenance; compute it inside a GradTape")
    loss._tape.backward(loss, accumulate=accumulate)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn, op: str) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericGuardError(f"{op} produced non-finite values")
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape._record(out, parents, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b, eps: float | None = None) -> Tensor:
    """Elementwise ``a / b``; raises if any ``|b|`` is below ``eps`` (default DIV_EPS).

    Callers that divide by quantities which can vanish must add their own
    stabilizer constant to the denominator.
    """
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    eps = DIV_EPS if eps is None else eps
    if np.any(np.abs(b.data) < eps):
        raise NumericGuardError(f"div: denominator magnitude below {eps:g}; add a stabilizer constant")
    q = a.data / b.data

    def fn(g):
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * q / b.data, b.shape))

    return _result(q, (a, b), fn, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    """``a ** exponent`` for a real, constant exponent.

    Fractional powers of negative numbers are rejected; use
    :func:`signed_power` when the sign should be carried through.
    """
    a = as_tensor(a)
    e = float(exponent)
    integral = e.is_integer()
    if not integral and np.any(a.data < 0):
        raise NumericGuardError(f"power: negative base with non-integer exponent {e:g}")
    if e < 0 and np.any(a.data == 0):
        raise NumericGuardError(f"power: zero base with negative exponent {e:g}")
    out = np.power(a.data, e)

    def fn(g):
        if e == 0:
            return (np.zeros_like(g),)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = e * np.power(a.data, e - 1)
        # derivative at 0 for 0 < e < 1 is unbounded; take 0 so training stays finite
        d = np.where(np.isfinite(d), d, 0.0)
        return (g * d,)

    return _result(out, (a,), fn, "power")


def signed_power(a, exponent: float) -> Tensor:
    """``sign(a) * |a| ** exponent``; odd-symmetric, defined for any real base."""
    a = as_tensor(a)
    e = float(exponent)
    if e < 0 and np.any(a.data == 0):
        raise NumericGuardError(f"signed_power: zero base with negative exponent {e:g}")
    mag = np.abs(a.data)
    out = np.sign(a.data) * np.power(mag, e)

    def fn(g):
        if e == 0:
            return (np.zeros_like(g),)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = e * np.power(mag, e - 1)
        d = np.where(np.isfinite(d), d, 0.0)
        return (g * d,)

    return _result(out, (a,), fn, "signed_power")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericGuardError("log: argument must be strictly positive")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise NumericGuardError("sqrt: negative argument")
    out = np.sqrt(a.data)

    def fn(g):
        # d sqrt(x)/dx is unbounded at 0; use 0 there (the subgradient of a kink)
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _result(out, (a,), fn, "sqrt")


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def sign(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.sign(a.data), (a,), lambda g: (np.zeros_like(g),), "sign")


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    return _result(out, (a,), lambda g: (g * (out > 0),), "relu")


def softplus(a) -> Tensor:
    """log(1 + exp(x)): a smooth, strictly positive ReLU with nonzero slope everywhere."""
    a = as_tensor(a)
    out = np.logaddexp(0, a.data)
    # sigmoid written via exp(x - softplus(x)) stays finite for large |x|
    return _result(out, (a,), lambda g: (g * np.exp(a.data - out),), "softplus")


def detach(a) -> Tensor:
    """Copy-free view of ``a`` that carries no gradient back to it."""
    a = as_tensor(a)
    tape = active_tape()
    if tape is not None:
        tape._watch(a)
    return Tensor._wrap(a.data)


# ----------------------------------------------------------------------------
# reductions and shape manipulation


def _norm_axis(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _result(np.asarray(out), (a,), fn, "mean")


def batch_mean(a) -> Tensor:
    """Mean over the leading (batch) axis."""
    return mean(a, axis=0)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _result(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    out = a.data[index]

    def fn(g):
        z = np.zeros_like(a.data)
        np.add.at(z, index, g)
        return (z,)

    return _result(np.array(out, copy=True), (a,), fn, "getitem")


def concatenate(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ContractError("concatenate needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concatenate: {err}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _result(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)), "concatenate")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _result(out, (a, b), fn, "matmul")


# ----------------------------------------------------------------------------
# softmax family


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    s = np.exp(a.data - m)
    tot = s.sum(axis=axis, keepdims=True)
    out = np.log(tot) + m
    sm = s / tot

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * sm,)

    return _result(out if keepdims else np.squeeze(out, axis=axis), (a,), fn, "logsumexp")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), fn, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def fn(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), fn, "log_softmax")


# ----------------------------------------------------------------------------
# spatial statistics over the trailing two axes of (..., H, W) maps


def _spatial_size(a: Tensor, op: str) -> int:
    if a.ndim < 2:
        raise ShapeError(f"{op} needs (..., H, W) maps, got shape {a.shape}")
    return a.shape[-1] * a.shape[-2]


def spatial_mean(a) -> Tensor:
    a = as_tensor(a)
    n = _spatial_size(a, "spatial_mean")
    out = a.data.mean(axis=(-2, -1))
    return _result(out, (a,), lambda g: (np.broadcast_to(g[..., None, None] / n, a.shape).copy(),),
                   "spatial_mean")


def global_avg_pool(a) -> Tensor:
    """(B, C, H, W) -> (B, C) by averaging each map."""
    a = as_tensor(a)
    if a.ndim != 4:
        raise ShapeError(f"global_avg_pool needs (B, C, H, W), got {a.shape}")
    return spatial_mean(a)


def spatial_var(a) -> Tensor:
    """Population variance of each map over its spatial positions."""
    a = as_tensor(a)
    n = _spatial_size(a, "spatial_var")
    c = a.data - a.data.mean(axis=(-2, -1), keepdims=True)
    out = (c * c).mean(axis=(-2, -1))
    return _result(out, (a,), lambda g: (g[..., None, None] * (2.0 / n) * c,), "spatial_var")


def spatial_cov(a, b) -> Tensor:
    """Population covariance between corresponding maps of ``a`` and ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"spatial_cov: shapes {a.shape} and {b.shape} differ")
    n = _spatial_size(a, "spatial_cov")
    ca = a.data - a.data.mean(axis=(-2, -1), keepdims=True)
    cb = b.data - b.data.mean(axis=(-2, -1), keepdims=True)
    out = (ca * cb).mean(axis=(-2, -1))

    def fn(g):
        g = g[..., None, None] / n
        return (g * cb, g * ca)

    return _result(out, (a, b), fn, "spatial_cov")


# ----------------------------------------------------------------------------
# convolution and pooling on (B, C, H, W)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding. ``weight`` is (C_out, C_in, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    if stride < 1 or padding < 0:
        raise ContractError("conv2d: stride must be >= 1 and padding >= 0")
    cout, cin, kh, kw = weight.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(-1, cin * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(x.shape[0], ho, wo, cout).transpose(0, 3, 1, 2)
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
        out = out + bias.data[None, :, None, None]
        parents = (x, weight, bias)
    out = np.ascontiguousarray(out)

    def fn(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gm.T @ cols).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(x.shape[0], ho, wo, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:hp - padding, padding:wp - padding] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _result(out, parents, fn, "conv2d")


def max_pool2d(x, size: int = 2, stride: int | None = None) -> Tensor:
    x = as_tensor(x)
    stride = stride or size
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d needs (B, C, H, W), got {x.shape}")
    if x.shape[2] < size or x.shape[3] < size:
        raise ShapeError(f"max_pool2d: map {x.shape[2:]} smaller than window {size}")
    b, c, h, w = x.shape
    if stride == size and h % size == 0 and w % size == 0:
        return _tiled_max_pool(x, size)
    win = sliding_window_view(x.data, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(*win.shape[:4], size * size)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    ho, wo = out.shape[2], out.shape[3]

    def fn(g):
        gx = np.zeros_like(x.data)
        for k in range(size * size):
            i, j = divmod(k, size)
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.where(arg == k, g, 0.0)
        return (gx,)

    return _result(np.ascontiguousarray(out), (x,), fn, "max_pool2d")


def _tiled_max_pool(x: Tensor, size: int) -> Tensor:
    # non-overlapping windows: one strided slice per window offset
    offsets = [(i, j) for i in range(size) for j in range(size)]
    parts = [x.data[:, :, i::size, j::size] for i, j in offsets]
    out = parts[0].copy()
    for part in parts[1:]:
        np.maximum(out, part, out=out)

    def fn(g):
        gx = np.zeros_like(x.data)
        taken = np.zeros(out.shape, dtype=bool)
        # ties go to the first offset in row-major window order
        for (i, j), part in zip(offsets, parts):
            hit = (part == out) & ~taken
            taken |= hit
            gx[:, :, i::size, j::size] = g * hit
        return (gx,)

    return _result(out, (x,), fn, "max_pool2d")


# ----------------------------------------------------------------------------
# helpers composed from primitives


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm; ``eps`` keeps zero vectors finite."""
    a = as_tensor(a)
    norm = sqrt(add(tsum(mul(a, a), axis=axis, keepdims=True), eps))
    return div(a, norm)


OPS: dict[str, Callable[..., Tensor]] = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
    "power": power, "signed_power": signed_power, "exp": exp, "log": log,
    "sqrt": sqrt, "abs": tabs, "sign": sign, "relu": relu, "softplus": softplus,
    "sum": tsum, "mean": mean, "batch_mean": batch_mean,
    "reshape": reshape, "transpose": transpose, "getitem": getitem,
    "concatenate": concatenate, "matmul": matmul,
    "logsumexp": logsumexp, "softmax": softmax, "log_softmax": log_softmax,
    "spatial_mean": spatial_mean, "spatial_var": spatial_var, "spatial_cov": spatial_cov,
    "global_avg_pool": global_avg_pool, "conv2d": conv2d, "max_pool2d": max_pool2d,
}


def forward_op(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an operation by name; see ``OPS`` for the available kinds."""
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ContractError(f"unknown op {op_kind!r}") from None
    return fn(*inputs, **kwargs)
