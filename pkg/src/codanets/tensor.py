"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Only the operations needed by the CoDA layers, the losses and the
attribution code are provided.  Every op is pure: it allocates a new output
array and never writes into its inputs.  Gradients flow backwards through
closures stored on the output tensor; the graph is released after
:meth:`Tensor.backward` unless ``retain_graph=True`` is passed.

Broadcasting follows numpy rules and gradients are summed back to the
operand shapes.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, ContractError, DimensionError

_DTYPES = {"f32": np.float32, "f64": np.float64}

_state = {"dtype": np.float64, "eps": 1e-6, "grad_enabled": True}


def set_precision(name: str) -> None:
    """Select the default floating point type, ``"f32"`` or ``"f64"``."""
    if name not in _DTYPES:
        raise ConfigurationError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _state["dtype"] = _DTYPES[name]


def get_dtype():
    return _state["dtype"]


def precision_name() -> str:
    return "f32" if _state["dtype"] is np.float32 else "f64"


@contextlib.contextmanager
def precision(name: str):
    old = _state["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _state["dtype"] = old


def set_eps(eps: float) -> None:
    """Floor applied to every norm that ends up in a denominator."""
    if not eps > 0:
        raise ConfigurationError(f"eps must be positive, got {eps}")
    _state["eps"] = float(eps)


def get_eps() -> float:
    return _state["eps"]


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


class Tensor:
    """An n-dimensional array that can record the operations applied to it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = np.asarray(data, dtype=dtype or _state["dtype"])
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    # -- autodiff ---------------------------------------------------------
    def backward(self, retain_graph: bool = False) -> None:
        """Back-propagate from this scalar.

        Leaf tensors accumulate into ``grad``; intermediate tensors have their
        ``grad`` overwritten with the gradient of this particular pass.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that does not require grad")

        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._parents:
                node.grad = g
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    grads[key] = grads[key] + pg if key in grads else pg
            else:
                node.grad = g.copy() if node.grad is None else node.grad + g

        if not retain_graph:
            for node in order:
                node._parents = ()
                node._backward = None

    # -- operator sugar ---------------------------------------------------
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
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


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic ----------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward)


def div(a, b, eps: float | None = None) -> Tensor:
    """``a / b``; with ``eps`` the (non-negative) denominator is floored at ``eps``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    if eps is not None:
        b = clamp_min(b, eps)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g * c,)

    return _result(a.data * c, (a,), backward)


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    mask = a.data > lo

    def backward(g):
        return (g * mask,)

    return _result(np.where(mask, a.data, lo).astype(a.dtype, copy=False), (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _result(a.data * mask, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result(out, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _result(out, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g / a.data,)

    return _result(np.log(a.data), (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out,)

    return _result(out, (a,), backward)


def square(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g * 2.0 * a.data,)

    return _result(a.data * a.data, (a,), backward)


# -- reductions and norms --------------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis=axes, keepdims=keepdims), 1.0 / count)


def l2norm(a, axis=-1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at the origin is taken as zero."""
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = np.sqrt((a.data * a.data).sum(axis=axes, keepdims=True))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        safe = np.where(out > 0, out, 1.0)
        return (g * a.data / safe * (out > 0),)

    value = out if keepdims else np.squeeze(out, axis=axes)
    return _result(np.asarray(value), (a,), backward)


def frobenius_norm(a, axes=(-2, -1), keepdims: bool = False) -> Tensor:
    """Frobenius norm over ``axes`` (the last two by default)."""
    return l2norm(a, axis=axes, keepdims=keepdims)


# -- shape manipulation --------------------------------------------------------------
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(a.shape),)

    return _result(out, (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inverse = np.argsort(axes)

    def backward(g):
        return (g.transpose(inverse),)

    return _result(a.data.transpose(axes), (a,), backward)


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.asarray(a.data[index]), (a,), backward)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, backward)


# -- linear algebra -----------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Batched matrix product following ``numpy.matmul`` (operands need ndim >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: batch extents do not broadcast, {a.shape} x {b.shape}") from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), backward)


# -- convolution helpers ------------------------------------------------------------------
def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check_conv_args(h, w, kernel, stride, padding):
    kh, kw = kernel
    if stride <= 0:
        raise ConfigurationError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ConfigurationError(f"padding must be non-negative, got {padding}")
    if kh <= 0 or kw <= 0:
        raise ConfigurationError(f"kernel extents must be positive, got {kernel}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"kernel {kernel} larger than padded input {(h + 2 * padding, w + 2 * padding)}")
    return kh, kw


def unfold_array(x: np.ndarray, kernel, stride: int = 1, padding: int = 0) -> np.ndarray:
    """im2col on ``(..., C, H, W)``; returns ``(..., C*kh*kw, out_h*out_w)``.

    Rows are ordered channel-major, then kernel row, then kernel column.
    """
    *lead, c, h, w = x.shape
    kh, kw = _check_conv_args(h, w, kernel, stride, padding)
    if padding:
        pad = [(0, 0)] * (x.ndim - 2) + [(padding, padding), (padding, padding)]
        x = np.pad(x, pad)
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(-2, -1))
    win = win[..., ::stride, ::stride, :, :][..., :oh, :ow, :, :]
    # (..., C, oh, ow, kh, kw) -> (..., C, kh, kw, oh, ow)
    nd = win.ndim
    axes = tuple(range(nd - 5)) + (nd - 5, nd - 2, nd - 1, nd - 4, nd - 3)
    return np.ascontiguousarray(win.transpose(axes)).reshape(*lead, c * kh * kw, oh * ow)


def fold_array(cols: np.ndarray, output_shape, kernel, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Adjoint of :func:`unfold_array`: scatter-add columns back into ``(..., C, H, W)``."""
    c, h, w = output_shape
    kh, kw = _check_conv_args(h, w, kernel, stride, padding)
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    lead = cols.shape[:-2]
    if cols.shape[-2:] != (c * kh * kw, oh * ow):
        raise DimensionError(
            f"fold: columns of shape {cols.shape[-2:]} do not match {(c * kh * kw, oh * ow)}"
        )
    cols = cols.reshape(*lead, c, kh, kw, oh, ow)
    out = np.zeros((*lead, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[..., i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[..., i, j, :, :]
    if padding:
        out = out[..., padding:padding + h, padding:padding + w]
    return out


def unfold(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Differentiable im2col: ``(..., C, H, W) -> (..., C*kh*kw, P)``."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise DimensionError(f"unfold expects (..., C, H, W), got shape {x.shape}")
    kernel = tuple(kernel)
    out = unfold_array(x.data, kernel, stride, padding)

    def backward(g):
        return (fold_array(g, x.shape[-3:], kernel, stride, padding),)

    return _result(out, (x,), backward)


def fold(cols, output_shape, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    cols = as_tensor(cols)
    kernel = tuple(kernel)
    out = fold_array(cols.data, output_shape, kernel, stride, padding)

    def backward(g):
        return (unfold_array(g, kernel, stride, padding),)

    return _result(out, (cols,), backward)


# -- fused rescale-and-contract --------------------------------------------------------------------
def _rescale_factor(n: np.ndarray, mode: str, eps: float):
    """``f(n)`` with ``g(u) = f(||u||) u`` and ``f'(n) / n`` (zero where undefined)."""
    big = n > eps
    safe = np.where(big, n, 1.0)
    if mode == "l2":
        f = np.where(big, 1.0 / safe, 1.0 / eps)
        fprime_over_n = np.where(big, -1.0 / (safe * safe * safe), 0.0)
    elif mode == "sq":
        q = 1.0 + n * n
        f = np.where(big, safe / q, n * n / (eps * q))
        fprime_over_n = np.where(big, (1.0 - n * n) / (q * q * safe), 2.0 / (eps * q * q))
    else:
        raise ConfigurationError(f"unknown rescale mode {mode!r}")
    return f, fprime_over_n


def rescaled_inner(u, x, mode: str = "l2", axis: int = -2) -> Tensor:
    """``sum(g(u) * x, axis)`` where ``g`` rescales ``u`` along ``axis`` (``"l2"`` or ``"sq"``).

    Equivalent to composing :func:`l2norm`, :func:`div`, :func:`mul` and
    :func:`sum_` but without storing ``g(u)``; the norm floor is the package
    epsilon.
    """
    u, x = as_tensor(u), as_tensor(x)
    _broadcast_shape(u, x, "rescaled_inner")
    eps = _state["eps"]
    ux = (u.data * x.data).sum(axis=axis, keepdims=True)
    n = np.sqrt((u.data * u.data).sum(axis=axis, keepdims=True))
    f, fpn = _rescale_factor(n, mode, eps)
    out = np.squeeze(f * ux, axis=axis)

    def backward(g):
        g = np.expand_dims(g, axis)
        gu = gx = None
        if u.requires_grad:
            gu = _unbroadcast(g * (f * x.data + u.data * (fpn * ux)), u.shape)
        if x.requires_grad:
            gx = _unbroadcast(g * f * u.data, x.shape)
        return gu, gx

    return _result(out.astype(u.dtype, copy=False), (u, x), backward)


# -- losses -------------------------------------------------------------------------------------
def bce_with_logits(logits, targets) -> Tensor:
    """Element-wise binary cross-entropy of ``sigmoid(logits)`` against ``targets``."""
    z, y = as_tensor(logits), as_tensor(targets)
    _broadcast_shape(z, y, "bce_with_logits")
    out = np.logaddexp(0.0, z.data) - y.data * z.data

    def backward(g):
        return _unbroadcast(g * (expit(z.data) - y.data), z.shape), None

    return _result(out, (z, y), backward)
