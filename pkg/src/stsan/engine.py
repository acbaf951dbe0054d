"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation returns a :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.
:func:`backward` walks the recorded graph in reverse topological order.

Leading batch axes are supported by every op; the model code relies on this
to run a whole mini-batch through one graph.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


_grad_enabled = True
_check_finite = True
_node_counter = itertools.count()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_finite_checks(enabled: bool) -> bool:
    """Toggle NaN/Inf detection at op boundaries; returns the previous value."""
    global _check_finite
    prev, _check_finite = _check_finite, enabled
    return prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """An n-dimensional array that may participate in a differentiation graph.

    ``node_id`` is ``None`` for constants (tensors that neither require a
    gradient nor descend from one).
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_parents", "_backward", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_counter) if requires_grad else None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """A named trainable tensor; gradient has the value's shape."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=np.float64))
    return Tensor(np.asarray(x, dtype=dtype))


def _check(out: np.ndarray, op: str) -> None:
    if not _check_finite or out.size == 0:
        return
    # cheap reduction first; the full elementwise scan only runs on failure
    if np.isfinite(np.add.reduce(out, axis=None)):
        return
    if not np.isfinite(out).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out.node_id = next(_node_counter)
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.node_id = None
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def square(x: Tensor) -> Tensor:
    def backward(g):
        return (2.0 * x.data * g,)

    return _make(x.data * x.data, (x,), backward, "square")


# -- shape manipulation ----------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape

    def backward(g):
        return (g.reshape(src),)

    return _make(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _make(x.data.transpose(axes), (x,), backward, "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing only."""
    parts = idx if isinstance(idx, tuple) else (idx,)
    for p in parts:
        if not (p is Ellipsis or p is None or isinstance(p, (slice, int, np.integer))):
            raise TypeError("only basic slicing is differentiable")

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _make(x.data[idx], (x,), backward, "getitem")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([x.data for x in xs], axis=ax), xs, backward, "concat")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape

    def backward(g):
        return (_unbroadcast(g, src),)

    return _make(np.broadcast_to(x.data, tuple(shape)).copy(), (x,), backward, "broadcast")


# -- reductions ------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _make(np.sum(x.data, axis=axes, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)

    return _make(np.mean(x.data, axis=axes, keepdims=keepdims), (x,), backward, "mean")


# -- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 axes")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def dense_affine(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``y = x W + b`` along the last axis; leading axes are preserved."""
    x = as_tensor(x)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"dense_affine: input last axis {x.shape[-1:]} vs W {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError(f"dense_affine: bias {b.shape} vs W {W.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, W.shape[0])
    y = x2 @ W.data
    if b is not None:
        y = y + b.data
    y = y.reshape(lead + (W.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, W.shape[1])
        gx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    parents = (x, W) if b is None else (x, W, b)
    return _make(y, parents, backward, "dense_affine")


def _im2col(xp: np.ndarray, k: int) -> np.ndarray:
    # (..., I+k-1, J+k-1, C) -> (..., I, J, k, k, C), copied contiguous
    win = sliding_window_view(xp, (k, k), axis=(-3, -2))
    return np.ascontiguousarray(np.moveaxis(win, -3, -1))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-size 2-D convolution with zero padding of width (k-1)/2.

    ``x`` is ``(..., I, J, C_in)`` and ``kernel`` is ``(k, k, C_in, C_out)``.
    A grouped kernel ``(G, k, k, C_in, C_out)`` applies an independent filter
    bank to each index of the axis just before ``I`` (which must have extent
    ``G``); the bias is then ``(G, C_out)``.
    """
    x = as_tensor(x)
    grouped = kernel.ndim == 5
    if kernel.ndim not in (4, 5):
        raise ShapeError(f"conv2d kernel must have 4 or 5 axes, got {kernel.shape}")
    k, k2, cin, cout = kernel.shape[-4:]
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square with odd size, got {kernel.shape}")
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape[-1]} vs kernel {cin}")
    if grouped and (x.ndim < 4 or x.shape[-4] != kernel.shape[0]):
        raise ShapeError(f"grouped conv2d: input {x.shape} vs kernel groups {kernel.shape[0]}")
    expected_bias = (kernel.shape[0], cout) if grouped else (cout,)
    if bias is not None and bias.shape != expected_bias:
        raise ShapeError(f"conv2d bias {bias.shape}, expected {expected_bias}")

    pad = (k - 1) // 2
    I, J = x.shape[-3], x.shape[-2]
    widths = [(0, 0)] * (x.ndim - 3) + [(pad, pad), (pad, pad), (0, 0)]
    cols = _im2col(np.pad(x.data, widths), k)  # (..., [G,] I, J, k, k, C)
    kkc = k * k * cin

    if grouped:
        G = kernel.shape[0]
        lead = x.shape[:-4]
        # (lead, G, I, J, kkc) -> (G, lead*I*J, kkc)
        cmat = np.moveaxis(cols.reshape(lead + (G, I * J, kkc)), len(lead), 0).reshape(G, -1, kkc)
        wmat = kernel.data.reshape(G, kkc, cout)
        y = cmat @ wmat  # (G, M, cout)
        if bias is not None:
            y = y + bias.data[:, None, :]
        out = np.moveaxis(y.reshape((G,) + lead + (I * J, cout)), 0, len(lead)).reshape(x.shape[:-1] + (cout,))
    else:
        cmat = cols.reshape(-1, kkc)
        wmat = kernel.data.reshape(kkc, cout)
        y = cmat @ wmat
        if bias is not None:
            y = y + bias.data
        out = y.reshape(x.shape[:-1] + (cout,))

    def backward(g):
        if grouped:
            lead = x.shape[:-4]
            g2 = np.moveaxis(g.reshape(lead + (G, I * J, cout)), len(lead), 0).reshape(G, -1, cout)
            gW = (np.swapaxes(cmat, -1, -2) @ g2).reshape(kernel.shape) if kernel.requires_grad else None
            gb = g2.sum(axis=1) if bias is not None else None
            gx = None
            if x.requires_grad:
                dcols = g2 @ np.swapaxes(wmat, -1, -2)  # (G, M, kkc)
                dcols = np.moveaxis(dcols.reshape((G,) + lead + (I, J, k, k, cin)), 0, len(lead))
        else:
            g2 = g.reshape(-1, cout)
            gW = (cmat.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
            gb = g2.sum(axis=0) if bias is not None else None
            gx = None
            if x.requires_grad:
                dcols = (g2 @ wmat.T).reshape(x.shape[:-1] + (k, k, cin))
        if x.requires_grad:
            dxp = np.zeros(x.shape[:-3] + (I + 2 * pad, J + 2 * pad, cin), dtype=g.dtype)
            for a in range(k):
                for b_ in range(k):
                    dxp[..., a:a + I, b_:b_ + J, :] += dcols[..., a, b_, :]
            gx = dxp[..., pad:pad + I, pad:pad + J, :]
        if bias is None:
            return gx, gW
        return gx, gW, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, backward, "conv2d")


# -- nonlinearities --------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)

    def backward(g):
        return (g * (y > 0),)

    return _make(y, (x,), backward, "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - y * y),)

    return _make(y, (x,), backward, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    xd = x.data
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype, copy=False)

    def backward(g):
        return (g * y * (1.0 - y),)

    return _make(y, (x,), backward, "sigmoid")


_ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def softmax(x: Tensor, axes=-1) -> Tensor:
    """Softmax normalized jointly over ``axes`` (an int or a tuple of ints)."""
    if isinstance(axes, int):
        axes = (axes,)
    if len(axes) == 0:
        raise ValueError("softmax needs at least one axis")
    axes = tuple(a % x.ndim for a in axes)
    if any(x.shape[a] == 0 for a in axes):
        raise ValueError("softmax over an empty extent")
    z = x.data - x.data.max(axis=axes, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axes, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axes, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply ``gain * xhat + bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine {gain.shape}/{bias.shape} vs feature width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, d)
        return gx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)

    return _make(y, (x, gain, bias), backward, "layer_norm")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not training or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    dt = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
    keep = (rng.random(x.shape, dtype=dt) >= rate).astype(x.dtype) * np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)

    def backward(g):
        return (g * keep,)

    return _make(x.data * keep, (x,), backward, "dropout")


def mse_loss(y_hat: Tensor, y) -> Tensor:
    """Mean over samples of ``sum_c (y_c - y_hat_c)^2 / w``.

    Equal to the mean over every element when all samples share width ``w``.
    """
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=y_hat.dtype)
    if y.shape != y_hat.shape:
        raise ShapeError(f"mse_loss shapes differ: {y_hat.shape} vs {y.shape}")
    diff = y_hat.data - y
    n = diff.size

    def backward(g):
        return (g * 2.0 * diff / n,)

    return _make(np.asarray(np.mean(diff * diff), dtype=y_hat.dtype), (y_hat,), backward, "mse_loss")


# -- differentiation -------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=parent.dtype, copy=True) if pg.base is not None else pg


def gradient_of(loss: Tensor, params: Iterable[Parameter]) -> dict[str, np.ndarray]:
    """Fresh gradients of a scalar loss w.r.t. ``params`` (zeros if unreachable)."""
    params = list(params)
    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    try:
        backward(loss)
        return {p.name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for p in params}
    finally:
        for p, g in zip(params, saved):
            p.grad = g


# -- module scaffolding ----------------------------------------------------

def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    """Base for anything holding :class:`Parameter` attributes or sub-modules.

    Parameter names are derived from attribute paths; lists of modules are
    named ``<attr>.block<i>``.
    """

    training: bool = False

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    yield from child.named_parameters(f"{path}.block{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for child in value:
                    yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def assign_names(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name
