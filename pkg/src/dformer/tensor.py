"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation records one node on the active :class:`Tape`
when at least one input requires a gradient.  :func:`backward` replays the
tape in reverse and then resets it.  Multiplies performed by ``matmul``,
``linear`` and ``depthwise_conv3d`` are reported to every active
:class:`FlopCounter`; elementwise, normalisation and softmax arithmetic is
not counted.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import ContractError, DimensionError, NumericError, ParameterError

_SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass
class Node:
    kind: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations (single writer)."""

    nodes: list[Node] = field(default_factory=list)

    def record(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def reset(self) -> None:
        for node in self.nodes:
            node.output._node = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.tape = Tape()
        self.counters: list[FlopCounter] = []


_state = _State()


def current_tape() -> Tape:
    return _state.tape


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        self._prev = _state.grad_enabled
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev


class FlopCounter:
    """Counts scalar multiply-accumulates while active.

    >>> with FlopCounter() as fc:
    ...     _ = matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))
    >>> fc.multiplies
    24
    """

    def __init__(self, enabled: bool = True):
        self.multiplies = 0
        self.enabled = enabled

    def __enter__(self):
        _state.counters.append(self)
        return self

    def __exit__(self, *exc):
        _state.counters.remove(self)

    def add(self, n: int) -> None:
        if self.enabled:
            self.multiplies += int(n)


def _count(n: int) -> None:
    for counter in _state.counters:
        counter.add(n)


class Tensor:
    """A float64 array that may participate in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if arr.size == 0:
            raise DimensionError(f"empty tensor of shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: int | None = None

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
    def tape_id(self) -> int | None:
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Iterable[Tensor], backward_fn, kind: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by {kind}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node = None
    inputs = tuple(inputs)
    out.requires_grad = _state.grad_enabled and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        out._node = _state.tape.record(Node(kind, inputs, out, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape))

    return _make(out, (a, b), back, "div")


def exp(t: Tensor) -> Tensor:
    out = np.exp(t.data)
    return _make(out, (t,), lambda g: (g * out,), "exp")


def log(t: Tensor) -> Tensor:
    x = t.data
    if np.any(x <= 0):
        raise NumericError("log of non-positive value")
    return _make(np.log(x), (t,), lambda g: (g / x,), "log")


def clamp_min(t: Tensor, floor: float) -> Tensor:
    x = t.data
    keep = x >= floor
    return _make(np.where(keep, x, floor), (t,), lambda g: (g * keep,), "clamp_min")


def gelu(t: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = t.data
    cdf = ndtr(x)
    pdf = np.exp(-0.5 * x * x) / _SQRT_2PI
    return _make(x * cdf, (t,), lambda g: (g * (cdf + x * pdf),), "gelu")


# reductions -----------------------------------------------------------------

def tsum(t: Tensor, axis=None) -> Tensor:
    shape = t.shape
    if axis is None:
        return _make(np.array(t.data.sum()), (t,),
                     lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    axis = axis % t.ndim
    out = t.data.sum(axis=axis)
    return _make(out, (t,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),), "sum")


def mean(t: Tensor) -> Tensor:
    shape, n = t.shape, t.size
    return _make(np.array(t.data.mean()), (t,),
                 lambda g: (np.full(shape, float(g) / n),), "mean")


# layout ---------------------------------------------------------------------

def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != t.size:
        raise DimensionError(f"cannot reshape {t.shape} to {shape}")
    src = t.shape
    return _make(t.data.reshape(shape).copy(), (t,), lambda g: (g.reshape(src),), "reshape")


def permute(t: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(t.ndim)):
        raise DimensionError(f"invalid permutation {axes} for shape {t.shape}")
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(t.data.transpose(axes)), (t,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),), "permute")


def index_select(t: Tensor, index) -> Tensor:
    """Rows of ``t`` (axis 0) picked by an integer index array."""
    index = np.asarray(index, dtype=np.int64)
    shape = t.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _make(t.data[index], (t,), back, "index_select")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate {[t.shape for t in tensors]}") from exc
    return _make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


# products -------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[..., m, k] @ [..., k, n]`` with equal batch extents."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    _count(int(np.prod(a.shape[:-1])) * a.shape[-1] * b.shape[-1])
    return _make(ad @ bd, (a, b),
                 lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g),
                 "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x[..., k] @ weight[k, n] + bias[n]``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear shape mismatch: {x.shape} x {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    k, n = wd.shape
    rows = x.size // k
    _count(rows * k * n)
    out = xd @ wd
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g2 = g.reshape(rows, n)
        grads = [g @ wd.T, xd.reshape(rows, k).T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _make(out, inputs, back, "linear")


# normalisation / attention primitives ---------------------------------------

def softmax_lastdim(t: Tensor) -> Tensor:
    if t.ndim == 0 or t.shape[-1] < 1:
        raise DimensionError("softmax needs a non-empty last dimension")
    z = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _make(y, (t,),
                 lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),), "softmax")


def layer_norm(t: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be positive, got {eps}")
    c = t.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"gamma/beta {gamma.shape}/{beta.shape} vs last extent {c}")
    x = t.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def back(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = g.reshape(-1, c)
        return dx, (lead * xhat.reshape(-1, c)).sum(axis=0), lead.sum(axis=0)

    return _make(xhat * gd + beta.data, (t, gamma, beta), back, "layer_norm")


def depthwise_conv3d(t: Tensor, kernels: Tensor, padding: Sequence[int] | None = None) -> Tensor:
    """Per-channel zero-padded 3D correlation of ``t[C, d, h, w]`` with ``kernels[C, kd, kh, kw]``."""
    if t.ndim != 4 or kernels.ndim != 4 or kernels.shape[0] != t.shape[0]:
        raise DimensionError(f"depthwise_conv3d shape mismatch: {t.shape} vs {kernels.shape}")
    c, d, h, w = t.shape
    _, kd, kh, kw = kernels.shape
    if kd % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
        raise ParameterError(f"kernel extents must be odd, got {(kd, kh, kw)}")
    same = ((kd - 1) // 2, (kh - 1) // 2, (kw - 1) // 2)
    if padding is None:
        padding = same
    if tuple(padding) != same:
        raise ParameterError(f"padding {tuple(padding)} does not preserve extents; need {same}")
    pd, ph, pw = same
    xp = np.pad(t.data, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))
    kd_ = kernels.data
    _count(c * d * h * w * kd * kh * kw)
    out = np.zeros((c, d, h, w))
    for a in range(kd):
        for b in range(kh):
            for e in range(kw):
                out += kd_[:, a, b, e, None, None, None] * xp[:, a:a + d, b:b + h, e:e + w]

    def back(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kd_)
        for a in range(kd):
            for b in range(kh):
                for e in range(kw):
                    gxp[:, a:a + d, b:b + h, e:e + w] += kd_[:, a, b, e, None, None, None] * g
                    gk[:, a, b, e] = (xp[:, a:a + d, b:b + h, e:e + w] * g).sum(axis=(1, 2, 3))
        return gxp[:, pd:pd + d, ph:ph + h, pw:pw + w], gk

    return _make(out, (t, kernels), back, "depthwise_conv3d")


# differentiation ------------------------------------------------------------

def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``root`` with respect to every grad-enabled leaf.

    Leaf gradients are also stored on ``leaf.grad``.  The active tape is reset
    afterwards.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad or root._node is None:
        raise ContractError("root does not depend on any grad-enabled tensor")
    tape = _state.tape
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    leaves: dict[int, Tensor] = {}
    try:
        for node in reversed(tape.nodes[: root._node + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, ig in zip(node.inputs, node.backward(g)):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = grads[key] + ig if key in grads else ig
                if inp._node is None:
                    leaves[key] = inp
    finally:
        tape.reset()
    result = {}
    for key, leaf in leaves.items():
        leaf.grad = grads[key]
        result[leaf] = grads[key]
    return result


def finite_diff_oracle(f: Callable[[Tensor], Tensor | float], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x`` (``x.data`` is perturbed in place and restored)."""
    if h <= 0:
        raise ParameterError(f"step must be positive, got {h}")

    def value() -> float:
        out = f(x)
        v = float(out.data.reshape(-1)[0]) if isinstance(out, Tensor) else float(out)
        if not np.isfinite(v):
            raise NumericError("non-finite function value in finite differences")
        return v

    x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    grad = np.empty(flat.size)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = value()
            flat[i] = orig - h
            lo = value()
            flat[i] = orig
            grad[i] = (hi - lo) / (2.0 * h)
    return Tensor(grad.reshape(x.shape))


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Max absolute difference scaled by the larger of the two max magnitudes.

    The scale never drops below ``floor``, so a structurally zero gradient
    (the key bias under softmax, for instance) is compared in absolute terms
    instead of dividing round-off by round-off.
    """
    a = np.asarray(getattr(analytic, "data", analytic), dtype=np.float64)
    n = np.asarray(getattr(numeric, "data", numeric), dtype=np.float64)
    scale = max(float(np.abs(a).max()), float(np.abs(n).max()), floor)
    return float(np.abs(a - n).max() / scale)
