"""Dense tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`; when any operand requires a
gradient the result records its operands and a backward rule. Shapes must
match exactly for elementwise operations. The only implicit expansion is the
bias add over the last axis; scalar scaling and row gating are separate,
explicitly named operations.
"""

from __future__ import annotations

import builtins
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _node(data: np.ndarray, parents: Sequence[Tensor], rule: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def toposort(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in topological order (operands first)."""
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor requiring a gradient that feeds ``loss``.

    Gradients are added into any existing ``.grad`` so repeated uses of a
    tensor (or repeated backward calls) accumulate.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _node(x.data * c, (x,), lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _node(x.data + x.dtype.type(c), (x,), lambda g: (g,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with ``b`` repeated over every leading index of ``x``."""
    if b.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    axes = tuple(range(x.ndim - 1))
    return _node(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)))


def mul_scalar(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every entry of ``x`` by the single value held in ``s``."""
    if s.data.size != 1:
        raise ShapeError(f"mul_scalar: expected a one-element factor, got {s.shape}")
    xd, sv = x.data, s.data.reshape(())
    return _node(
        xd * sv,
        (x, s),
        lambda g: (g * sv, np.sum(g * xd).reshape(s.shape).astype(s.dtype)),
    )


def mul_rows(x: Tensor, gate: Tensor) -> Tensor:
    """Scale each last-axis vector of ``x`` by the matching entry of ``gate``.

    ``gate`` has shape ``x.shape[:-1]``; for a ``[L, d]`` input row ``i`` is
    multiplied by ``gate[i]``.
    """
    if x.ndim < 2 or gate.shape != x.shape[:-1]:
        raise ShapeError(f"mul_rows: gate {gate.shape} does not match rows of {x.shape}")
    xd, gd = x.data, gate.data
    return _node(
        xd * gd[..., None],
        (x, gate),
        lambda g: (g * gd[..., None], np.sum(g * xd, axis=-1)),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    c = xd.dtype.type(_GELU_C)
    k = xd.dtype.type(0.044715)
    u = c * (xd + k * xd * xd * xd)
    t = np.tanh(u)
    y = 0.5 * xd * (1.0 + t)

    def rule(g):
        du = c * (1.0 + 3.0 * k * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _node(y, (x,), rule)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,))


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each last-axis slice to unit Euclidean length."""
    xd = x.data
    n = np.sqrt(np.sum(xd * xd, axis=-1, keepdims=True) + xd.dtype.type(eps))
    y = xd / n
    return _node(y, (x,), lambda g: ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / n,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _node(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


# --------------------------------------------------------------------------
# linear algebra and layout


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must be identical."""
    if (
        a.ndim < 2
        or a.ndim != b.ndim
        or a.shape[:-2] != b.shape[:-2]
        or a.shape[-1] != b.shape[-2]
    ):
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _node(
        ad @ bd,
        (a, b),
        lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g),
    )


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape ``[..., d_in]`` and ``w`` of ``[d_in, d_out]``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    y = xd @ wd
    if b is not None:
        y = y + b.data

    def rule(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _node(y, parents, rule)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose: need at least 2 axes, got {x.shape}")
    return _node(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of the axes of {x.shape}")
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    src = x.shape
    return _node(out, (x,), lambda g: (g.reshape(src),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise ContractError("concat: nothing to concatenate")
    nd = xs[0].ndim
    ax = axis % nd
    for t in xs[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1 :] != xs[0].shape[:ax] + xs[0].shape[ax + 1 :]:
            raise ShapeError(f"concat: shape mismatch {xs[0].shape} vs {t.shape} on axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in xs])[:-1]
    return _node(
        np.concatenate([t.data for t in xs], axis=ax),
        tuple(xs),
        lambda g: tuple(np.split(g, bounds, axis=ax)),
    )


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    ax = axis % x.ndim
    if not 0 <= start < stop <= x.shape[ax]:
        raise ShapeError(f"slice: [{start}, {stop}) out of range for axis {axis} of {x.shape}")
    idx = (slice(None),) * ax + (slice(start, stop),)

    def rule(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _node(x.data[idx].copy(), (x,), rule)


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Cut ``x`` into consecutive pieces with the given extents along ``axis``."""
    ax = axis % x.ndim
    if any(s < 1 for s in sizes) or builtins.sum(sizes) != x.shape[ax]:
        raise ShapeError(f"split: sizes {list(sizes)} do not partition axis {axis} of {x.shape}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_axis(x, start, start + s, ax))
        start += s
    return out


def take(x: Tensor, indices) -> Tensor:
    """Gather entries of ``x`` along axis 0."""
    idx = np.asarray(indices, dtype=np.int64)
    xd = x.data

    def rule(g):
        full = np.zeros_like(xd)
        np.add.at(full, idx, g)
        return (full,)

    return _node(xd[idx], (x,), rule)


# --------------------------------------------------------------------------
# reductions


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    src = x.shape
    if axis is None:
        return _node(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, src).copy(),))
    ax = axis % x.ndim
    return _node(
        np.sum(x.data, axis=ax),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, ax), src).copy(),),
    )


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted."""
    z = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=-1, keepdims=True)
    return _node(y, (x,), lambda g: (y * (g - np.sum(g * y, axis=-1, keepdims=True)),))


softmax_lastdim = softmax


def log_softmax(x: Tensor) -> Tensor:
    m = np.max(x.data, axis=-1, keepdims=True)
    z = x.data - m
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _node(y, (x,), lambda g: (g - p * np.sum(g, axis=-1, keepdims=True),))


def logsumexp(x: Tensor) -> Tensor:
    """``log(sum(exp(x)))`` over the last axis."""
    m = np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    s = np.sum(e, axis=-1, keepdims=True)
    y = (np.log(s) + m)[..., 0]
    p = e / s
    return _node(y, (x,), lambda g: (g[..., None] * p,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match {x.shape}")
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    gd = gain.data
    axes = tuple(range(x.ndim - 1))

    def rule(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
        )
        return dx, np.sum(g * xhat, axis=axes), np.sum(g, axis=axes)

    return _node(xhat * gd + bias.data, (x, gain, bias), rule)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; the identity outside training or when ``p == 0``."""
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an explicit rng")
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - p)
    return _node(x.data * mask, (x,), lambda g: (g * mask,))


# --------------------------------------------------------------------------
# finite-difference checking


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Largest relative disagreement between backward and central differences.

    ``f`` maps a tensor to a scalar tensor. Runs in double precision.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    t = Tensor(x0.copy(), requires_grad=True)
    f(t).backward()
    analytic = t.grad if t.grad is not None else np.zeros_like(x0)
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(x0.copy())).item()
        flat[i] = orig - h
        fm = f(Tensor(x0.copy())).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
    return _rel_err(analytic, numeric)


def grad_check_params(
    f: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5
) -> dict[str, float]:
    """Check gradients of ``f()`` with respect to every tensor in ``params``.

    Parameters are perturbed in place and restored. Returns the largest
    relative error per parameter name.
    """
    for p in params.values():
        p.grad = None
        p.requires_grad = True
    f().backward()
    errors = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
        errors[name] = _rel_err(analytic, numeric)
    return errors
