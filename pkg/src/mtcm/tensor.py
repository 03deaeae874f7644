"""Float64 arrays with a tape-based reverse-mode autodiff.

Operations are recorded only while a :class:`Graph` is active and at least one
input is tracked (a leaf with ``requires_grad`` or the output of an op recorded
on the same graph). Outside a graph everything is plain numpy evaluation.

Broadcasting is limited to leading dimensions: the shorter operand's shape
must be a suffix of the longer one. Anything else needs an explicit
:func:`reshape` or :func:`broadcast_to`.
"""
from __future__ import annotations

import numpy as np

_ACTIVE: list["Graph"] = []


class Graph:
    """Append-only record of operations, used as a context manager."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


class Node:
    __slots__ = ("graph", "inputs", "needs", "backward", "grad", "op")

    def __init__(self, graph, inputs, needs, backward, op):
        self.graph = graph
        self.inputs = inputs
        self.needs = needs
        self.backward = backward
        self.grad = None
        self.op = op


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self):
        tag = " tracked" if self.requires_grad or self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

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

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(t: Tensor, graph: Graph) -> bool:
    return t.requires_grad or (t.node is not None and t.node.graph is graph)


def _result(data, inputs, backward, op) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.node = None
    out.name = None
    if _ACTIVE:
        graph = _ACTIVE[-1]
        needs = tuple(_tracked(t, graph) for t in inputs)
        if any(needs):
            node = Node(graph, inputs, needs, backward, op)
            graph.nodes.append(node)
            out.node = node
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _check_suffix(a, b, what):
    sa, sb = a.shape, b.shape
    if sa == sb or a.data.size == 1 and a.ndim <= b.ndim or b.data.size == 1 and b.ndim <= a.ndim:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] != short:
        raise ValueError(f"{what}: shapes {sa} and {sb} differ beyond leading dimensions")


# ----------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a, b, "add")
    sa, sb = a.shape, b.shape

    def back(g, need):
        return (_unbroadcast(g, sa) if need[0] else None,
                _unbroadcast(g, sb) if need[1] else None)

    return _result(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a, b, "sub")
    sa, sb = a.shape, b.shape

    def back(g, need):
        return (_unbroadcast(g, sa) if need[0] else None,
                _unbroadcast(-g, sb) if need[1] else None)

    return _result(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a, b, "mul")
    ad, bd = a.data, b.data

    def back(g, need):
        return (_unbroadcast(g * bd, ad.shape) if need[0] else None,
                _unbroadcast(g * ad, bd.shape) if need[1] else None)

    return _result(ad * bd, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g, need):
        return (_unbroadcast(g / bd, ad.shape) if need[0] else None,
                _unbroadcast(-g * out / bd, bd.shape) if need[1] else None)

    return _result(out, (a, b), back, "div")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g, need: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _result(np.log(xd), (x,), lambda g, need: (g / xd,), "log")


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _result(xd * xd, (x,), lambda g, need: (2.0 * g * xd,), "square")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g, need: (g * mask,), "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return _result(out, (x,), lambda g, need: (g * out * (1.0 - out),), "sigmoid")


def softplus(x) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    x = as_tensor(x)
    xd = x.data
    out = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))
    return _result(out, (x,), lambda g, need: (g * _sigmoid(xd),), "softplus")


def _sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ------------------------------------------------------------------ reductions

def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def back(g, need):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), back, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


def softmax_axis(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g, need):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), back, "softmax")


def log_softmax_axis(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def back(g, need):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), back, "log_softmax")


def normalize_last(x, eps=1e-5) -> Tensor:
    """Zero mean, unit variance over the last axis.

    The standard deviation is floored at ``eps`` so constant slices map to zero
    while every other slice is normalized exactly.
    """
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    std = np.sqrt((xc * xc).mean(axis=-1, keepdims=True))
    floored = std < eps
    denom = np.where(floored, eps, std)
    out = xc / denom
    c = x.shape[-1]

    def back(g, need):
        gc = g - g.mean(axis=-1, keepdims=True)
        # floored slices: plain centering divided by a constant
        full = (gc - out * (g * out).sum(axis=-1, keepdims=True) / c) / denom
        return (np.where(floored, gc / denom, full),)

    return _result(out, (x,), back, "normalize")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    la, lb = a.shape[:-2], b.shape[:-2]
    short, long_ = (la, lb) if len(la) <= len(lb) else (lb, la)
    if long_[len(long_) - len(short):] != short:
        raise ValueError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g, need):
        ga = gb = None
        if need[0]:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if need[1]:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), back, "matmul")


# ------------------------------------------------------------------- structure

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g, need: (g.reshape(old),), "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,),
                   lambda g, need: (np.transpose(g, inv),), "transpose")


def swapaxes(x, a, b) -> Tensor:
    x = as_tensor(x)
    return _result(np.swapaxes(x.data, a, b), (x,),
                   lambda g, need: (np.swapaxes(g, a, b),), "swapaxes")


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _result(np.broadcast_to(x.data, shape).copy(), (x,),
                   lambda g, need: (_unbroadcast(g, old),), "broadcast_to")


def _is_advanced(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    advanced = _is_advanced(idx)

    def back(g, need):
        z = np.zeros(shape)
        if advanced:
            np.add.at(z, idx, g)
        else:
            z[idx] += g
        return (z,)

    return _result(x.data[idx], (x,), back, "getitem")


def concat(xs, axis=0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def back(g, need):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), back, "concat")


def stack(xs, axis=0) -> Tensor:
    xs = [as_tensor(x) for x in xs]

    def back(g, need):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _result(np.stack([x.data for x in xs], axis=axis), tuple(xs), back, "stack")


def pad_axis(x, axis, before, after) -> Tensor:
    """Zero-pad one axis."""
    x = as_tensor(x)
    axis = axis % x.ndim
    widths = [(0, 0)] * x.ndim
    widths[axis] = (before, after)
    n = x.shape[axis]

    def back(g, need):
        sl = [slice(None)] * g.ndim
        sl[axis] = slice(before, before + n)
        return (g[tuple(sl)],)

    return _result(np.pad(x.data, widths), (x,), back, "pad")


# -------------------------------------------------------------------- backward

def backward(graph: Graph, loss: Tensor) -> dict:
    """Gradients of a scalar ``loss`` with respect to every tracked leaf.

    Returns a dict keyed by leaf tensor. Leaves that did not influence the
    loss, and untracked leaves, are absent.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, list] = {}
    if loss.node is None or loss.node.graph is not graph:
        if loss.requires_grad:
            return {loss: np.ones_like(loss.data)}
        raise ValueError("loss was not recorded on this graph")
    for node in graph.nodes:
        node.grad = None
    loss.node.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        g = node.grad
        if g is None:
            continue
        node.grad = None
        for inp, need, gi in zip(node.inputs, node.needs, node.backward(g, node.needs)):
            if not need or gi is None:
                continue
            if inp.node is not None and inp.node.graph is graph:
                if inp.node.grad is None:
                    inp.node.grad = gi
                else:
                    inp.node.grad = inp.node.grad + gi
            elif inp.requires_grad:
                slot = grads.get(id(inp))
                if slot is None:
                    grads[id(inp)] = [inp, gi]
                else:
                    slot[1] = slot[1] + gi
    return {t: g for t, g in grads.values()}


def value_and_grad(f, params):
    """Evaluate ``f()`` on a fresh graph and return (loss value, grads list)."""
    with Graph() as g:
        loss = f()
    grads = backward(g, loss)
    return loss.item(), [grads.get(p) for p in params]


def finite_diff_check(f, x, h=1e-6, max_coords=None, rng=None) -> float:
    """Worst relative error between autodiff and central differences.

    ``x`` is an array, a Tensor, or a list of them; ``f`` receives Tensors of
    the same structure and returns a scalar Tensor. With ``max_coords`` only a
    random subset of coordinates is probed.
    """
    single = not isinstance(x, (list, tuple))
    xs = [np.array(as_tensor(v).data, dtype=np.float64) for v in ([x] if single else x)]

    def call(arrays, track):
        ts = [Tensor(a, requires_grad=track) for a in arrays]
        return ts, f(ts[0] if single else ts)

    with Graph() as g:
        leaves, loss = call(xs, True)
    got = backward(g, loss)
    analytic = [got.get(t, np.zeros_like(t.data)) for t in leaves]

    coords = [(i, j) for i, a in enumerate(xs) for j in range(a.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng if rng is not None else np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = 0.0
    for i, j in coords:
        flat = xs[i].reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        fp = call(xs, False)[1].item()
        flat[j] = orig - h
        fm = call(xs, False)[1].item()
        flat[j] = orig
        numeric = (fp - fm) / (2.0 * h)
        err = abs(analytic[i].reshape(-1)[j] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst


def finite_diff_params(loss_fn, params, h=1e-6, max_coords=None, rng=None) -> float:
    """Like :func:`finite_diff_check`, but for existing leaf tensors.

    ``loss_fn()`` builds a scalar from ``params`` (e.g. a model's weights),
    which are perturbed in place and restored afterwards.
    """
    params = list(params)
    with Graph() as g:
        loss = loss_fn()
    got = backward(g, loss)
    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng if rng is not None else np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]
    worst = 0.0
    for i, j in coords:
        p = params[i]
        flat = p.data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        fp = loss_fn().item()
        flat[j] = orig - h
        fm = loss_fn().item()
        flat[j] = orig
        numeric = (fp - fm) / (2.0 * h)
        analytic = got[p].reshape(-1)[j] if p in got else 0.0
        worst = max(worst, abs(analytic - numeric) / max(1.0, abs(numeric)))
    return worst
