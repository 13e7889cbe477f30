"""Small reverse-mode autodiff over float64 numpy arrays.

Every operation returns a :class:`Tensor` holding its parents and a closure
that pushes the output gradient back to them.  ``backward`` walks the graph
in reverse topological order so each node is visited exactly once.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "parents", "_backward", "requires_grad", "name")

    def __init__(self, data, parents=(), backward=None, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}{', grad' if self.requires_grad else ''})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node.parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def _matmul_grads(x, W, g):
    gx = gW = None
    if x.requires_grad:
        gx = _unbroadcast(g @ np.swapaxes(W.data, -1, -2), x.shape)
    if W.requires_grad:
        if W.data.ndim == 2:
            gW = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gW = _unbroadcast(np.swapaxes(x.data, -1, -2) @ g, W.shape)
    return gx, gW


def matmul(x, W) -> Tensor:
    """``x @ W`` with numpy broadcasting over leading dims.

    Supports ``(..., d) @ (d, k)`` and stacked weights ``(G, B, d) @ (G, d, k)``.
    """
    x, W = as_tensor(x), as_tensor(W)
    if x.data.ndim == 0 or W.data.ndim < 2 or x.shape[-1] != W.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {x.shape} @ {W.shape}")
    return Tensor(x.data @ W.data, (x, W), lambda g: _matmul_grads(x, W, g))


def graph_mix(A_hat, F) -> Tensor:
    """``A_hat @ F`` over the node axis of ``F`` (shape ``(..., n, d)``); ``A_hat`` is constant."""
    F = as_tensor(F)
    A = np.asarray(A_hat.data if isinstance(A_hat, Tensor) else A_hat, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or F.data.ndim < 2 or F.shape[-2] != A.shape[1]:
        raise ShapeError(f"graph_mix shape mismatch: A {A.shape}, F {F.shape}")
    return Tensor(np.matmul(A, F.data), (F,), lambda g: (np.matmul(A.T, g),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    y = np.maximum(x.data, 0.0)
    return Tensor(y, (x,), lambda g: (g * (y > 0),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return Tensor(y, (x,), lambda g: (g * (1.0 - y * y),))


def identity(x) -> Tensor:
    return as_tensor(x)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return Tensor(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return Tensor(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def gather(x, index, axis) -> Tensor:
    """``np.take(x, index, axis)``; repeated indices accumulate gradient."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    axis = axis % x.data.ndim

    def back(g):
        gx = np.zeros_like(x.data)
        gm = np.moveaxis(gx, axis, 0)
        gg = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        np.add.at(gm, idx, gg)
        return (gx,)

    return Tensor(np.take(x.data, idx, axis=axis), (x,), back)


def square(x) -> Tensor:
    x = as_tensor(x)
    return Tensor(x.data ** 2, (x,), lambda g: (2.0 * g * x.data,))


def sum_(x, axis=None) -> Tensor:
    x = as_tensor(x)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return Tensor(x.data.sum(axis=axis), (x,), back)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis), 1.0 / count)


def take_last(x, index) -> Tensor:
    """Pick ``x[..., index[...]]`` along the last axis (gather)."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    picked = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return Tensor(picked, (x,), back)


def masked_log_softmax(logits, mask) -> Tensor:
    """Row log-softmax over the last axis restricted to ``mask``; invalid entries give -inf-free 0 probability."""
    z = as_tensor(logits)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("every row needs at least one valid entry")
    shifted = np.where(mask, z.data, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    p = e / s
    out = np.where(mask, shifted - np.log(s), 0.0)

    def back(g):
        g = np.where(mask, g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return Tensor(out, (z,), back)


def masked_softmax(logits, mask) -> Tensor:
    lp = masked_log_softmax(logits, mask)
    mask = np.asarray(mask, dtype=bool)
    p = np.where(mask, np.exp(lp.data), 0.0)
    return Tensor(p, (lp,), lambda g: (g * p,))


# ---------------------------------------------------------------------------
# layers


def dense_forward(x, W, b=None, rectify: bool = False) -> Tensor:
    """``x W + b`` with ``b`` broadcast over rows; ``rectify`` fuses a relu."""
    x, W = as_tensor(x), as_tensor(W)
    if x.data.ndim == 0 or W.data.ndim < 2 or x.shape[-1] != W.shape[-2]:
        raise ShapeError(f"dense_forward: input {x.shape} incompatible with weights {W.shape}")
    y = x.data @ W.data
    parents = (x, W)
    if b is not None:
        b = as_tensor(b)
        if b.shape[-1] != W.shape[-1]:
            raise ShapeError(f"dense_forward: bias {b.shape} incompatible with weights {W.shape}")
        y += b.data
        parents = (x, W, b)
    if rectify:
        np.maximum(y, 0.0, out=y)

    def back(g):
        if rectify:
            g = g * (y > 0)
        grads = _matmul_grads(x, W, g)
        if b is not None:
            grads += (_unbroadcast(g, b.shape) if b.requires_grad else None,)
        return grads

    return Tensor(y, parents, back)


def gcn_layer(F, A_hat, W, activation=relu) -> Tensor:
    """One graph convolution ``activation(A_hat F W)``; ``A_hat`` is a constant."""
    F, W = as_tensor(F), as_tensor(W)
    if F.shape[-1] != W.shape[0]:
        raise ShapeError(f"gcn_layer: features {F.shape} incompatible with weights {W.shape}")
    mixed = graph_mix(A_hat, F)
    if activation is relu:
        return dense_forward(mixed, W, rectify=True)
    return activation(matmul(mixed, W))


def masked_row_argmax(Q, mask) -> np.ndarray:
    """Index of the best valid entry per row (lowest index on ties)."""
    Q = np.asarray(Q.data if isinstance(Q, Tensor) else Q, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    mask = np.broadcast_to(mask, Q.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("masked_row_argmax: a row has no valid entry")
    return np.argmax(np.where(mask, Q, -np.inf), axis=-1)


def glorot(rng, shape) -> np.ndarray:
    fan_in, fan_out = shape[-2], shape[-1]
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    def __init__(self, lr=1e-3):
        if not lr > 0:
            raise ValueError("learning_rate must be > 0")
        self.learning_rate = lr
        self.step_count = 0

    def update(self, key, w, g):
        return w - self.learning_rate * g


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if not lr > 0:
            raise ValueError("learning_rate must be > 0")
        self.learning_rate = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m: dict = {}
        self.v: dict = {}

    def update(self, key, w, g):
        m = self.m.get(key)
        if m is None:
            m = self.m[key] = np.zeros_like(w)
            self.v[key] = np.zeros_like(w)
        v = self.v[key]
        m *= self.beta1
        m += (1 - self.beta1) * g
        v *= self.beta2
        v += (1 - self.beta2) * g * g
        t = self.step_count
        mhat = m / (1 - self.beta1 ** t)
        vhat = v / (1 - self.beta2 ** t)
        return w - self.learning_rate * mhat / (np.sqrt(vhat) + self.eps)


def optimizer_step(params, grads, opt) -> dict:
    """Apply one update to ``params`` (name -> array) in place.

    Raises before touching anything if any gradient is non-finite.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        if g is not None and params[name].shape != np.shape(g):
            raise ShapeError(f"gradient shape {np.shape(g)} != parameter {params[name].shape} for {name}")
    opt.step_count += 1
    for name, g in grads.items():
        if g is None:
            continue
        params[name][...] = opt.update(name, params[name], g)
    return params


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    doc = {"schema_version": CHECKPOINT_VERSION, "meta": meta or {},
           "shapes": {k: list(v.shape) for k, v in params.items()}}
    arrays = {f"p::{k}": np.asarray(v) for k, v in params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(doc, sort_keys=True)), **arrays)


def load_checkpoint(path, expected_shapes: dict | None = None) -> tuple[dict, dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        doc = json.loads(str(z["__header__"]))
        if doc.get("schema_version") != CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint schema_version {doc.get('schema_version')} unsupported")
        params = {k[3:]: z[k].copy() for k in z.files if k.startswith("p::")}
    if expected_shapes is not None:
        if set(expected_shapes) != set(params):
            raise ShapeError(
                f"checkpoint parameters {sorted(params)} do not match model {sorted(expected_shapes)}"
            )
        for k, shape in expected_shapes.items():
            if tuple(params[k].shape) != tuple(shape):
                raise ShapeError(f"checkpoint {k}: shape {params[k].shape} != expected {tuple(shape)}")
    return params, doc["meta"]
