"""Reverse-mode automatic differentiation on numpy arrays, plus dense networks.

Graphs are built on the fly by the operators below and walked once by
:func:`backward`. Everything is float64.
"""
from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels

CHECKPOINT_FORMAT = "prusc.dense"
CHECKPOINT_VERSION = 1

_grad_enabled = True


class ShapeError(ValueError):
    pass


@contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    def __init__(self, data, parents: tuple = (), requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{', ' + self.name if self.name else ''})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None): return mean(self, axis)
    def relu(self): return relu(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _node(data, parents, backward_fn) -> Tensor:
    """Wrap an op result; attach the backward closure only if needed."""
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, parents if needs else (), requires_grad=needs)
    if needs:
        out.backward_fn = backward_fn
    return out


def _acc(t: Tensor, g: np.ndarray, fresh: bool = False):
    """Accumulate ``g`` into ``t.grad``; ``fresh`` arrays are adopted without a copy."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if fresh and g.dtype == np.float64 and g.shape == t.shape else np.array(g, dtype=np.float64)
    else:
        t.grad += g


# --- primitive ops ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = None

    def bw():
        _acc(a, _unbroadcast(out.grad, a.shape))
        _acc(b, _unbroadcast(out.grad, b.shape))

    out = _node(a.data + b.data, (a, b), bw)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = None

    def bw():
        _acc(a, _unbroadcast(out.grad, a.shape))
        _acc(b, _unbroadcast(-out.grad, b.shape))

    out = _node(a.data - b.data, (a, b), bw)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = None

    def bw():
        _acc(a, _unbroadcast(out.grad * b.data, a.shape))
        _acc(b, _unbroadcast(out.grad * a.data, b.shape))

    out = _node(a.data * b.data, (a, b), bw)
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = None

    def bw():
        _acc(a, _unbroadcast(out.grad / b.data, a.shape))
        _acc(b, _unbroadcast(-out.grad * a.data / b.data**2, b.shape))

    out = _node(a.data / b.data, (a, b), bw)
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = None

    def bw():
        _acc(a, -out.grad)

    out = _node(-a.data, (a,), bw)
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} are not conformable")
    out = None

    def bw():
        if a.requires_grad:
            _acc(a, out.grad @ b.data.T, fresh=True)
        if b.requires_grad:
            _acc(b, a.data.T @ out.grad, fresh=True)

    out = _node(a.data @ b.data, (a, b), bw)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = None

    def bw():
        _acc(a, out.grad * (a.data > 0))

    out = _node(np.maximum(a.data, 0.0), (a,), bw)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = None
    s = 1.0 / (1.0 + np.exp(-a.data))

    def bw():
        _acc(a, out.grad * s * (1.0 - s))

    out = _node(s, (a,), bw)
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = None
    e = np.exp(a.data)

    def bw():
        _acc(a, out.grad * e)

    out = _node(e, (a,), bw)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    out = None

    def bw():
        _acc(a, out.grad / a.data)

    out = _node(np.log(a.data), (a,), bw)
    return out


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = None

    def bw():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.shape))

    out = _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)
    return out


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis) / float(count)


def take(a, rows) -> Tensor:
    """Select rows (first axis) by integer index; repeated indices accumulate."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    out = None

    def bw():
        g = np.zeros_like(a.data)
        np.add.at(g, rows, out.grad)
        _acc(a, g)

    out = _node(a.data[rows], (a,), bw)
    return out


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = None

    def bw():
        for t, g in zip(tensors, np.split(out.grad, sizes, axis=axis)):
            _acc(t, g)

    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)
    return out


def logsumexp(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    out = None
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    val = (m + np.log(s)).squeeze(axis)

    def bw():
        _acc(a, np.expand_dims(out.grad, axis) * (e / s))

    out = _node(val, (a,), bw)
    return out


def stop_gradient(a) -> Tensor:
    """Identity forward, no gradient to ``a``."""
    a = as_tensor(a)
    return Tensor(a.data)


def l2_normalize(v, epsilon: float = 1e-12) -> Tensor:
    """Divide each row (or the vector) by ``max(norm, epsilon)``."""
    v = as_tensor(v)
    norm = np.sqrt((v.data**2).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, epsilon)
    y = v.data / denom
    live = norm >= epsilon
    out = None

    def bw():
        g = out.grad
        proj = (y * g).sum(axis=-1, keepdims=True)
        _acc(v, np.where(live, (g - y * proj) / denom, g / denom))

    out = _node(y, (v,), bw)
    return out


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-softmax of the true class, max-shifted."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    val = (lse - shifted[rows, labels]).mean()
    out = None

    def bw():
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        _acc(logits, p * (out.grad / n))

    out = _node(val, (logits,), bw)
    return out


def backward(loss: Tensor) -> dict:
    """Backpropagate from a scalar loss.

    Returns a map from every leaf tensor that requires grad to its gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order, seen = [], set()
    stack = [(loss, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    leaves = {}
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn()
        elif not node.parents and node.requires_grad:
            leaves[node] = node.grad
    return leaves


# --- networks ---------------------------------------------------------------

ACTIVATIONS = ("relu", "identity")


@dataclass
class Layer:
    weight: Tensor  # (fan_in, fan_out)
    bias: Tensor
    activation: str = "relu"
    # fixed binary mask for finalized subnetworks; None means dense
    mask: np.ndarray | None = None

    @property
    def shape(self):
        return self.weight.shape


class DenseNetwork:
    def __init__(self, layers: list[Layer], embedding_index: int | None = None):
        if not layers:
            raise ShapeError("network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.shape[1] != nxt.shape[0]:
                raise ShapeError(f"layer shapes {prev.shape} -> {nxt.shape} are not conformable")
        for layer in layers:
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
        if embedding_index is None:
            embedding_index = max(len(layers) - 2, 0)
        if len(layers) > 1 and not 0 <= embedding_index < len(layers) - 1:
            raise ValueError("embedding layer must precede the classifier layer")
        self.layers = layers
        self.embedding_index = embedding_index

    @classmethod
    def init(cls, sizes, seed: int = 0) -> "DenseNetwork":
        """He-initialised ReLU MLP; ``sizes`` = [d_in, hidden..., n_classes]."""
        rng = np.random.default_rng(seed)
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
            last = i == len(sizes) - 2
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            layers.append(Layer(Tensor(w, requires_grad=True), Tensor(np.zeros(fan_out), requires_grad=True),
                                "identity" if last else "relu"))
        return cls(layers)

    @property
    def sizes(self):
        return [self.layers[0].shape[0]] + [l.shape[1] for l in self.layers]

    def parameters(self) -> list[Tensor]:
        return [t for l in self.layers for t in (l.weight, l.bias)]

    def effective_weights(self) -> list[np.ndarray]:
        return [l.weight.data if l.mask is None else l.weight.data * l.mask for l in self.layers]

    def copy(self) -> "DenseNetwork":
        layers = [Layer(Tensor(l.weight.data.copy(), requires_grad=True),
                        Tensor(l.bias.data.copy(), requires_grad=True), l.activation,
                        None if l.mask is None else l.mask.copy()) for l in self.layers]
        return DenseNetwork(layers, self.embedding_index)

    def to_dict(self) -> dict:
        doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
               "embedding_index": self.embedding_index, "layers": []}
        for l in self.layers:
            entry = {"shape": list(l.shape), "activation": l.activation,
                     "weight": l.weight.data.ravel().tolist(), "bias": l.bias.data.tolist()}
            if l.mask is not None:
                entry["mask"] = l.mask.astype(np.int8).ravel().tolist()
            doc["layers"].append(entry)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "DenseNetwork":
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a dense network checkpoint")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
        layers = []
        for e in doc["layers"]:
            shape = tuple(e["shape"])
            mask = None if "mask" not in e else np.asarray(e["mask"], dtype=np.float64).reshape(shape)
            layers.append(Layer(Tensor(np.asarray(e["weight"]).reshape(shape), requires_grad=True),
                                Tensor(np.asarray(e["bias"]), requires_grad=True), e["activation"], mask))
        return cls(layers, doc["embedding_index"])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "DenseNetwork":
        return cls.from_dict(json.loads(Path(path).read_text()))


def forward(net: DenseNetwork, x, weights: list | None = None, frozen: bool = False):
    """Run the network; returns ``(logits, embedding)``.

    ``weights`` optionally overrides the effective weight of each layer (used
    by masked forwards). Layers carrying a fixed ``mask`` multiply it in, so
    pruned entries get zero gradient. With ``frozen`` the stored parameters
    enter the graph as constants.
    """
    h = as_tensor(x)
    if h.data.ndim != 2 or h.shape[1] != net.layers[0].shape[0]:
        raise ShapeError(f"input shape {h.shape} does not match input dimension {net.layers[0].shape[0]}")
    embedding = None
    for i, layer in enumerate(net.layers):
        if weights is not None and weights[i] is not None:
            w = weights[i]
        else:
            w = Tensor(layer.weight.data) if frozen else layer.weight
            if layer.mask is not None:
                w = w * layer.mask
        h = matmul(h, w) + (Tensor(layer.bias.data) if frozen else layer.bias)
        if layer.activation == "relu":
            h = relu(h)
        if i == net.embedding_index:
            embedding = h
    return h, embedding


def predict_logits(net: DenseNetwork, X: np.ndarray, batch: int = 4096) -> np.ndarray:
    with no_grad():
        return np.concatenate([forward(net, X[i:i + batch])[0].data
                               for i in range(0, max(len(X), 1), batch)]) if len(X) else np.zeros((0, net.sizes[-1]))


def predict(net: DenseNetwork, X: np.ndarray) -> np.ndarray:
    return predict_logits(net, X).argmax(axis=1)


def embed(net: DenseNetwork, X: np.ndarray, batch: int = 4096) -> np.ndarray:
    with no_grad():
        return np.concatenate([forward(net, X[i:i + batch])[1].data for i in range(0, len(X), batch)])


# --- optimisation -----------------------------------------------------------


def _contiguous(a: np.ndarray) -> np.ndarray:
    # fused updates write through a flat view, which needs contiguous storage
    if not a.flags.c_contiguous or a.dtype != np.float64:
        raise ValueError("parameters must be C-contiguous float64 arrays")
    return a


class SGD:
    """SGD with momentum and L2 weight decay.

    v <- momentum * v + grad + weight_decay * param;  param <- param - lr * v
    """

    def __init__(self, params: list[Tensor], lr: float = 1e-3, momentum: float = 0.9, weight_decay: float = 1e-2):
        if lr <= 0 or not 0 <= momentum < 1 or weight_decay < 0:
            raise ValueError("invalid optimizer hyperparameters")
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                kernels._sgd_update_np(p.data, v, 0.0, self.lr, self.momentum, self.weight_decay)
            else:
                kernels.sgd_update(_contiguous(p.data), v, np.ascontiguousarray(p.grad, dtype=np.float64),
                                   self.lr, self.momentum, self.weight_decay)


class Adam:
    """Adam without weight decay; used for mask logits."""

    def __init__(self, params: list[Tensor], lr: float = 1e-2, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            kernels.adam_update(_contiguous(p.data), m, v, np.ascontiguousarray(p.grad, dtype=np.float64),
                                self.lr, b1, b2, c1, c2, self.eps)
