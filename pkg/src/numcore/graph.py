"""
Graphe de calcul différentiable (mode inverse) sur des tableaux numpy float64.

Chaque opération crée un `Node` qui garde sa valeur, ses entrées et une fonction
locale de rétro-propagation. `backward(loss)` parcourt les ancêtres dans l'ordre
topologique inverse et accumule les gradients.
"""
import itertools
import math

import numpy as np

_ids = itertools.count()


class NumcoreError(Exception):
    pass


class ShapeError(NumcoreError):
    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        formatted = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: formes incompatibles {formatted}")


class Node:
    __slots__ = ("id", "op", "inputs", "value", "grad", "trainable", "requires_grad", "name", "_backward", "argmax")

    def __init__(self, value, op="const", inputs=(), backward=None, trainable=False, name=None):
        self.id = next(_ids)
        self.op = op
        self.inputs = tuple(inputs)
        for parent in self.inputs:
            # Un noeud ne peut référencer que des noeuds plus anciens -> graphe acyclique
            if not isinstance(parent, Node) or parent.id >= self.id:
                raise NumcoreError(f"{op}: entrée invalide (graphe non acyclique)")
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.trainable = trainable
        self.requires_grad = trainable or any(p.requires_grad for p in self.inputs)
        self.name = name
        self._backward = backward
        self.argmax = None

    @property
    def shape(self):
        return self.value.shape

    def backward(self):
        backward(self)

    def __repr__(self):
        label = self.name or self.op
        return f"Node({label}, shape={self.shape})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def constant(value, name=None):
    return Node(value, op="const", name=name)


def variable(value, name=None):
    """Feuille entraînable hors ParamStore (tests, vérification de gradient)."""
    return Node(value, op="var", trainable=True, name=name)


def _as_node(x):
    return x if isinstance(x, Node) else constant(x)


def _unbroadcast(grad, shape):
    """Ramène un gradient diffusé à la forme d'origine de l'entrée."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --- Opérations élémentaires ---

def add(a, b):
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("add", a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return Node(a.value + b.value, "add", (a, b), _backward)


def sub(a, b):
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("sub", a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return Node(a.value - b.value, "sub", (a, b), _backward)


def mul(a, b):
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("mul", a, b)

    def _backward(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)
    return Node(a.value * b.value, "mul", (a, b), _backward)


def matmul(a, b):
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def _backward(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return Node(np.matmul(a.value, b.value), "matmul", (a, b), _backward)


def reshape(a, shape):
    a = _as_node(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None

    def _backward(g):
        return (g.reshape(a.shape),)
    return Node(out, "reshape", (a,), _backward)


def transpose(a, axes):
    a = _as_node(a)
    if len(axes) != a.value.ndim:
        raise ShapeError("transpose", a.shape, axes)
    inverse = np.argsort(axes)

    def _backward(g):
        return (np.transpose(g, inverse),)
    return Node(np.transpose(a.value, axes), "transpose", (a,), _backward)


def concat(nodes, axis=-1):
    nodes = [_as_node(n) for n in nodes]
    ndim = nodes[0].value.ndim
    axis_ = axis % ndim
    for n in nodes[1:]:
        same_rest = n.value.ndim == ndim and all(
            n.shape[i] == nodes[0].shape[i] for i in range(ndim) if i != axis_
        )
        if not same_rest:
            raise ShapeError("concat", nodes[0].shape, n.shape)
    sizes = [n.shape[axis_] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def _backward(g):
        return tuple(np.split(g, splits, axis=axis_))
    return Node(np.concatenate([n.value for n in nodes], axis=axis_), "concat", nodes, _backward)


def slice_(a, index):
    a = _as_node(a)
    try:
        out = a.value[index]
    except IndexError:
        raise ShapeError("slice", a.shape, np.shape(index)) from None

    def _backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        return (full,)
    return Node(out, "slice", (a,), _backward)


def gather(a, indices, axis=0):
    """Sélectionne des lignes le long d'un axe (indices 1-D, répétitions permises)."""
    a = _as_node(a)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 1 or (indices.size and (indices.max() >= a.shape[axis] or indices.min() < -a.shape[axis])):
        raise ShapeError("gather", a.shape, indices.shape)

    def _backward(g):
        full = np.zeros_like(a.value)
        np.add.at(np.moveaxis(full, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (full,)
    return Node(np.take(a.value, indices, axis=axis), "gather", (a,), _backward)


def embedding(table, indices):
    table = _as_node(table)
    indices = np.asarray(indices, dtype=np.int64)
    if table.value.ndim != 2 or (indices.size and (indices.max() >= table.shape[0] or indices.min() < 0)):
        raise ShapeError("embedding", table.shape, indices.shape)

    def _backward(g):
        full = np.zeros_like(table.value)
        np.add.at(full, indices, g)
        return (full,)
    return Node(table.value[indices], "embedding", (table,), _backward)


# --- Non-linéarités et normalisations ---

def relu(a):
    a = _as_node(a)

    def _backward(g):
        return (g * (a.value > 0),)
    return Node(np.maximum(a.value, 0.0), "relu", (a,), _backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    a = _as_node(a)
    x = a.value
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))

    def _backward(g):
        dt = (1.0 - t ** 2) * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)
    return Node(0.5 * x * (1.0 + t), "gelu", (a,), _backward)


def softmax(a):
    a = _as_node(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def _backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)
    return Node(s, "softmax", (a,), _backward)


def layer_norm(a, eps=1e-5):
    """Normalise le dernier axe (sans gain ni biais, voir layers.LayerNorm)."""
    a = _as_node(a)
    mu = a.value.mean(axis=-1, keepdims=True)
    centered = a.value - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    def _backward(g):
        g_mean = g.mean(axis=-1, keepdims=True)
        gx_mean = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv_std * (g - g_mean - xhat * gx_mean),)
    return Node(xhat, "layer_norm", (a,), _backward)


# --- Réductions ---

def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False):
    a = _as_node(a)
    axes = _normalize_axes(axis, a.value.ndim)

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)
    return Node(a.value.sum(axis=axes, keepdims=keepdims), "sum", (a,), _backward)


def mean(a, axis=None, keepdims=False):
    a = _as_node(a)
    axes = _normalize_axes(axis, a.value.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)
    return Node(a.value.mean(axis=axes, keepdims=keepdims), "mean", (a,), _backward)


def max_(a, axis=-1, keepdims=False):
    """Maximum le long d'un axe ; l'argmax (premier indice en cas d'égalité) est conservé."""
    a = _as_node(a)
    axis = axis % a.value.ndim
    idx = np.argmax(a.value, axis=axis)
    idx_k = np.expand_dims(idx, axis)
    out = np.take_along_axis(a.value, idx_k, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def _backward(g):
        full = np.zeros_like(a.value)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, idx_k, gk, axis=axis)
        return (full,)
    node = Node(out, "max", (a,), _backward)
    node.argmax = idx
    return node


def l1_distance(a, b):
    """Somme des |a - b| ; sous-gradient nul en 0."""
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("l1_distance", a, b)
    diff = a.value - b.value

    def _backward(g):
        s = np.sign(diff) * g
        return _unbroadcast(s, a.shape), _unbroadcast(-s, b.shape)
    return Node(np.abs(diff).sum(), "l1_distance", (a, b), _backward)


def l2_distance(a, b):
    """Somme des carrés (a - b)^2."""
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("l2_distance", a, b)
    diff = a.value - b.value

    def _backward(g):
        d = 2.0 * diff * g
        return _unbroadcast(d, a.shape), _unbroadcast(-d, b.shape)
    return Node((diff ** 2).sum(), "l2_distance", (a, b), _backward)


# --- Rétro-propagation ---

def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for parent in node.inputs:
            if parent.requires_grad and parent.id not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    if loss.value.size != 1:
        raise NumcoreError(f"backward: la perte doit être scalaire, forme {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    for node in order:
        node.grad = np.zeros_like(node.value)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node.inputs, grads):
            if parent.requires_grad and g is not None:
                parent.grad += g
