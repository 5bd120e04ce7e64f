"""Couches réutilisables construites sur le graphe numcore."""
import math

import numpy as np

from src.numcore import graph as G

ACTIVATIONS = {"relu": G.relu, "gelu": G.gelu}


class Linear:
    def __init__(self, store, name, d_in, d_out, bias=True, init="xavier", scale=1.0):
        self.name = name
        self.w = store.get(f"{name}.w", (d_in, d_out), init=init, scale=scale)
        self.b = store.get(f"{name}.b", (d_out,), init="zeros") if bias else None

    def __call__(self, x):
        y = G.matmul(x, self.w)
        return G.add(y, self.b) if self.b is not None else y


class MLP:
    """Suite de Linear avec activation entre les couches (pas après la dernière)."""

    def __init__(self, store, name, dims, activation="relu", final_activation=False):
        self.layers = [Linear(store, f"{name}.{i}", d_in, d_out) for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:]))]
        self.act = ACTIVATIONS[activation]
        self.final_activation = final_activation

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.final_activation:
                x = self.act(x)
        return x


class LayerNorm:
    def __init__(self, store, name, dim):
        self.gain = store.get(f"{name}.gain", (dim,), init="ones")
        self.bias = store.get(f"{name}.bias", (dim,), init="zeros")

    def __call__(self, x):
        return G.add(G.mul(G.layer_norm(x), self.gain), self.bias)


class Embedding:
    def __init__(self, store, name, count, dim):
        self.table = store.get(f"{name}.table", (count, dim), init="normal", scale=0.02)

    def __call__(self, indices):
        return G.embedding(self.table, indices)


def key_mask(keep):
    """Masque additif (B, 1, 1, L) : 0 pour les tokens gardés, -1e9 sinon."""
    keep = np.asarray(keep, dtype=bool)
    return G.constant(np.where(keep, 0.0, -1e9)[:, None, None, :])


class SelfAttention:
    def __init__(self, store, name, d_model, n_heads):
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} n'est pas divisible par n_heads={n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = Linear(store, f"{name}.q", d_model, d_model)
        self.k = Linear(store, f"{name}.k", d_model, d_model)
        self.v = Linear(store, f"{name}.v", d_model, d_model)
        self.out = Linear(store, f"{name}.out", d_model, d_model)

    def _split(self, x, batch, length):
        x = G.reshape(x, (batch, length, self.n_heads, self.d_head))
        return G.transpose(x, (0, 2, 1, 3))

    def __call__(self, x, mask=None):
        batch, length, d_model = x.shape
        q = self._split(self.q(x), batch, length)
        k = self._split(self.k(x), batch, length)
        v = self._split(self.v(x), batch, length)
        scores = G.mul(G.matmul(q, G.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.d_head))
        if mask is not None:
            scores = G.add(scores, mask)
        attn = G.softmax(scores)
        ctx = G.transpose(G.matmul(attn, v), (0, 2, 1, 3))
        return self.out(G.reshape(ctx, (batch, length, d_model)))


class TransformerBlock:
    """Bloc pré-normalisé : attention complète puis feed-forward, connexions résiduelles."""

    def __init__(self, store, name, d_model, n_heads, d_ff):
        self.ln1 = LayerNorm(store, f"{name}.ln1", d_model)
        self.attn = SelfAttention(store, f"{name}.attn", d_model, n_heads)
        self.ln2 = LayerNorm(store, f"{name}.ln2", d_model)
        self.ff = MLP(store, f"{name}.ff", [d_model, d_ff, d_model], activation="gelu")

    def __call__(self, x, mask=None):
        x = G.add(x, self.attn(self.ln1(x), mask))
        return G.add(x, self.ff(self.ln2(x)))
