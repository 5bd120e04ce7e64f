import numpy as np

from src.numcore.graph import NumcoreError


def adam_step(store, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """Un pas d'Adam sur tous les paramètres du store (moments conservés dans le store)."""
    beta1, beta2 = betas
    grads = {}
    for name, node in store.items():
        g = node.grad if node.grad is not None else np.zeros_like(node.value)
        if not np.all(np.isfinite(g)):
            raise NumcoreError(f"gradient non fini pour le paramètre {name}")
        grads[name] = g

    store.t += 1
    bias1 = 1.0 - beta1 ** store.t
    bias2 = 1.0 - beta2 ** store.t
    for name, node in store.items():
        g = grads[name]
        m = store.m.get(name)
        v = store.v.get(name)
        if m is None:
            m = np.zeros_like(node.value)
            v = np.zeros_like(node.value)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        store.m[name] = m
        store.v[name] = v
        update = lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
        new_value = node.value - update
        if not np.all(np.isfinite(new_value)):
            raise NumcoreError(f"paramètre {name} non fini après le pas d'optimisation")
        node.value = new_value


class Adam:
    def __init__(self, store, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.store = store
        self.lr = lr
        self.betas = betas
        self.eps = eps

    def step(self):
        adam_step(self.store, self.lr, self.betas, self.eps)
        self.store.zero_grad()
