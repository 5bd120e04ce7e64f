import os

import joblib
import numpy as np

from src.numcore.graph import Node, NumcoreError

CHECKPOINT_FORMAT = "numcore-ckpt/1"


class ParamStore:
    """Registre des paramètres nommés + état de l'optimiseur."""

    def __init__(self, seed=0):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self.params = {}
        # Moments Adam (persistés dans le checkpoint)
        self.m = {}
        self.v = {}
        self.t = 0

    def get(self, name, shape, init="xavier", scale=1.0):
        """Retourne le paramètre `name`, créé au premier appel."""
        if name in self.params:
            node = self.params[name]
            if node.shape != tuple(shape):
                raise NumcoreError(f"paramètre {name}: forme {node.shape} déjà enregistrée, demandé {tuple(shape)}")
            return node
        value = self._init_value(tuple(shape), init, scale)
        node = Node(value, op="param", trainable=True, name=name)
        self.params[name] = node
        return node

    def _init_value(self, shape, init, scale):
        if init == "zeros":
            return np.zeros(shape)
        if init == "ones":
            return np.ones(shape)
        if init == "normal":
            return self.rng.normal(0.0, scale, size=shape)
        if init == "xavier":
            fan_in = shape[0] if len(shape) > 1 else 1
            fan_out = shape[-1]
            limit = scale * np.sqrt(6.0 / (fan_in + fan_out))
            return self.rng.uniform(-limit, limit, size=shape)
        raise NumcoreError(f"initialisation inconnue : {init}")

    def names(self):
        return list(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self):
        for node in self.params.values():
            node.grad = None

    def num_values(self):
        return int(sum(node.value.size for node in self.params.values()))

    def state_dict(self):
        return {
            "seed": self.seed,
            "params": {name: node.value.copy() for name, node in self.params.items()},
            "moments": {
                "t": self.t,
                "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()},
            },
        }

    def load_state_dict(self, state):
        self.seed = int(state["seed"])
        self.rng = np.random.default_rng(self.seed)
        for name, value in state["params"].items():
            value = np.asarray(value, dtype=np.float64)
            if name in self.params:
                if self.params[name].shape != value.shape:
                    raise NumcoreError(f"paramètre {name}: forme {value.shape} incompatible avec {self.params[name].shape}")
                self.params[name].value = value.copy()
            else:
                self.params[name] = Node(value.copy(), op="param", trainable=True, name=name)
        moments = state.get("moments", {})
        self.t = int(moments.get("t", 0))
        self.m = {k: np.asarray(v, dtype=np.float64) for k, v in moments.get("m", {}).items()}
        self.v = {k: np.asarray(v, dtype=np.float64) for k, v in moments.get("v", {}).items()}


def save_checkpoint(path, store, kind, config=None, meta=None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "kind": kind,
        "config": dict(config or {}),
        "meta": dict(meta or {}),
    }
    payload.update(store.state_dict())
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    joblib.dump(payload, path)
    return path


def load_checkpoint(path, kind=None):
    payload = joblib.load(path)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise NumcoreError(f"{path}: format de checkpoint non reconnu")
    if kind is not None and payload.get("kind") != kind:
        raise NumcoreError(f"{path}: checkpoint de type {payload.get('kind')}, attendu {kind}")
    return payload
