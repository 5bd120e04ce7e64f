"""
Modèle de flot de scène inter-incarnations.

Entrée : nuage de points (tokens de groupes FPS + k-NN), token de tâche, tokens requêtes.
Sortie : pour chaque point requête, les décalages F_i - F_0 sur T-1 instants.
"""
from dataclasses import asdict, dataclass

import numpy as np

from src.flowkit.flow import TARGET_MODES, decode_flow_targets
from src.numcore import graph as G
from src.numcore.layers import MLP, Embedding, LayerNorm, Linear, TransformerBlock, key_mask
from src.numcore.params import ParamStore, load_checkpoint
from src.pcgeom.cloud import PointCloud
from src.pcgeom.ops import farthest_point_sample, group_points, voxel_downsample
from src.simbench.world import TASK_IDS, task_index

CHECKPOINT_KIND = "sfcr"


@dataclass
class SfcrConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    point_dim: int = 64
    groups: int = 32
    group_size: int = 16
    n_queries: int = 64
    horizon: int = 16
    drop_max: float = 0.5
    recolor: tuple = (1.0, 0.0, 1.0)
    voxel: float = 0.02
    segmentation: bool = True
    target_mode: str = "relative"
    eps_static: float = 0.02
    window_stride: int = 4
    lr: float = 1e-3
    steps: int = 2000
    batch_size: int = 4
    log_every: int = 100
    seed: int = 0
    box_half: float = 0.15
    box_spacing: float = 0.05
    random_queries: int = 64

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} n'est pas divisible par n_heads={self.n_heads}")
        if self.target_mode not in TARGET_MODES:
            raise ValueError(f"mode de cible inconnu : {self.target_mode}")
        self.recolor = tuple(float(c) for c in self.recolor)


@dataclass(eq=False)
class TokenSet:
    """Précurseur d'un TokenBatch pour un nuage : groupes + masque d'effecteur."""
    centers: np.ndarray        # G x 3
    features: np.ndarray       # G x k x 7
    effector_groups: np.ndarray
    keep: np.ndarray
    p_drop: float = 0.0

    @property
    def size(self):
        return len(self.centers)


@dataclass(eq=False)
class FlowBatch:
    features: np.ndarray       # B x G x k x 7
    centers: np.ndarray        # B x G x 3
    keep: np.ndarray           # B x G
    task_index: np.ndarray     # B
    queries: np.ndarray        # B x Q x 3


def preprocess_cross_embodiment(cloud, mask, rng=None, training=False, segmentation=True, recolor=(1.0, 0.0, 1.0)):
    """Recoloriage (1, 0, 1) + indicateur sur les points du robot / de la main."""
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if len(mask) != len(cloud):
        raise ValueError(f"masque de {len(mask)} points pour un nuage de {len(cloud)}")
    if not segmentation:
        return PointCloud(cloud.positions.copy(), cloud.colors.copy(), np.zeros(len(cloud)))
    colors = cloud.colors.copy()
    colors[mask] = np.asarray(recolor, dtype=np.float64)
    return PointCloud(cloud.positions.copy(), colors, mask.astype(np.float64))


def group_cloud(cloud, groups, group_size):
    if len(cloud) == 0:
        raise ValueError("nuage vide : rien à tokeniser")
    if len(cloud) < groups:
        print(f"⚠️ Nuage de {len(cloud)} points < {groups} groupes : G réduit à {len(cloud)}")
        groups = len(cloud)
    centers = farthest_point_sample(cloud, groups)
    return group_points(cloud, centers, group_size)


def drop_effector_groups(group_set, rng, training, drop_max=0.5, p_drop=None):
    effector = group_set.features[..., 6].mean(axis=1) > 0.5
    keep = np.ones(group_set.size, dtype=bool)
    p = 0.0
    if training:
        p = float(rng.uniform(0.0, drop_max)) if p_drop is None else float(p_drop)
        keep = ~(effector & (rng.uniform(size=group_set.size) < p))
    return TokenSet(group_set.centers, group_set.features, effector, keep, p)


def tokenize(cloud, rng, training, groups=32, group_size=16, drop_max=0.5, p_drop=None):
    """FPS -> groupes k-NN -> retrait aléatoire des groupes à majorité effecteur (entraînement seulement)."""
    return drop_effector_groups(group_cloud(cloud, groups, group_size), rng, training, drop_max, p_drop)


def collate(token_sets, task_indices, queries):
    """Empile des TokenSet ; G est tronqué au plus petit (le FPS est préfixe-consistant)."""
    g = min(t.size for t in token_sets)
    return FlowBatch(
        features=np.stack([t.features[:g] for t in token_sets]),
        centers=np.stack([t.centers[:g] for t in token_sets]),
        keep=np.stack([t.keep[:g] for t in token_sets]),
        task_index=np.asarray(task_indices, dtype=np.int64),
        queries=np.stack([np.asarray(q, dtype=np.float64) for q in queries]),
    )


class SFCr:
    def __init__(self, config=None, store=None):
        self.config = config or SfcrConfig()
        self.store = store if store is not None else ParamStore(self.config.seed)
        c = self.config
        d = c.d_model
        self.point_mlp = MLP(self.store, "group.point", [7, c.point_dim, d], final_activation=True)
        self.group_proj = Linear(self.store, "group.proj", d, d)
        # Un seul encodeur spatial pour les centres de groupes et les requêtes
        self.spatial = MLP(self.store, "spatial", [3, d, d], activation="gelu")
        self.task_embed = Embedding(self.store, "task", len(TASK_IDS), d)
        self.blocks = [TransformerBlock(self.store, f"block{i}", d, c.n_heads, c.d_ff) for i in range(c.n_layers)]
        self.ln_out = LayerNorm(self.store, "ln_out", d)
        self.head = MLP(self.store, "head", [d, c.d_ff, (c.horizon - 1) * 3], activation="gelu")

    def spatial_param_names(self):
        return [n for n in self.store.names() if n.startswith("spatial.")]

    def spatial_encode(self, points):
        return self.spatial(G.constant(np.asarray(points, dtype=np.float64).reshape(-1, 3))).value

    def forward(self, batch):
        c = self.config
        b, n_groups = batch.centers.shape[:2]
        n_queries = batch.queries.shape[1]
        pooled = G.max_(self.point_mlp(G.constant(batch.features)), axis=2)
        group_tokens = G.add(self.group_proj(pooled), self.spatial(G.constant(batch.centers)))
        task_token = G.reshape(self.task_embed(batch.task_index), (b, 1, c.d_model))
        query_tokens = self.spatial(G.constant(batch.queries))
        x = G.concat([group_tokens, task_token, query_tokens], axis=1)
        mask = None
        if not batch.keep.all():
            mask = key_mask(np.concatenate([batch.keep, np.ones((b, 1 + n_queries), dtype=bool)], axis=1))
        for block in self.blocks:
            x = block(x, mask)
        x = self.ln_out(x)
        out = self.head(G.slice_(x, (slice(None), slice(n_groups + 1, None))))
        return G.reshape(out, (b, n_queries, c.horizon - 1, 3))

    def loss(self, batch, targets):
        pred = self.forward(batch)
        return G.mul(G.l1_distance(pred, G.constant(targets)), 1.0 / pred.value.size)

    def prepare(self, cloud, mask=None):
        """Nuage brut -> nuage prétraité et sous-échantillonné (avant tokenisation)."""
        if mask is None:
            mask = np.zeros(len(cloud), dtype=bool)
        cloud = preprocess_cross_embodiment(cloud, mask, segmentation=self.config.segmentation, recolor=self.config.recolor)
        return voxel_downsample(cloud, self.config.voxel)

    def predict_flow(self, cloud, task_id, queries, mask=None, tokens=None):
        """Flot prédit (positions absolues) pour les requêtes, dans l'ordre donné par l'appelant."""
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if len(queries) == 0:
            raise ValueError("aucun point requête")
        if tokens is None:
            tokens = tokenize(self.prepare(cloud, mask), None, False, self.config.groups, self.config.group_size)
        # Ordre canonique des requêtes : sortie indépendante de l'ordre d'appel, bit à bit
        order = np.lexsort((queries[:, 2], queries[:, 1], queries[:, 0]))
        inverse = np.empty_like(order)
        inverse[order] = np.arange(len(order))
        batch = collate([tokens], [task_index(task_id)], [queries[order]])
        targets = self.forward(batch).value[0][inverse]
        return decode_flow_targets(queries, targets, self.config.target_mode)


def predict_flow(model, cloud, task_id, queries, mask=None):
    return model.predict_flow(cloud, task_id, queries, mask)


def load_sfcr(path):
    payload = load_checkpoint(path, kind=CHECKPOINT_KIND)
    config = SfcrConfig(**payload["config"])
    store = ParamStore(config.seed)
    model = SFCr(config, store)
    store.load_state_dict(payload)
    return model


def config_dict(config):
    return asdict(config)
