"""
Politique de diffusion conditionnée par le flot et le nuage recadré.

Tout est exprimé dans le repère de la pince à l'état de flot s_f : la politique
ne voit aucune position absolue.
"""
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from src.flowkit.sampling import grid_query_indices, subsample_grid_order
from src.numcore import graph as G
from src.numcore.layers import MLP, Embedding, Linear
from src.numcore.params import ParamStore, load_checkpoint
from src.pcgeom.cloud import CropBox, PointCloud
from src.pcgeom.ops import crop, recenter, voxel_downsample

CHECKPOINT_KIND = "fcrp"


@dataclass
class FcrpConfig:
    horizon: int = 12
    diffusion_steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    reference_steps: int = 1000
    point_hidden: int = 64
    obs_feature: int = 64
    flow_hidden: int = 128
    flow_feature: int = 64
    max_flow: int = 64
    flow_horizon: int = 16
    prefix_dim: int = 16
    k_dim: int = 32
    hidden: int = 256
    n_blocks: int = 3
    crop_half: tuple = (0.15, 0.15, 0.15)
    voxel: float = 0.02
    flow_box_half: float = 0.15
    flow_spacing: float = 0.05
    action_cap: float = 0.03
    input_scale: float = 10.0
    mp: float = 0.5
    mp_off_tasks: tuple = ("slide-drawer",)
    pf: bool = True
    pc: bool = True
    use_flow: bool = True
    lr: float = 1e-3
    steps: int = 3000
    batch_size: int = 16
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        self.crop_half = tuple(float(x) for x in self.crop_half)
        self.mp_off_tasks = tuple(self.mp_off_tasks)
        if not 0.0 <= self.mp <= 1.0:
            raise ValueError(f"probabilité MP hors de [0, 1] : {self.mp}")

    def mp_for(self, task_id):
        return 0.0 if task_id in self.mp_off_tasks else self.mp


# --- Planning de diffusion ---

@dataclass(eq=False)
class DiffusionSchedule:
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ValueError("les betas doivent être dans ]0, 1[")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    @classmethod
    def linear(cls, steps, beta_start=1e-4, beta_end=2e-2, reference_steps=1000):
        """Betas linéaires d'une chaîne de `reference_steps` pas, remis à l'échelle pour `steps` pas."""
        scale = reference_steps / steps if reference_steps else 1.0
        return cls(np.minimum(np.linspace(beta_start, beta_end, steps) * scale, 0.999))

    @property
    def steps(self):
        return len(self.betas)

    def q_sample(self, x0, k, noise):
        """x_k sachant x_0 (k dans [1, K], éventuellement un tableau par exemple)."""
        ab = self.alpha_bars[np.asarray(k) - 1]
        ab = np.reshape(ab, np.shape(ab) + (1,) * (np.ndim(x0) - np.ndim(ab)))
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise

    def step(self, x, k, eps, rng):
        """Un pas ancestral x_k -> x_{k-1}."""
        alpha, ab, beta = self.alphas[k - 1], self.alpha_bars[k - 1], self.betas[k - 1]
        mean = (x - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(alpha)
        if k == 1:
            return mean
        var = (1.0 - self.alpha_bars[k - 2]) / (1.0 - ab) * beta
        return mean + math.sqrt(var) * rng.standard_normal(x.shape)


# --- Observations et condition ---

@dataclass(eq=False)
class StateObs:
    cloud: PointCloud       # recadré, centré sur la pince de cet état
    proprio: np.ndarray     # 3 x 3, centré sur la pince de s_f


@dataclass(eq=False)
class PolicyCondition:
    flow: object            # Flow centré sur s_f, ou None (variante sans flot)
    obs: list               # StateObs pour s_f, s_{t-1}, s_t
    executed_prefix: int
    flow_state: int = 0

    def same_as(self, other):
        if (self.flow is None) != (other.flow is None) or self.executed_prefix != other.executed_prefix:
            return False
        if self.flow is not None and not (
            np.array_equal(self.flow.queries, other.flow.queries) and np.array_equal(self.flow.offsets, other.flow.offsets)
        ):
            return False
        return all(
            np.array_equal(a.cloud.as_rows(), b.cloud.as_rows()) and np.array_equal(a.proprio, b.proprio)
            for a, b in zip(self.obs, other.obs)
        )


@dataclass(eq=False)
class ActionChunk:
    actions: np.ndarray     # H x 4 (delta xyz en mètres, commande doigts)
    executed_prefix: int
    next_window: int = 1
    flow_state: int = 0

    def __post_init__(self):
        h = len(self.actions)
        if not 0 <= self.executed_prefix < h:
            raise ValueError(f"préfixe exécuté {self.executed_prefix} hors de [0, {h})")
        self.next_window = max(1, min(self.next_window, h - self.executed_prefix))

    def pending(self):
        return self.actions[self.executed_prefix:self.executed_prefix + self.next_window]


def flow_queries(cloud, gripper, config):
    """Requêtes de flot : grille dans la boîte autour de la pince, au plus `max_flow`."""
    box = CropBox(gripper, np.full(3, config.flow_box_half))
    idx = grid_query_indices(cloud, box, config.flow_spacing)
    return idx[subsample_grid_order(len(idx), config.max_flow)]


def build_state_obs(cloud, mask, gripper, proprio, origin, config):
    """Recadrage autour de la pince de l'état, puis sous-échantillonnage dans ce repère."""
    flagged = PointCloud(cloud.positions, cloud.colors, np.asarray(mask, dtype=np.float64))
    local = crop(flagged, CropBox(gripper, config.crop_half))
    if len(local):
        local = voxel_downsample(local, config.voxel)
    return StateObs(local, recenter(proprio, origin))


def assemble_condition(flow, flow_gripper, states, executed_prefix, config, flow_state=0):
    """
    flow : Flow prédit à s_f (coordonnées monde) ; states : trois tuples
    (nuage, masque, pince, proprio) pour s_f, s_{t-1}, s_t.
    """
    origin = np.asarray(flow_gripper, dtype=np.float64)
    local_flow = None
    if config.use_flow and flow is not None:
        flow = flow.subset(subsample_grid_order(len(flow), config.max_flow))
        local_flow = flow.translated(-origin)
    obs = [build_state_obs(c, m, g, p, origin, config) for c, m, g, p in states]
    return PolicyCondition(local_flow, obs, int(executed_prefix), flow_state)


def normalize_actions(actions, cap):
    actions = np.asarray(actions, dtype=np.float64)
    out = actions.copy()
    out[..., :3] = actions[..., :3] / cap
    out[..., 3] = 2.0 * actions[..., 3] - 1.0
    return out


def denormalize_actions(values, cap):
    out = np.asarray(values, dtype=np.float64).copy()
    out[..., :3] = out[..., :3] * cap
    out[..., 3] = np.clip((out[..., 3] + 1.0) / 2.0, 0.0, 1.0)
    return out


def _pad_rows(rows_list, width):
    """Empile des ensembles de lignes de tailles variables ; le remplissage duplique la première ligne (neutre pour le max)."""
    rows_list = [r if len(r) else np.zeros((1, width)) for r in rows_list]
    n = max(len(r) for r in rows_list)
    out = np.empty((len(rows_list), n, width))
    for i, r in enumerate(rows_list):
        out[i, :len(r)] = r
        out[i, len(r):] = r[0]
    return out


def _sinusoidal(k, dim):
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = np.asarray(k, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class FiLMBlock:
    """Linear -> norme -> (1 + gamma) u + beta -> relu -> Linear, connexion résiduelle."""

    def __init__(self, store, name, hidden, cond_dim):
        self.fc1 = Linear(store, f"{name}.fc1", hidden, hidden)
        self.film = Linear(store, f"{name}.film", cond_dim, 2 * hidden)
        self.fc2 = Linear(store, f"{name}.fc2", hidden, hidden)
        self.hidden = hidden

    def __call__(self, h, cond=None):
        u = G.layer_norm(self.fc1(h))
        if cond is not None:
            gb = self.film(cond)
            gamma = G.slice_(gb, (slice(None), slice(0, self.hidden)))
            beta = G.slice_(gb, (slice(None), slice(self.hidden, None)))
            u = G.add(G.mul(G.add(gamma, 1.0), u), beta)
        return G.add(h, self.fc2(G.relu(u)))


class FCrP:
    def __init__(self, config=None, store=None):
        self.config = config or FcrpConfig()
        self.store = store if store is not None else ParamStore(self.config.seed)
        self.schedule = DiffusionSchedule.linear(
            self.config.diffusion_steps, self.config.beta_start, self.config.beta_end, self.config.reference_steps
        )
        c, s = self.config, self.store
        self.point_mlp = MLP(s, "dp3.point", [7, c.point_hidden, c.point_hidden], final_activation=True)
        self.obs_head = MLP(s, "dp3.head", [c.point_hidden + 9, c.obs_feature, c.obs_feature])
        self.traj_mlp = MLP(s, "flow.traj", [3 * c.flow_horizon, c.flow_hidden, c.flow_feature], final_activation=True)
        self.flow_head = Linear(s, "flow.head", c.flow_feature, c.flow_feature)
        self.prefix_embed = Embedding(s, "prefix", c.horizon, c.prefix_dim)
        self.k_mlp = MLP(s, "kemb", [c.k_dim, 2 * c.k_dim, c.k_dim], activation="gelu")
        self.cond_dim = c.flow_feature + 3 * c.obs_feature + c.prefix_dim + c.k_dim
        width = c.horizon * 4
        self.inp = Linear(s, "den.in", width, c.hidden)
        self.blocks = [FiLMBlock(s, f"den.block{i}", c.hidden, self.cond_dim) for i in range(c.n_blocks)]
        self.out = Linear(s, "den.out", c.hidden, width)

    # Encodeurs
    def _point_rows(self, obs):
        c = self.config
        rows = obs.cloud.as_rows() if (c.pc and len(obs.cloud)) else np.zeros((1, 7))
        rows = rows.copy()
        rows[:, :3] *= c.input_scale
        return rows

    def dp3_encode(self, obs_list, keep_node=False):
        """Encodeur ponctuel partagé + max sur les points ; proprio concaténée avant la tête."""
        scale = self.config.input_scale
        rows = _pad_rows([self._point_rows(o) for o in obs_list], 7)
        proprio = np.stack([np.asarray(o.proprio, dtype=np.float64).reshape(9) * scale for o in obs_list])
        pooled = G.max_(self.point_mlp(G.constant(rows)), axis=1)
        feature = self.obs_head(G.concat([pooled, G.constant(proprio)], axis=1))
        return (feature, pooled) if keep_node else feature

    def _flow_rows(self, flow):
        c = self.config
        width = 3 * c.flow_horizon
        if flow is None or not c.use_flow:
            return np.zeros((1, width))
        offsets = flow.offsets
        t = offsets.shape[1]
        if t + 1 != c.flow_horizon:
            raise ValueError(f"flot d'horizon {t + 1}, attendu {c.flow_horizon}")
        rows = np.concatenate([flow.queries, offsets.reshape(len(flow), -1)], axis=1)
        return rows * c.input_scale

    def flow_encode(self, flows):
        rows = _pad_rows([self._flow_rows(f) for f in flows], 3 * self.config.flow_horizon)
        pooled = G.max_(self.traj_mlp(G.constant(rows)), axis=1)
        return self.flow_head(pooled)

    def encode_context(self, conditions):
        """Partie de la condition indépendante de k (calculée une fois par échantillonnage)."""
        flow_feat = self.flow_encode([cond.flow for cond in conditions])
        obs_feats = [self.dp3_encode([cond.obs[i] for cond in conditions]) for i in range(3)]
        return G.concat([flow_feat] + obs_feats, axis=1)

    def denoise_step(self, noisy, k, context, executed_prefix):
        """Bruit prédit pour des chunks bruités (B x H x 4) au pas k."""
        c = self.config
        b = noisy.shape[0]
        k = np.broadcast_to(np.asarray(k, dtype=np.int64), (b,))
        if k.min() < 1 or k.max() > self.schedule.steps:
            raise ValueError(f"pas de diffusion hors de [1, {self.schedule.steps}]")
        prefix = self.prefix_embed(np.broadcast_to(np.asarray(executed_prefix, dtype=np.int64), (b,)))
        k_feat = self.k_mlp(G.constant(_sinusoidal(k, c.k_dim)))
        cond = None
        if context is not None:
            cond = G.concat([context, prefix, k_feat], axis=1)
        h = self.inp(G.reshape(noisy, (b, c.horizon * 4)))
        for block in self.blocks:
            h = block(h, cond)
        return G.reshape(self.out(h), (b, c.horizon, 4))

    def loss(self, conditions, chunks, rng):
        """Objectif epsilon : MSE entre bruit tiré et bruit prédit."""
        x0 = normalize_actions(chunks, self.config.action_cap)
        b = len(conditions)
        k = rng.integers(1, self.schedule.steps + 1, size=b)
        noise = rng.standard_normal(x0.shape)
        xk = self.schedule.q_sample(x0, k, noise)
        context = self.encode_context(conditions)
        prefix = np.array([cond.executed_prefix for cond in conditions])
        pred = self.denoise_step(xk, k, context, prefix)
        return G.mul(G.l2_distance(pred, G.constant(noise)), 1.0 / noise.size)

    def sample_actions(self, condition, rng, next_window=1):
        c = self.config
        context = self.encode_context([condition])
        x = rng.standard_normal((1, c.horizon, 4))
        for k in range(self.schedule.steps, 0, -1):
            eps = self.denoise_step(x, k, context, condition.executed_prefix).value
            x = self.schedule.step(x, k, eps, rng)
        actions = denormalize_actions(x[0], c.action_cap)
        return ActionChunk(actions, condition.executed_prefix, next_window, condition.flow_state)

    def referenced_points(self, condition):
        """Indices des points retenus par le max de l'encodeur ponctuel, pour chaque observation."""
        out = []
        for obs in condition.obs:
            _, pooled = self.dp3_encode([obs], keep_node=True)
            if not (self.config.pc and len(obs.cloud)):
                out.append(np.zeros(0, dtype=np.int64))
                continue
            out.append(np.unique(pooled.argmax[0]))
        return out


def dp3_encode(model, obs):
    return model.dp3_encode([obs]).value[0]


def flow_encode(model, flow):
    return model.flow_encode([flow]).value[0]


def denoise_step(model, noisy_actions, k, condition, executed_prefix=None):
    context = model.encode_context([condition]) if condition is not None else None
    if executed_prefix is None:
        executed_prefix = condition.executed_prefix if condition is not None else 0
    noisy = np.asarray(noisy_actions, dtype=np.float64).reshape(1, model.config.horizon, 4)
    return model.denoise_step(noisy, k, context, executed_prefix).value[0]


def sample_actions(model, condition, rng, next_window=1):
    return model.sample_actions(condition, rng, next_window)


def load_fcrp(path):
    payload = load_checkpoint(path, kind=CHECKPOINT_KIND)
    config = FcrpConfig(**payload["config"])
    store = ParamStore(config.seed)
    model = FCrP(config, store)
    store.load_state_dict(payload)
    return model


def config_dict(config):
    return asdict(config)
