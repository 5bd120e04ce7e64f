import os

import joblib
import numpy as np
import pandas as pd

from src.collectors.demo_collector import load_episode, select_episodes
from src.flowkit.flow import Flow
from src.models.fcrp import CHECKPOINT_KIND, FCrP, assemble_condition, config_dict, flow_queries
from src.models.sfcr import config_dict as sfcr_config_dict, load_sfcr
from src.models.sfcr_trainer import TrainingDiverged
from src.numcore.graph import NumcoreError, backward
from src.numcore.optim import Adam
from src.numcore.params import save_checkpoint
from src.pcgeom.cloud import PointCloud


class PolicyDataError(Exception):
    pass


def check_policy_episodes(demos):
    """La politique n'apprend que sur des démonstrations robot avec actions."""
    if not demos:
        raise PolicyDataError("aucune démonstration robot pour entraîner la politique")
    for demo in demos:
        if demo.embodiment != "robot":
            raise PolicyDataError(f"{demo.episode_id} : épisode {demo.embodiment} dans le split de la politique")
        if not demo.has_actions:
            raise PolicyDataError(f"{demo.episode_id} : actions ou proprioception manquantes")


class FlowProvider:
    """Flots conditionnants par frame : prédits (PF) ou oracle ; cache par (poids, requêtes, épisode)."""

    def __init__(self, config, sfcr=None, cache_dir=None):
        self.config = config
        self.model = None
        name = "oracle"
        if sfcr is not None:
            self.model = load_sfcr(sfcr) if isinstance(sfcr, str) else sfcr
            name = os.path.splitext(os.path.basename(sfcr))[0] if isinstance(sfcr, str) else "model"
        self.tag = f"{name}-{self.fingerprint()}"
        self.cache_dir = cache_dir
        self._memory = {}

    def fingerprint(self):
        """Empreinte des poids du modèle de flot et des champs qui choisissent les requêtes."""
        c = self.config
        queries = (c.flow_box_half, c.flow_spacing, c.max_flow, c.flow_horizon)
        weights = None
        if self.model is not None:
            store = self.model.store
            weights = (sfcr_config_dict(self.model.config), [(n, store.params[n].value) for n in sorted(store.names())])
        return joblib.hash((queries, weights))[:16]

    def _cache_path(self, demo):
        if not self.cache_dir:
            return None
        return os.path.join(self.cache_dir, self.tag, f"{demo.episode_id}.joblib")

    def _compute(self, demo):
        flows = []
        for f, frame in enumerate(demo.frames):
            idx = flow_queries(frame.cloud, frame.gripper, self.config)
            if len(idx) == 0:
                flows.append(None)
            elif self.model is not None:
                flow = self.model.predict_flow(frame.cloud, demo.task_id, frame.cloud.positions[idx], frame.mask)
                flow.state_index = f
                flows.append(flow)
            else:
                flows.append(Flow.from_points(demo.window_positions(f, self.config.flow_horizon)[idx], f))
        return flows

    def flows(self, demo):
        key = (self.tag, demo.episode_id)
        if key in self._memory:
            return self._memory[key]
        path = self._cache_path(demo)
        if path and os.path.exists(path):
            flows = joblib.load(path)
        else:
            flows = self._compute(demo)
            if path:
                os.makedirs(os.path.dirname(path), exist_ok=True)
                joblib.dump(flows, path)
        self._memory[key] = flows
        return flows


def _state(demo, index):
    frame = demo.frames[index]
    return frame.cloud, frame.mask, frame.gripper, frame.proprio


def action_chunk(demo, start, horizon):
    """Actions [start, start + H), complétées par une action de maintien."""
    actions = demo.actions()
    chunk = actions[start:start + horizon]
    if len(chunk) < horizon:
        hold = np.array([0.0, 0.0, 0.0, actions[-1, 3]])
        chunk = np.concatenate([chunk, np.tile(hold, (horizon - len(chunk), 1))])
    return chunk


def draw_mp(rng, p):
    return bool(rng.uniform() < p)


def make_sample(demo, flows, rng, config):
    """Un échantillon (condition, chunk, masqué?) : état de flot f, état courant t = f + préfixe."""
    n = demo.num_frames
    f = int(rng.integers(0, n))
    t = min(f + int(rng.integers(0, config.horizon)), n - 1)
    masked = draw_mp(rng, config.mp_for(demo.task_id))
    states = [_state(demo, i) for i in (f, max(t - 1, 0), t)]
    condition = assemble_condition(flows[f], demo.frames[f].gripper, states, t - f, config, f)
    if masked:
        for obs in condition.obs:
            obs.cloud = PointCloud.empty()
    return condition, action_chunk(demo, f, config.horizon), masked


def train_fcrp(manifest, sfcr_checkpoint, config, out_path=None, episodes=None, cache_dir=None):
    entries = episodes if episodes is not None else select_episodes(manifest, split="train", embodiment="robot")
    demos = [load_episode(manifest, e) for e in entries]
    check_policy_episodes(demos)
    if config.pf and config.use_flow and sfcr_checkpoint is None:
        raise PolicyDataError("l'entraînement PF demande un checkpoint du modèle de flot")
    sfcr = sfcr_checkpoint if (config.pf and config.use_flow) else None
    provider = FlowProvider(config, sfcr, cache_dir)
    print(
        f"🧠 Entraînement de la politique : {len(demos)} démos robot "
        f"(flot={'PF' if sfcr is not None else 'oracle'}, pc={config.pc}, mp={config.mp}, use_flow={config.use_flow})"
    )
    flows = {d.episode_id: provider.flows(d) for d in demos} if config.use_flow else {d.episode_id: [None] * d.num_frames for d in demos}

    model = FCrP(config)
    optimizer = Adam(model.store, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    history = []
    for step in range(1, config.steps + 1):
        conditions, chunks = [], []
        for pick in rng.integers(0, len(demos), size=config.batch_size):
            demo = demos[pick]
            condition, chunk, _ = make_sample(demo, flows[demo.episode_id], rng, config)
            conditions.append(condition)
            chunks.append(chunk)
        loss = model.loss(conditions, np.stack(chunks), rng)
        value = float(loss.value)
        if not np.isfinite(value):
            raise TrainingDiverged(f"perte non finie à l'étape {step} ({value})")
        backward(loss)
        try:
            optimizer.step()
        except NumcoreError as e:
            raise TrainingDiverged(f"étape {step} : {e}") from e
        history.append({"step": step, "loss": value})
        if step % config.log_every == 0 or step == 1:
            print(f"   étape {step}/{config.steps} - perte diffusion {value:.5f}")

    curve = pd.DataFrame(history, columns=["step", "loss"])
    if out_path:
        meta = {
            "episodes": [d.episode_id for d in demos],
            "flow_checkpoint": sfcr if isinstance(sfcr, str) else None,
            "final_loss": history[-1]["loss"] if history else None,
        }
        save_checkpoint(out_path, model.store, CHECKPOINT_KIND, config_dict(config), meta)
        curve.to_csv(os.path.splitext(out_path)[0] + "_loss.csv", index=False)
        print(f"💾 Politique sauvegardée : {out_path}")
    return model, curve
