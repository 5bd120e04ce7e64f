import os

import numpy as np
import pandas as pd

from src.collectors.demo_collector import load_episode, select_episodes
from src.flowkit.flow import Flow, trajectory_widths
from src.flowkit.metrics import displacement_errors
from src.flowkit.sampling import grid_query_indices, sample_query_batch
from src.models.sfcr import CHECKPOINT_KIND, SFCr, collate, config_dict, drop_effector_groups, group_cloud, load_sfcr
from src.numcore.graph import NumcoreError, backward
from src.numcore.optim import Adam
from src.numcore.params import save_checkpoint
from src.pcgeom.cloud import CropBox
from src.simbench.world import task_index

EVAL_COLUMNS = [
    "episode_id", "task_id", "embodiment", "mode", "ade", "fde", "n_queries",
    "ade_moving", "fde_moving", "n_moving", "baseline_ade", "baseline_fde", "fold",
]


ORACLE = "oracle"


class TrainingDiverged(Exception):
    pass


class FlowSampleSource:
    """Fenêtres (épisode, frame de départ) + cache des groupes FPS déterministes."""

    def __init__(self, demos, config):
        self.demos = demos
        self.config = config
        self.items = [(i, s) for i, d in enumerate(demos) for s in d.window_starts(config.window_stride)]
        if not self.items:
            raise ValueError("aucune fenêtre d'entraînement")
        self._groups = {}

    def groups(self, item, model):
        if item not in self._groups:
            i, s = item
            frame = self.demos[i].frames[s]
            cloud = model.prepare(frame.cloud, frame.mask)
            self._groups[item] = group_cloud(cloud, self.config.groups, self.config.group_size)
        return self._groups[item]

    def batch(self, rng, model, size):
        c = self.config
        token_sets, tasks, queries, targets = [], [], [], []
        for pick in rng.integers(0, len(self.items), size=size):
            item = self.items[pick]
            demo = self.demos[item[0]]
            token_sets.append(drop_effector_groups(self.groups(item, model), rng, True, c.drop_max))
            positions = demo.window_positions(item[1], c.horizon)
            qb = sample_query_batch(positions, c.n_queries, rng, c.eps_static, mode=c.target_mode)
            tasks.append(task_index(demo.task_id))
            queries.append(qb.queries)
            targets.append(qb.targets)
        return collate(token_sets, tasks, queries), np.stack(targets)


def train_sfcr(manifest, config, out_path=None, episodes=None):
    """Entraîne le modèle de flot sur les épisodes robot + humain du split train."""
    entries = episodes if episodes is not None else select_episodes(manifest, split="train")
    if not entries:
        raise ValueError("le manifeste ne contient aucun épisode d'entraînement")
    demos = [load_episode(manifest, e) for e in entries]
    n_robot = sum(1 for d in demos if d.embodiment == "robot")
    print(f"🧠 Entraînement du flot : {len(demos)} épisodes ({n_robot} robot), segmentation={'oui' if config.segmentation else 'non'}")

    model = SFCr(config)
    optimizer = Adam(model.store, lr=config.lr)
    source = FlowSampleSource(demos, config)
    rng = np.random.default_rng(config.seed)
    history = []
    for step in range(1, config.steps + 1):
        batch, targets = source.batch(rng, model, config.batch_size)
        loss = model.loss(batch, targets)
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
            print(f"   étape {step}/{config.steps} - perte L1 {value:.5f}")

    curve = pd.DataFrame(history, columns=["step", "loss"])
    if out_path:
        save_checkpoint(
            out_path, model.store, CHECKPOINT_KIND, config_dict(config),
            {"episodes": [e["episode_id"] for e in entries], "final_loss": history[-1]["loss"] if history else None},
        )
        curve.to_csv(os.path.splitext(out_path)[0] + "_loss.csv", index=False)
        print(f"💾 Modèle de flot sauvegardé : {out_path}")
    return model, curve


def _eval_queries(frame, mode, config, rng):
    if mode == "box":
        box = CropBox(frame.gripper, np.full(3, config.box_half))
        return grid_query_indices(frame.cloud, box, config.box_spacing)
    if mode == "random":
        n = len(frame.cloud)
        return np.sort(rng.choice(n, size=min(config.random_queries, n), replace=False))
    raise ValueError(f"mode d'évaluation inconnu : {mode}")


def evaluate_episode(demo, mode, config, predict, rng):
    """Erreurs (prédiction, référence statique) sur toutes les fenêtres d'un épisode."""
    errors, baseline, moving = [], [], []
    for start in demo.window_starts(config.window_stride):
        frame = demo.frames[start]
        idx = _eval_queries(frame, mode, config, rng)
        if len(idx) == 0:
            continue
        positions = demo.window_positions(start, config.horizon)[idx]
        truth = Flow.from_points(positions, start)
        pred = truth if predict == ORACLE else predict(frame, demo.task_id, truth.queries)
        static = Flow(truth.queries, np.zeros_like(truth.offsets), start)
        errors.append(displacement_errors(pred, truth))
        baseline.append(displacement_errors(static, truth))
        moving.append(trajectory_widths(positions) >= config.eps_static)
    if not errors:
        return None
    return np.concatenate(errors), np.concatenate(baseline), np.concatenate(moving)


def eval_sfcr(checkpoint, manifest, mode, split="eval", embodiment="robot", tasks=None, fold=None, predict=None):
    """ADE/FDE par épisode (CSV) ; `predict` remplace le modèle : fonction (frame, tâche, requêtes) -> Flow, ou ORACLE."""
    model = load_sfcr(checkpoint) if isinstance(checkpoint, str) else checkpoint
    config = model.config
    if predict is None:
        def predict(frame, task_id, queries):
            return model.predict_flow(frame.cloud, task_id, queries, frame.mask)

    rows = []
    for entry in select_episodes(manifest, split=split, embodiment=embodiment, tasks=tasks):
        demo = load_episode(manifest, entry)
        rng = np.random.default_rng([config.seed, entry["seed"], entry["noise_seed"]])
        result = evaluate_episode(demo, mode, config, predict, rng)
        if result is None:
            print(f"⚠️ {demo.episode_id} : aucune requête en mode {mode}, épisode ignoré")
            continue
        err, base, moving = result
        row = {
            "episode_id": demo.episode_id,
            "task_id": demo.task_id,
            "embodiment": demo.embodiment,
            "mode": mode,
            "ade": float(err.mean()),
            "fde": float(err[:, -1].mean()),
            "n_queries": int(len(err)),
            "ade_moving": float(err[moving].mean()) if moving.any() else np.nan,
            "fde_moving": float(err[moving][:, -1].mean()) if moving.any() else np.nan,
            "n_moving": int(moving.sum()),
            "baseline_ade": float(base.mean()),
            "baseline_fde": float(base[:, -1].mean()),
            "fold": fold,
        }
        rows.append(row)
    report = pd.DataFrame(rows, columns=EVAL_COLUMNS)
    if not report.empty:
        print(f"📊 Flot ({mode}) : ADE {report['ade'].mean():.4f} / FDE {report['fde'].mean():.4f} sur {len(report)} épisodes")
    return report
