import json
import os
from dataclasses import dataclass

from joblib import Parallel, delayed

from src.config import N_JOBS, format_mix, parse_tasks
from src.simbench.expert import scripted_expert
from src.simbench.storage import load_demonstration, save_demonstration
from src.simbench.world import HELDOUT_PICK_TASKS, SimError, make_task

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
HUMAN_SEED_BASE = 1000
EVAL_SEED_BASE = 2000
NOISE_SEED_STRIDE = 100000


@dataclass
class DatasetConfig:
    tasks: tuple = ("pick-0..3",)
    robot: int = 10
    human: int = 30
    fold: int = None
    n_eval: int = 0
    out: str = "data"
    n_jobs: int = N_JOBS
    seed: int = 0


def _generate(task_id, embodiment, seed, noise_seed, split, out_dir):
    scene = make_task(task_id, seed)
    demo = scripted_expert(scene, embodiment, noise_seed)
    rel = os.path.join("episodes", f"{demo.episode_id}.sfdm")
    save_demonstration(os.path.join(out_dir, rel), demo)
    return {
        "path": rel,
        "episode_id": demo.episode_id,
        "task_id": task_id,
        "embodiment": embodiment,
        "seed": int(seed),
        "noise_seed": int(noise_seed),
        "split": split,
        "frames": demo.num_frames,
        "success": bool(demo.success),
    }


class DemoCollector:
    """Génère les démonstrations expertes et écrit le manifeste du jeu de données."""

    def __init__(self, config):
        self.config = config
        self.tasks = parse_tasks(config.tasks)
        if config.fold is not None and f"pick-{config.fold}" not in self.tasks:
            raise SimError(f"fold {config.fold} : pick-{config.fold} absent des tâches {self.tasks}")

    def plan(self):
        """Liste des épisodes à générer : (tâche, incarnation, graine, graine de bruit, split)."""
        jobs = []
        held_out = f"pick-{self.config.fold}" if self.config.fold is not None else None
        noise = NOISE_SEED_STRIDE * self.config.seed
        for task in self.tasks:
            if task not in HELDOUT_PICK_TASKS:
                # Le fold retire les démos robot de la tâche du train : elles servent à l'évaluation
                split = "eval" if task == held_out else "train"
                jobs += [(task, "robot", i, noise + i, split) for i in range(self.config.robot)]
            jobs += [(task, "human", HUMAN_SEED_BASE + i, noise + i, "train") for i in range(self.config.human)]
            jobs += [(task, "robot", EVAL_SEED_BASE + i, noise + i, "eval") for i in range(self.config.n_eval)]
        return jobs

    def collect(self):
        out_dir = self.config.out
        os.makedirs(os.path.join(out_dir, "episodes"), exist_ok=True)
        jobs = self.plan()
        print(f"📂 Génération de {len(jobs)} démonstrations ({format_mix(self.config.robot, self.config.human)}) dans {out_dir}...")
        entries = Parallel(n_jobs=self.config.n_jobs)(
            delayed(_generate)(task, emb, seed, noise, split, out_dir) for task, emb, seed, noise, split in jobs
        )
        failed = [e["episode_id"] for e in entries if not e["success"]]
        if failed:
            print(f"⚠️ {len(failed)} démonstrations expertes sans succès : {failed[:5]}")

        manifest = {
            "version": MANIFEST_VERSION,
            "tasks": self.tasks,
            "robot": self.config.robot,
            "human": self.config.human,
            "fold": self.config.fold,
            "eval_only_tasks": [f"pick-{self.config.fold}"] if self.config.fold is not None else [],
            "episodes": entries,
        }
        path = os.path.join(out_dir, MANIFEST_NAME)
        with open(path, "w") as f:
            json.dump(manifest, f, indent=2)
        n_robot = sum(1 for e in entries if e["embodiment"] == "robot" and e["split"] == "train")
        n_human = sum(1 for e in entries if e["embodiment"] == "human")
        print(f"✅ Manifeste écrit : {path} ({n_robot} robot / {n_human} humain en entraînement)")
        return manifest


def build_dataset(config):
    manifest = DemoCollector(config).collect()
    manifest["root"] = os.path.abspath(config.out)
    return manifest


def load_manifest(data_dir):
    path = data_dir if data_dir.endswith(".json") else os.path.join(data_dir, MANIFEST_NAME)
    if not os.path.exists(path):
        raise SimError(f"manifeste introuvable : {path}")
    with open(path) as f:
        manifest = json.load(f)
    if manifest.get("version") != MANIFEST_VERSION:
        raise SimError(f"{path}: version de manifeste non supportée")
    manifest["root"] = os.path.dirname(os.path.abspath(path))
    return manifest


def select_episodes(manifest, split=None, embodiment=None, tasks=None):
    out = []
    for entry in manifest["episodes"]:
        if split is not None and entry["split"] != split:
            continue
        if embodiment is not None and entry["embodiment"] != embodiment:
            continue
        if tasks is not None and entry["task_id"] not in tasks:
            continue
        out.append(entry)
    return out


def load_episode(manifest, entry):
    return load_demonstration(os.path.join(manifest["root"], entry["path"]))
