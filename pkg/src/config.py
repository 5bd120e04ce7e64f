"""
Réglages : variables d'environnement (.env) + fichiers de configuration KEY=value.
"""
import os
from dataclasses import MISSING, dataclass, fields, replace

from dotenv import dotenv_values, load_dotenv

from src.simbench.world import TASK_IDS

load_dotenv()

DATA_DIR = os.getenv("SFCRP_DATA_DIR", "data")
N_JOBS = int(os.getenv("SFCRP_N_JOBS", "1"))

_TRUE = {"1", "true", "yes", "on", "oui"}
_FALSE = {"0", "false", "no", "off", "non"}


class ConfigError(Exception):
    pass


def parse_tasks(text):
    """'pick-0..3,slide-drawer' -> ['pick-0', ..., 'pick-3', 'slide-drawer'] ; 'all' -> toutes."""
    if isinstance(text, (list, tuple)):
        text = ",".join(text)
    tasks = []
    for part in (p.strip() for p in str(text).split(",")):
        if not part:
            continue
        if part == "all":
            tasks.extend(TASK_IDS)
            continue
        if ".." in part:
            prefix, _, rest = part.rpartition("-")
            lo, _, hi = rest.partition("..")
            try:
                expanded = [f"{prefix}-{i}" for i in range(int(lo), int(hi) + 1)]
            except ValueError:
                raise ConfigError(f"intervalle de tâches invalide : {part}") from None
        else:
            expanded = [part]
        for task in expanded:
            if task not in TASK_IDS:
                raise ConfigError(f"tâche inconnue : {task}")
        tasks.extend(expanded)
    # Ordre conservé, doublons retirés
    return list(dict.fromkeys(tasks))


def parse_mix(text):
    """'R10+H30' -> (10, 30)."""
    robot, human = 0, 0
    for part in str(text).upper().replace(" ", "").split("+"):
        if not part:
            continue
        try:
            count = int(part[1:])
        except ValueError:
            raise ConfigError(f"mélange de données invalide : {text}") from None
        if part[0] == "R":
            robot = count
        elif part[0] == "H":
            human = count
        else:
            raise ConfigError(f"mélange de données invalide : {text}")
    return robot, human


def format_mix(robot, human):
    return f"R{robot}+H{human}"


def _coerce(key, raw, default):
    raw = str(raw).strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: booléen attendu, reçu '{raw}'")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if default and isinstance(default[0], (int, float)) and not isinstance(default[0], bool):
                kind = type(default[0])
                return tuple(kind(x) for x in items)
            return tuple(items)
        if default is None:
            if raw.lower() in ("", "none"):
                return None
            return int(raw) if raw.lstrip("-").isdigit() else raw
    except ValueError:
        raise ConfigError(f"{key}: valeur invalide '{raw}'") from None
    return raw


def _field_default(f):
    if f.default_factory is not MISSING:
        return f.default_factory()
    return f.default


def apply_overrides(config, values):
    """Nouvelle instance du dataclass `config` avec les clés (insensibles à la casse) remplacées."""
    by_name = {f.name.upper(): f for f in fields(config)}
    changes = {}
    for key, raw in values.items():
        f = by_name.get(key.upper())
        if f is None:
            raise ConfigError(f"clé de configuration inconnue : {key}")
        current = getattr(config, f.name)
        default = current if current is not None else _field_default(f)
        changes[f.name] = raw if not isinstance(raw, str) else _coerce(key, raw, default)
    return replace(config, **changes)


def read_config_file(path):
    if not os.path.exists(path):
        raise ConfigError(f"fichier de configuration introuvable : {path}")
    return {k: v for k, v in dotenv_values(path).items() if v is not None}


def load_config(cls, path=None, **overrides):
    config = cls()
    if path:
        config = apply_overrides(config, read_config_file(path))
    if overrides:
        config = apply_overrides(config, {k: v for k, v in overrides.items() if v is not None})
    return config


@dataclass
class ExperimentConfig:
    name: str = "full"
    tasks: tuple = ("pick-0..6", "slide-drawer")
    mixes: tuple = ("R10+H30",)
    folds: tuple = ("none",)
    seeds: tuple = (0,)
    n_eval: int = 3
    stages: tuple = ("flow", "policy", "rollout")
    flow_variants: tuple = ("full",)
    policy_variants: tuple = ("full",)
    rollout_tasks: tuple = ("pick-4..6",)
    episodes: int = 20
    eval_modes: tuple = ("box", "random")
    sfcr_config: str = "configs/sfcr.env"
    fcrp_config: str = "configs/fcrp.env"
    out_dir: str = "results"

    def task_list(self):
        return parse_tasks(self.tasks)

    def rollout_task_list(self):
        return parse_tasks(self.rollout_tasks)

    def mix_list(self):
        return [parse_mix(m) for m in self.mixes]

    def fold_list(self):
        out = []
        for fold in self.folds:
            text = str(fold).strip().lower()
            out.append(None if text in ("", "none") else int(text))
        return out or [None]

    def validate(self):
        if not self.seeds:
            raise ConfigError("au moins une graine est nécessaire")
        self.task_list()
        self.rollout_task_list()
        self.mix_list()
        for fold in self.fold_list():
            if fold is not None and not 0 <= fold <= 3:
                raise ConfigError(f"fold invalide : {fold} (attendu 0..3)")
        for stage in self.stages:
            if stage not in ("flow", "policy", "rollout"):
                raise ConfigError(f"étape inconnue : {stage}")
        return self


def load_experiment(path, **overrides):
    return load_config(ExperimentConfig, path, **overrides).validate()
