"""
Orchestration d'une expérience : données -> flot -> politique -> évaluation -> rapport.
"""
import os

from src.collectors.demo_collector import DatasetConfig, build_dataset
from src.config import N_JOBS, format_mix, load_config
from src.models.fcrp import FcrpConfig
from src.models.fcrp_trainer import train_fcrp
from src.models.sfcr import SfcrConfig
from src.models.sfcr_trainer import eval_sfcr, train_sfcr
from src.simulation.rollout import RolloutConfig, run_rollouts
from src.utils.report import failure_row, rows_from_flow_eval, rows_from_rollouts, write_report

# Variantes d'ablation de la politique -> surcharges de FcrpConfig
POLICY_VARIANTS = {
    "full": {},
    "no_flow": {"use_flow": False},
    "no_pc": {"pc": False},
    "no_pf_mp": {"pf": False, "mp": 0.0},
    "no_mp": {"mp": 0.0},
}
FLOW_VARIANTS = {
    "full": {},
    "no_seg": {"segmentation": False},
}


class StageFailed(Exception):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"{stage} : {cause}")


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as e:
        print(f"❌ Étape {name} en échec : {e}")
        raise StageFailed(name, e) from e


def run_experiment(config, n_jobs=None, store=True, db_path=None):
    """Renvoie (chemin CSV, chemin markdown, succès global)."""
    n_jobs = N_JOBS if n_jobs is None else n_jobs
    config.validate()
    root = os.path.join(config.out_dir, config.name)
    rows = []
    ok = True
    print(f"🚀 Expérience '{config.name}' : mix {list(config.mixes)}, folds {config.fold_list()}, graines {list(config.seeds)}")

    for seed in config.seeds:
        seeds = [seed]
        for robot, human in config.mix_list():
            mix = format_mix(robot, human)
            for fold in config.fold_list():
                tag = f"{mix}_fold{fold if fold is not None else '-'}_s{seed}"
                try:
                    rows += _run_combination(config, root, tag, seed, seeds, robot, human, mix, fold, n_jobs)
                except StageFailed as e:
                    ok = False
                    rows.append(failure_row(config.name, e.stage, seeds, mix=mix, fold=fold))

    csv_path, md_path = write_report(rows, root, "report", store=store, db_path=db_path)
    print(("✅" if ok else "⚠️") + f" Expérience '{config.name}' terminée")
    return csv_path, md_path, ok


def _run_combination(config, root, tag, seed, seeds, robot, human, mix, fold, n_jobs):
    rows = []
    data_dir = os.path.join(root, "data", tag)
    ckpt_dir = os.path.join(root, "checkpoints", tag)
    eval_dir = os.path.join(root, "evals", tag)
    os.makedirs(eval_dir, exist_ok=True)
    dataset = DatasetConfig(tuple(config.task_list()), robot, human, fold, config.n_eval, data_dir, n_jobs, seed)
    manifest = _stage("gen-data", build_dataset, dataset)

    # Le modèle de flot complet sert aussi à la politique (PF) et à l'exécution
    flow_variants = list(config.flow_variants) if "flow" in config.stages else []
    needs_policy = "policy" in config.stages
    if needs_policy and "full" not in flow_variants:
        flow_variants.append("full")
    flow_ckpts = {}
    for variant in flow_variants:
        sfcr_config = load_config(SfcrConfig, config.sfcr_config, seed=seed, **FLOW_VARIANTS[variant])
        ckpt = os.path.join(ckpt_dir, f"sfcr_{variant}.joblib")
        model, _ = _stage("train-flow", train_sfcr, manifest, sfcr_config, ckpt)
        flow_ckpts[variant] = ckpt
        if "flow" not in config.stages:
            continue
        for mode in config.eval_modes:
            report = _stage("eval-flow", eval_sfcr, model, manifest, mode, fold=fold)
            report.to_csv(os.path.join(eval_dir, f"flow_{variant}_{mode}.csv"), index=False)
            rows += rows_from_flow_eval(report, config.name, seeds, variant, mix, fold)

    if not needs_policy:
        return rows
    if robot == 0:
        print(f"⚠️ {mix} : aucune démo robot, politique ignorée")
        return rows
    for variant in config.policy_variants:
        fcrp_config = load_config(FcrpConfig, config.fcrp_config, seed=seed, **POLICY_VARIANTS[variant])
        ckpt = os.path.join(ckpt_dir, f"fcrp_{variant}.joblib")
        _stage(
            "train-policy", train_fcrp, manifest, flow_ckpts["full"], fcrp_config, ckpt,
            cache_dir=os.path.join(data_dir, "pf_cache"),
        )
        if "rollout" not in config.stages:
            continue
        flow_for_rollout = flow_ckpts["full"] if fcrp_config.use_flow else None
        records = _stage(
            "rollout", run_rollouts, ckpt, flow_for_rollout, config.rollout_task_list(), config.episodes,
            seed, RolloutConfig(seed=seed), n_jobs,
        )
        records.to_csv(os.path.join(eval_dir, f"rollout_{variant}.csv"), index=False)
        rows += rows_from_rollouts(records, config.name, seeds, variant, mix, fold)
    return rows
