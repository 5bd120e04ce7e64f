"""
Point d'entrée en ligne de commande.

    python main.py gen-data --tasks pick-0..3 --robot 10 --human 30 --out data/desk
    python main.py train-flow --data data/desk --config configs/sfcr.env --out ckpt/sfcr.joblib
    python main.py eval-flow --ckpt ckpt/sfcr.joblib --data data/desk --mode box --report flow.csv
    python main.py train-policy --data data/desk --flow-ckpt ckpt/sfcr.joblib --out ckpt/fcrp.joblib
    python main.py rollout --policy ckpt/fcrp.joblib --flow ckpt/sfcr.joblib --task pick-4 --episodes 20 --report rollout.csv
    python main.py run --preset configs/full.env
"""
import argparse
import os
import sys

from src.collectors.demo_collector import DatasetConfig, build_dataset, load_manifest, select_episodes
from src.config import N_JOBS, ConfigError, load_config, load_experiment, parse_tasks
from src.database import ResultsDB
from src.models.fcrp import FcrpConfig
from src.models.fcrp_trainer import PolicyDataError, train_fcrp
from src.models.sfcr import SfcrConfig
from src.models.sfcr_trainer import TrainingDiverged, eval_sfcr, train_sfcr
from src.numcore.graph import NumcoreError
from src.simbench.world import SimError
from src.simulation.experiment import run_experiment
from src.simulation.rollout import RolloutConfig, run_rollouts
from src.utils.report import ReportSchemaError, compare_reports, markdown_table, rows_from_rollouts, summary_markdown, write_frame, write_report

HANDLED_ERRORS = (
    ConfigError, SimError, PolicyDataError, TrainingDiverged, ReportSchemaError,
    NumcoreError, ValueError, FileNotFoundError,
)


def _ensure_parent(path):
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)


def fold_train_episodes(manifest, fold):
    """Épisodes d'entraînement du flot sans les démos robot de pick-K."""
    held_out = f"pick-{fold}"
    return [
        e for e in select_episodes(manifest, split="train")
        if not (e["embodiment"] == "robot" and e["task_id"] == held_out)
    ]


def cmd_gen_data(args):
    config = DatasetConfig(
        tasks=tuple(parse_tasks(args.tasks)), robot=args.robot, human=args.human, fold=args.fold,
        n_eval=args.n_eval, out=args.out, n_jobs=args.jobs, seed=args.seed,
    )
    build_dataset(config)
    return 0


def cmd_train_flow(args):
    manifest = load_manifest(args.data)
    overrides = {"seed": args.seed, "steps": args.steps}
    if args.no_seg:
        overrides["segmentation"] = False
    config = load_config(SfcrConfig, args.config, **overrides)
    episodes = fold_train_episodes(manifest, args.fold) if args.fold is not None else None
    train_sfcr(manifest, config, args.out, episodes)
    return 0


def cmd_eval_flow(args):
    manifest = load_manifest(args.data)
    tasks = [f"pick-{args.fold}"] if args.fold is not None else None
    report = eval_sfcr(args.ckpt, manifest, args.mode, split=args.split, embodiment=args.embodiment, tasks=tasks, fold=args.fold)
    if report.empty:
        print("⚠️ Aucun épisode évalué")
        return 1
    _ensure_parent(args.out)
    report.to_csv(args.out, index=False)
    print(f"💾 Rapport de flot : {args.out}")
    return 0


def cmd_train_policy(args):
    manifest = load_manifest(args.data)
    overrides = {"seed": args.seed, "steps": args.steps, "mp": args.mp}
    if args.no_pf:
        overrides["pf"] = False
    if args.no_pc:
        overrides["pc"] = False
    if args.no_flow:
        overrides["use_flow"] = False
    config = load_config(FcrpConfig, args.config, **overrides)
    flow_ckpt = args.flow_ckpt if config.use_flow else None
    cache_dir = os.path.join(manifest["root"], "pf_cache")
    train_fcrp(manifest, flow_ckpt, config, args.out, cache_dir=cache_dir)
    return 0


def cmd_rollout(args):
    overrides = {
        "seed": args.seed, "n_flow": args.n_flow, "next_window": args.next_window, "max_steps": args.max_steps,
    }
    if args.skip_rule:
        overrides["skip_rule"] = True
    if args.async_flow:
        overrides["async_flow"] = True
    config = load_config(RolloutConfig, args.config, **overrides)
    records = run_rollouts(args.policy, args.flow, parse_tasks(args.task), args.episodes, args.seed, config, args.jobs)
    _ensure_parent(args.out)
    records.to_csv(args.out, index=False)
    rate = records["success"].mean() if len(records) else 0.0
    print(f"📊 Réussite : {records['success'].sum()}/{len(records)} ({rate:.0%}) -> {args.out}")
    if args.experiment:
        rows = rows_from_rollouts(records, args.experiment, [args.seed], args.variant)
        name = os.path.splitext(os.path.basename(args.out))[0] + "_summary"
        write_report(rows, os.path.dirname(args.out) or ".", name, store=True, db_path=args.db)
    return 0


def cmd_report(args):
    frame = ResultsDB(args.db).fetch_rows(args.experiment)
    if frame.empty:
        print("⚠️ Aucune ligne de rapport en base")
        return 1
    name = args.experiment or "all"
    if args.out:
        write_frame(frame, args.out, name)
    else:
        print(summary_markdown(frame, name))
    failed = frame["metric"].str.startswith("failed:").any()
    return 1 if failed else 0


def cmd_compare(args):
    diff = compare_reports(args.a, args.b, args.variant_a, args.variant_b)
    print(markdown_table(diff))
    if args.out:
        _ensure_parent(args.out)
        diff.to_csv(args.out, index=False)
        print(f"💾 Écarts écrits : {args.out}")
    return 0


def cmd_run(args):
    overrides = {}
    if args.seed is not None:
        overrides["seeds"] = (args.seed,)
    if args.out:
        overrides["out_dir"] = args.out
    config = load_experiment(args.preset, **overrides)
    _, _, ok = run_experiment(config, n_jobs=args.jobs, store=not args.no_store, db_path=args.db)
    return 0 if ok else 1


def build_parser():
    parser = argparse.ArgumentParser(description="Flot de scène inter-incarnations + politique de diffusion (simulateur de table)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="Génère les démonstrations expertes")
    p.add_argument("--tasks", default="pick-0..3")
    p.add_argument("--robot", type=int, default=10)
    p.add_argument("--human", type=int, default=30)
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--n-eval", type=int, default=3)
    p.add_argument("--out", default="data/desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=N_JOBS)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-flow", help="Entraîne le modèle de flot")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--no-seg", action="store_true")
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_train_flow)

    p = sub.add_parser("eval-flow", help="ADE/FDE du modèle de flot")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["box", "random"], default="box")
    p.add_argument("--split", default="eval")
    p.add_argument("--embodiment", default="robot")
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--report", "--out", dest="out", default="flow_report.csv")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval_flow)

    p = sub.add_parser("train-policy", help="Entraîne la politique de diffusion")
    p.add_argument("--data", required=True)
    p.add_argument("--flow-ckpt", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--mp", type=float, default=None)
    p.add_argument("--no-pf", action="store_true")
    p.add_argument("--no-pc", action="store_true")
    p.add_argument("--no-flow", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_train_policy)

    p = sub.add_parser("rollout", help="Exécution en boucle fermée dans le simulateur")
    p.add_argument("--policy", required=True)
    p.add_argument("--flow", default=None)
    p.add_argument("--task", default="pick-4..6")
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--config", default=None)
    p.add_argument("--n-flow", type=int, default=None)
    p.add_argument("--next-window", type=int, default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--skip-rule", action="store_true")
    p.add_argument("--async-flow", action="store_true")
    p.add_argument("--experiment", default=None, help="Enregistre aussi les lignes agrégées en base sous ce nom")
    p.add_argument("--variant", default="full")
    p.add_argument("--db", default=None)
    p.add_argument("--report", "--out", dest="out", default="rollout.csv")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=N_JOBS)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("report", help="Tableaux agrégés depuis la base de résultats")
    p.add_argument("--experiment", default=None)
    p.add_argument("--db", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("compare", help="Écarts b - a entre deux rapports CSV")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--variant-a", default=None)
    p.add_argument("--variant-b", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("run", help="Expérience complète depuis un preset")
    p.add_argument("--preset", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--db", default=None)
    p.add_argument("--no-store", action="store_true")
    p.add_argument("--jobs", type=int, default=N_JOBS)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except HANDLED_ERRORS as e:
        print(f"❌ {args.command} : {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
