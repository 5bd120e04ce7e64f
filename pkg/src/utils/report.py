import hashlib
import math
import os
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from src.database import REPORT_COLUMNS, ResultsDB

FLOW_METRICS = ["ade", "fde", "ade_moving", "fde_moving", "baseline_ade", "baseline_fde"]


class ReportSchemaError(Exception):
    pass


@dataclass
class ReportRow:
    experiment: str
    task: str
    metric: str
    value: float
    n: int
    seed_hash: str
    variant: str = "full"
    mix: str = ""
    fold: object = None

    def __post_init__(self):
        self.value = float(self.value)
        if not math.isfinite(self.value):
            raise ReportSchemaError(f"valeur non finie pour {self.task}/{self.metric}")
        if int(self.n) <= 0:
            raise ReportSchemaError(f"effectif nul pour {self.task}/{self.metric}")
        self.n = int(self.n)


def seed_hash(seeds):
    text = ",".join(str(s) for s in sorted(int(s) for s in seeds))
    return hashlib.sha1(text.encode("utf-8")).hexdigest()[:10]


def failure_row(experiment, stage, seeds, variant="full", mix="", fold=None):
    return ReportRow(experiment, "-", f"failed:{stage}", 0.0, 1, seed_hash(seeds), variant, mix, fold)


def rows_from_rollouts(df, experiment, seeds, variant="full", mix="", fold=None):
    """Par tâche : taux de réussite, échecs après la première étape, analyse des reprises."""
    rows = []
    h = seed_hash(seeds)
    for task, group in df.groupby("task", sort=True):
        n = len(group)
        first_stage_only = ((group["stage_reached"] >= 1) & ~group["success"].astype(bool)).sum()
        metrics = {
            "success": group["success"].astype(float).mean(),
            "first_stage_only": first_stage_only / n,
            "stage1": (group["stage_reached"] >= 1).mean(),
            "safety_violation": group["safety_violation"].astype(float).mean(),
            "moved_to_training_slot": group["moved_to_training_slot"].astype(float).mean(),
            "flow_refreshes": group["flow_refreshes"].mean(),
            "fallback_events": group["fallback_events"].mean(),
        }
        if task == "slide-drawer":
            hooked = group["stage_reached"] >= 1
            metrics["hook_first_try"] = (hooked & group["first_try_hook"].astype(bool)).mean()
            metrics["hook_after_retry"] = (hooked & ~group["first_try_hook"].astype(bool)).mean()
        for metric, value in metrics.items():
            rows.append(ReportRow(experiment, task, metric, value, n, h, variant, mix, fold))
    return rows


def rows_from_flow_eval(df, experiment, seeds, variant="full", mix="", fold=None):
    """Par tâche et mode : ADE/FDE moyens (+ référence statique)."""
    rows = []
    h = seed_hash(seeds)
    for (mode, task), group in df.groupby(["mode", "task_id"], sort=True):
        for metric in FLOW_METRICS:
            values = group[metric].dropna()
            if values.empty:
                continue
            rows.append(ReportRow(experiment, task, f"{mode}_{metric}", values.mean(), len(values), h, variant, mix, fold))
    return rows


def rows_to_frame(rows):
    frame = pd.DataFrame([asdict(r) for r in rows], columns=REPORT_COLUMNS)
    frame["fold"] = frame["fold"].astype(str)
    return frame


def aggregate(frame):
    """Moyenne des valeurs et somme des effectifs par (expérience, variante, mix, tâche, métrique)."""
    keys = ["experiment", "variant", "mix", "task", "metric"]
    out = frame.groupby(keys, sort=True).agg(value=("value", "mean"), n=("n", "sum"), rows=("value", "size"))
    return out.reset_index()


def markdown_table(df, float_format="{:.4f}"):
    def fmt(v):
        if isinstance(v, (float, np.floating)):
            return float_format.format(v)
        return str(v)

    header = "| " + " | ".join(str(c) for c in df.columns) + " |"
    sep = "| " + " | ".join("---" for _ in df.columns) + " |"
    body = ["| " + " | ".join(fmt(v) for v in row) + " |" for row in df.itertuples(index=False)]
    return "\n".join([header, sep] + body)


def success_table(frame):
    """Réussites/n par tâche, échecs après la première étape entre parenthèses."""
    agg = aggregate(frame)
    success = agg[agg["metric"] == "success"]
    if success.empty:
        return None
    partial = agg[agg["metric"] == "first_stage_only"].set_index(["variant", "mix", "task"])["value"]
    cells = []
    for row in success.itertuples(index=False):
        k = round(partial.get((row.variant, row.mix, row.task), 0.0) * row.n)
        cells.append({
            "variant": row.variant, "mix": row.mix, "task": row.task,
            "cell": f"{round(row.value * row.n)}/{row.n} ({k})",
        })
    table = pd.DataFrame(cells).pivot(index=["variant", "mix"], columns="task", values="cell")
    return table.reset_index().fillna("-")


def flow_table(frame):
    agg = aggregate(frame)
    flow = agg[agg["metric"].str.contains("_ade|_fde")]
    if flow.empty:
        return None
    table = flow.pivot_table(index=["variant", "mix", "task"], columns="metric", values="value")
    return table.reset_index()


def summary_markdown(frame, name):
    lines = [f"# Rapport : {name}", ""]
    failed = frame[frame["metric"].str.startswith("failed:")]
    if not failed.empty:
        lines += ["**Étapes en échec** : " + ", ".join(sorted(set(failed["metric"]))), ""]
    table = success_table(frame)
    if table is not None:
        lines += ["## Réussite (réussites/n, échecs après la première étape entre parenthèses)", "", markdown_table(table), ""]
    table = flow_table(frame)
    if table is not None:
        lines += ["## Erreur de flot (ADE / FDE, mètres)", "", markdown_table(table), ""]
    return "\n".join(lines)


def write_frame(frame, out_dir, name):
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{name}.csv")
    md_path = os.path.join(out_dir, f"{name}.md")
    frame.to_csv(csv_path, index=False)
    with open(md_path, "w") as f:
        f.write(summary_markdown(frame, name))
    print(f"📊 Rapport écrit : {csv_path} / {md_path}")
    return csv_path, md_path


def write_report(rows, out_dir, name, store=False, db_path=None):
    paths = write_frame(rows_to_frame(rows), out_dir, name)
    if store:
        ResultsDB(db_path).insert_rows(rows)
    return paths


def load_report(path_or_frame):
    frame = pd.read_csv(path_or_frame) if isinstance(path_or_frame, str) else path_or_frame
    missing = [c for c in ("task", "metric", "value") if c not in frame.columns]
    if missing:
        raise ReportSchemaError(f"colonnes manquantes : {missing}")
    if "variant" not in frame.columns:
        frame = frame.assign(variant="full")
    return frame


def compare_reports(a, b, variant_a=None, variant_b=None):
    """Écarts b - a par (tâche, métrique) ; les deux rapports doivent couvrir les mêmes clés."""
    a, b = load_report(a), load_report(b)
    if variant_a is not None:
        a = a[a["variant"] == variant_a]
    if variant_b is not None:
        b = b[b["variant"] == variant_b]
    a = a[~a["metric"].str.startswith("failed:")].groupby(["task", "metric"])["value"].mean()
    b = b[~b["metric"].str.startswith("failed:")].groupby(["task", "metric"])["value"].mean()
    if a.empty or b.empty:
        raise ReportSchemaError("rapport vide après filtrage")
    if set(a.index) != set(b.index):
        only_a = sorted(set(a.index) - set(b.index))[:5]
        only_b = sorted(set(b.index) - set(a.index))[:5]
        raise ReportSchemaError(f"schémas différents : seulement dans a {only_a}, seulement dans b {only_b}")
    diff = pd.DataFrame({"a": a, "b": b.reindex(a.index)})
    diff["delta"] = diff["b"] - diff["a"]
    diff["sign"] = np.sign(diff["delta"]).astype(int)
    return diff.reset_index()
