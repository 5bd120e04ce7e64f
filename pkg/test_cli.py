import glob
import os

import pandas as pd
import pytest

from main import main
from src.config import ConfigError, ExperimentConfig, load_config, load_experiment, parse_mix, parse_tasks
from src.models.fcrp import FcrpConfig
from src.models.sfcr import SfcrConfig
from src.simulation.experiment import run_experiment

ROOT = os.path.dirname(os.path.abspath(__file__))
CONFIGS = os.path.join(ROOT, "configs")


def test_parse_tasks_and_mix():
    assert parse_tasks("pick-0..2,slide-drawer") == ["pick-0", "pick-1", "pick-2", "slide-drawer"]
    assert parse_tasks(("pick-1", "pick-0..1")) == ["pick-1", "pick-0"]
    assert len(parse_tasks("all")) == 9
    with pytest.raises(ConfigError):
        parse_tasks("pick-7")
    assert parse_mix("R10+H30") == (10, 30)
    assert parse_mix("H5") == (0, 5)
    with pytest.raises(ConfigError):
        parse_mix("X3")


def test_load_config_coerces_types(tmp_path):
    path = tmp_path / "model.env"
    path.write_text("SEGMENTATION=false\nRECOLOR=0.5,0,1\nSTEPS=5\nLR=0.01\n")
    config = load_config(SfcrConfig, str(path), seed=3)
    assert config.segmentation is False
    assert config.recolor == (0.5, 0.0, 1.0)
    assert config.steps == 5 and config.lr == 0.01 and config.seed == 3

    path.write_text("UNKNOWN_KEY=1\n")
    with pytest.raises(ConfigError):
        load_config(SfcrConfig, str(path))
    path.write_text("PC=peut-etre\n")
    with pytest.raises(ConfigError):
        load_config(FcrpConfig, str(path))
    with pytest.raises(ConfigError):
        load_config(FcrpConfig, str(tmp_path / "absent.env"))


def test_shipped_configs_are_valid():
    sfcr = load_config(SfcrConfig, os.path.join(CONFIGS, "sfcr.env"))
    fcrp = load_config(FcrpConfig, os.path.join(CONFIGS, "fcrp.env"))
    assert sfcr.horizon == fcrp.flow_horizon
    assert fcrp.mp_for("slide-drawer") == 0.0
    presets = sorted(glob.glob(os.path.join(CONFIGS, "*.env")))
    names = set()
    for path in presets:
        if os.path.basename(path) in ("sfcr.env", "fcrp.env"):
            continue
        names.add(load_experiment(path).name)
    assert names == {"full", "fewshot", "flowerr", "drawer"}
    flowerr = load_experiment(os.path.join(CONFIGS, "flowerr.env"))
    assert flowerr.fold_list() == [None, 0, 1, 2, 3]
    assert flowerr.mix_list() == [(10, 30), (0, 30)]


def test_experiment_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(seeds=()).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(folds=("5",)).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(stages=("deploy",)).validate()


def test_failed_stage_gives_partial_report(tmp_path):
    config = ExperimentConfig(
        name="broken", tasks=("pick-0",), mixes=("R0+H0",), stages=("flow",), n_eval=0,
        sfcr_config=os.path.join(CONFIGS, "sfcr.env"), out_dir=str(tmp_path / "results"),
    )
    csv_path, md_path, ok = run_experiment(config, n_jobs=1, db_path=str(tmp_path / "results.db"))
    assert not ok
    report = pd.read_csv(csv_path)
    assert "failed:train-flow" in set(report["metric"])
    with open(md_path) as f:
        assert "failed:train-flow" in f.read()


def test_cli_run_exits_non_zero_on_failure(tmp_path):
    preset = tmp_path / "broken.env"
    preset.write_text(
        "NAME=broken\nTASKS=pick-0\nMIXES=R0+H0\nSTAGES=flow\nN_EVAL=0\n"
        f"SFCR_CONFIG={os.path.join(CONFIGS, 'sfcr.env')}\n"
    )
    code = main(["run", "--preset", str(preset), "--out", str(tmp_path / "out"), "--db", str(tmp_path / "r.db")])
    assert code == 1
    assert main(["report", "--experiment", "broken", "--db", str(tmp_path / "r.db")]) == 1
    assert main(["run", "--preset", str(tmp_path / "absent.env")]) == 1


def test_cli_gen_data_and_compare(tmp_path):
    out = str(tmp_path / "data")
    assert main(["gen-data", "--tasks", "pick-0", "--robot", "1", "--human", "1", "--n-eval", "0", "--out", out, "--jobs", "1"]) == 0
    assert os.path.exists(os.path.join(out, "manifest.json"))

    a = tmp_path / "a.csv"
    pd.DataFrame({"task": ["pick-0"], "metric": ["success"], "value": [0.4]}).to_csv(a, index=False)
    b = tmp_path / "b.csv"
    pd.DataFrame({"task": ["pick-0"], "metric": ["success"], "value": [0.6]}).to_csv(b, index=False)
    diff_path = str(tmp_path / "diff.csv")
    assert main(["compare", str(a), str(b), "--out", diff_path]) == 0
    assert pd.read_csv(diff_path)["sign"].tolist() == [1]
    c = tmp_path / "c.csv"
    pd.DataFrame({"task": ["pick-1"], "metric": ["success"], "value": [0.6]}).to_csv(c, index=False)
    assert main(["compare", str(a), str(c)]) == 1
