import os

import numpy as np
import pandas as pd
import pytest

from src.collectors.demo_collector import DatasetConfig, build_dataset, load_episode, load_manifest, select_episodes
from src.flowkit.flow import Flow, is_static
from src.flowkit.sampling import grid_query_indices
from src.models.sfcr import (
    SFCr, SfcrConfig, TokenSet, collate, drop_effector_groups, group_cloud, load_sfcr,
    preprocess_cross_embodiment, tokenize,
)
from src.models.sfcr_trainer import EVAL_COLUMNS, ORACLE, FlowSampleSource, eval_sfcr, train_sfcr
from src.numcore import graph as G
from src.pcgeom.cloud import CropBox
from src.simbench import world as W
from src.simbench.expert import scripted_expert
from src.simbench.storage import Demonstration, save_demonstration


def small_config(**kw):
    base = dict(
        d_model=16, n_layers=1, n_heads=2, d_ff=32, point_dim=16, groups=8, group_size=8,
        n_queries=8, horizon=4, steps=3, batch_size=2, log_every=1, window_stride=8,
    )
    base.update(kw)
    return SfcrConfig(**base)


def scene_frame(task_id="pick-0", seed=0):
    state = W.initial_state(W.make_task(task_id, seed))
    cloud, mask = W.render(state, W.ROBOT)
    return cloud, mask, state


def test_spatial_encoder_is_shared():
    model = SFCr(small_config())
    names = model.store.names()
    spatial = model.spatial_param_names()
    assert spatial and all(n.startswith("spatial.") for n in spatial)
    assert not any("query" in n for n in names)

    demo = scripted_expert(W.make_task("pick-0", 0), "robot", 0)
    source = FlowSampleSource([demo], model.config)
    batch, targets = source.batch(np.random.default_rng(0), model, 2)
    G.backward(model.loss(batch, targets))
    # Le même encodeur reçoit le gradient des centres de groupes et des requêtes
    for name in spatial:
        assert np.any(model.store.params[name].grad != 0)
    point = batch.queries[0, :1]
    assert np.array_equal(model.spatial_encode(point), model.spatial(G.constant(point)).value)


def test_query_permutation_equivariance_is_bit_exact():
    model = SFCr(small_config())
    cloud, mask, _ = scene_frame("pick-2", 1)
    rng = np.random.default_rng(1)
    queries = cloud.positions[rng.choice(len(cloud), size=12, replace=False)]
    perm = rng.permutation(12)
    pred = model.predict_flow(cloud, "pick-2", queries, mask)
    pred_perm = model.predict_flow(cloud, "pick-2", queries[perm], mask)
    assert np.array_equal(pred_perm.offsets, pred.offsets[perm])
    assert np.array_equal(pred_perm.queries, queries[perm])


def test_eval_mode_is_deterministic():
    model = SFCr(small_config())
    cloud, mask, _ = scene_frame("slide-drawer", 0)
    queries = cloud.positions[:5]
    a = model.predict_flow(cloud, "slide-drawer", queries, mask)
    b = model.predict_flow(cloud, "slide-drawer", queries, mask)
    assert np.array_equal(a.offsets, b.offsets)
    assert a.horizon == model.config.horizon
    with pytest.raises(ValueError):
        model.predict_flow(cloud, "slide-drawer", np.zeros((0, 3)), mask)


def test_every_parameter_receives_gradient():
    model = SFCr(small_config())
    demos = [scripted_expert(W.make_task("pick-1", 0), emb, 0) for emb in ("robot", "human")]
    source = FlowSampleSource(demos, model.config)
    batch, targets = source.batch(np.random.default_rng(2), model, 2)
    G.backward(model.loss(batch, targets))
    dead = [
        name for name, node in model.store.items()
        # Le biais des clés décale tous les scores d'une même requête : sans effet sur le softmax
        if not name.endswith(".k.b") and (node.grad is None or not np.any(np.abs(node.grad) > 1e-12))
    ]
    assert dead == []


def test_preprocess_recolors_effector():
    cloud, mask, _ = scene_frame()
    out = preprocess_cross_embodiment(cloud, mask)
    assert np.all(out.colors[mask] == [1.0, 0.0, 1.0])
    assert np.array_equal(out.effector_flag, mask.astype(float))
    assert np.array_equal(out.colors[~mask], cloud.colors[~mask])
    plain = preprocess_cross_embodiment(cloud, mask, segmentation=False)
    assert np.all(plain.effector_flag == 0.0)
    assert np.array_equal(plain.colors, cloud.colors)
    with pytest.raises(ValueError):
        preprocess_cross_embodiment(cloud, mask[:-1])


def test_group_dropout_frequency():
    model = SFCr(small_config(groups=16))
    cloud, mask, _ = scene_frame()
    groups = group_cloud(model.prepare(cloud, mask), 16, 8)
    rng = np.random.default_rng(3)
    dropped, total = 0, 0
    for _ in range(2000):
        tokens = drop_effector_groups(groups, rng, True, p_drop=0.5)
        assert tokens.keep[~tokens.effector_groups].all()
        dropped += int((~tokens.keep).sum())
        total += int(tokens.effector_groups.sum())
    assert total > 0
    assert 0.45 <= dropped / total <= 0.55
    assert drop_effector_groups(groups, rng, False).keep.all()


def test_dropped_groups_do_not_influence_prediction():
    model = SFCr(small_config())
    cloud, mask, _ = scene_frame()
    tokens = tokenize(model.prepare(cloud, mask), None, False, 8, 8)
    keep = tokens.keep.copy()
    keep[0] = False
    masked = TokenSet(tokens.centers, tokens.features, tokens.effector_groups, keep)
    queries = cloud.positions[:4]
    a = model.forward(collate([masked], [0], [queries])).value
    features = tokens.features.copy()
    features[0] += 5.0
    centers = tokens.centers.copy()
    centers[0] += 1.0
    moved = TokenSet(centers, features, tokens.effector_groups, keep)
    b = model.forward(collate([moved], [0], [queries])).value
    assert np.allclose(a, b)


def test_small_cloud_reduces_group_count():
    cloud, _, _ = scene_frame()
    tiny = cloud.subset(np.arange(5))
    groups = group_cloud(tiny, 8, 4)
    assert groups.size == 5


def test_train_save_load_and_eval(tmp_path):
    out = str(tmp_path / "data")
    build_dataset(DatasetConfig(tasks=("pick-0",), robot=1, human=1, n_eval=1, out=out, n_jobs=1))
    manifest = load_manifest(out)
    ckpt = str(tmp_path / "ckpt" / "sfcr.joblib")
    model, curve = train_sfcr(manifest, small_config(), ckpt)
    assert len(curve) == 3 and np.isfinite(curve["loss"]).all()
    assert os.path.exists(ckpt)
    assert len(pd.read_csv(os.path.join(tmp_path, "ckpt", "sfcr_loss.csv"))) == 3

    restored = load_sfcr(ckpt)
    cloud, mask, _ = scene_frame()
    queries = cloud.positions[:6]
    assert np.array_equal(
        restored.predict_flow(cloud, "pick-0", queries, mask).offsets,
        model.predict_flow(cloud, "pick-0", queries, mask).offsets,
    )

    report = eval_sfcr(ckpt, manifest, "box")
    assert list(report.columns) == EVAL_COLUMNS
    assert len(report) == 1
    assert (report["baseline_ade"] >= 0).all() and (report["ade"] > 0).all()
    again = eval_sfcr(ckpt, manifest, "random")
    assert again.equals(eval_sfcr(ckpt, manifest, "random"))
    with pytest.raises(ValueError):
        eval_sfcr(ckpt, manifest, "lattice")


def tiny_dataset(tmp_path, n_eval=1):
    out = str(tmp_path / "data")
    build_dataset(DatasetConfig(tasks=("pick-0",), robot=1, human=1, n_eval=n_eval, out=out, n_jobs=1))
    return load_manifest(out)


def test_training_loss_decreases(tmp_path):
    manifest = tiny_dataset(tmp_path, n_eval=0)
    _, curve = train_sfcr(manifest, small_config(steps=40, lr=5e-3))
    losses = curve["loss"].to_numpy()
    assert losses[-5:].mean() < losses[:5].mean()


def test_training_is_reproducible_for_a_seed(tmp_path):
    manifest = tiny_dataset(tmp_path, n_eval=0)
    _, a = train_sfcr(manifest, small_config(steps=4, seed=2))
    _, b = train_sfcr(manifest, small_config(steps=4, seed=2))
    assert a.equals(b)


def test_static_scene_trains_to_near_zero_offsets(tmp_path):
    demo = scripted_expert(W.make_task("pick-0", 0), "robot", 0)
    static = Demonstration("pick-0", "robot", 0, 0, frames=[demo.frames[0]] * 8, success=False)
    rel = os.path.join("episodes", f"{static.episode_id}.sfdm")
    save_demonstration(str(tmp_path / rel), static)
    manifest = {
        "root": str(tmp_path),
        "episodes": [{
            "path": rel, "episode_id": static.episode_id, "task_id": "pick-0", "embodiment": "robot",
            "seed": 0, "noise_seed": 0, "split": "train", "frames": 8, "success": False,
        }],
    }
    config = small_config(steps=400, lr=2e-3, batch_size=4)
    assert config.eps_static == config.voxel
    model, _ = train_sfcr(manifest, config)
    frame = static.frames[0]
    pred = model.predict_flow(frame.cloud, "pick-0", frame.cloud.positions[::5], frame.mask)
    assert np.linalg.norm(pred.offsets, axis=-1).max() < config.eps_static


def test_eval_with_oracle_flow_has_zero_error(tmp_path):
    manifest = tiny_dataset(tmp_path)
    model = SFCr(small_config())
    for mode in ("box", "random"):
        report = eval_sfcr(model, manifest, mode, predict=ORACLE)
        assert len(report) == 1
        assert report.loc[0, "ade"] == 0.0 and report.loc[0, "fde"] == 0.0


def test_static_baseline_matches_mean_true_displacement(tmp_path):
    manifest = tiny_dataset(tmp_path)
    model = SFCr(small_config())
    config = model.config
    report = eval_sfcr(model, manifest, "box")

    demo = load_episode(manifest, select_episodes(manifest, split="eval", embodiment="robot")[0])
    displacements = []
    for start in demo.window_starts(config.window_stride):
        frame = demo.frames[start]
        idx = grid_query_indices(frame.cloud, CropBox(frame.gripper, np.full(3, config.box_half)), config.box_spacing)
        if len(idx) == 0:
            continue
        positions = demo.window_positions(start, config.horizon)[idx]
        displacements.append(np.linalg.norm(positions - positions[:, :1], axis=-1))
    expected = np.concatenate(displacements)
    assert report.loc[0, "baseline_ade"] == pytest.approx(expected.mean())
    assert report.loc[0, "baseline_fde"] == pytest.approx(expected[:, -1].mean())

    def static(frame, task_id, queries):
        return Flow(queries, np.zeros((len(queries), config.horizon - 1, 3)), 0)

    as_model = eval_sfcr(model, manifest, "box", predict=static)
    assert as_model.loc[0, "ade"] == pytest.approx(report.loc[0, "baseline_ade"])


def test_static_threshold_defaults_to_voxel_size():
    config = SfcrConfig()
    assert config.eps_static == config.voxel == 0.02
    traj = np.array([[0.0, 0.0, 0.0], [0.015, 0.0, 0.0]])
    assert is_static(traj, config.eps_static)
