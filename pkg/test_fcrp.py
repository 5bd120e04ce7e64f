import math
import os

import numpy as np
import pytest

from src.collectors.demo_collector import DatasetConfig, build_dataset, load_episode, load_manifest, select_episodes
from src.flowkit.flow import Flow
from src.models.fcrp import (
    ActionChunk, DiffusionSchedule, FCrP, FcrpConfig, FiLMBlock, assemble_condition, build_state_obs,
    denoise_step, denormalize_actions, dp3_encode, load_fcrp, normalize_actions,
)
from src.models.fcrp_trainer import (
    FlowProvider, PolicyDataError, action_chunk, check_policy_episodes, draw_mp, make_sample, train_fcrp,
)
from src.models.sfcr import SfcrConfig
from src.models.sfcr_trainer import train_sfcr
from src.numcore import graph as G
from src.numcore.optim import Adam
from src.numcore.params import ParamStore
from src.pcgeom.cloud import PointCloud
from src.simbench import world as W
from src.simbench.expert import scripted_expert


def small_config(**kw):
    base = dict(
        horizon=4, diffusion_steps=5, point_hidden=16, obs_feature=16, flow_hidden=16, flow_feature=16,
        max_flow=16, flow_horizon=4, prefix_dim=4, k_dim=8, hidden=32, n_blocks=1, steps=2, batch_size=2, log_every=1,
    )
    base.update(kw)
    return FcrpConfig(**base)


def normal_cdf(x):
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def ks_distance(samples):
    xs = np.sort(samples)
    n = len(xs)
    cdf = np.array([normal_cdf(x) for x in xs])
    i = np.arange(1, n + 1)
    return max(np.max(i / n - cdf), np.max(cdf - (i - 1) / n))


def test_forward_marginal_is_close_to_standard_normal():
    schedule = DiffusionSchedule.linear(50)
    assert schedule.alpha_bars[-1] < 1e-3
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1.0, 1.0, size=10000)
    xk = schedule.q_sample(x0, schedule.steps, rng.standard_normal(10000))
    assert ks_distance(xk) < 0.05


def test_schedule_validation_and_single_step():
    with pytest.raises(ValueError):
        DiffusionSchedule(np.array([0.0, 0.1]))
    schedule = DiffusionSchedule.linear(1)
    x = np.array([0.3, -0.2])
    eps = np.array([0.1, 0.4])
    # K = 1 : le pas final est déterministe
    a = schedule.step(x, 1, eps, np.random.default_rng(1))
    b = schedule.step(x, 1, eps, np.random.default_rng(2))
    assert np.array_equal(a, b)


def test_sampler_recovers_single_mode_with_exact_noise_predictor():
    schedule = DiffusionSchedule.linear(50)
    mu, s = 0.5, 0.2
    rng = np.random.default_rng(3)
    x = rng.standard_normal(4000)
    for k in range(schedule.steps, 0, -1):
        ab = schedule.alpha_bars[k - 1]
        eps = math.sqrt(1.0 - ab) * (x - math.sqrt(ab) * mu) / (ab * s * s + 1.0 - ab)
        x = schedule.step(x, k, eps, rng)
    assert abs(x.mean() - mu) < 3 * s / math.sqrt(len(x))
    assert 0.0 < x.std() < 1.5 * s


def test_action_normalization_roundtrip():
    actions = np.array([[0.01, -0.02, 0.0, 1.0], [0.0, 0.03, -0.01, 0.0]])
    back = denormalize_actions(normalize_actions(actions, 0.03), 0.03)
    assert np.allclose(back, actions)


def test_film_with_zero_modulation_is_identity():
    store = ParamStore(0)
    block = FiLMBlock(store, "blk", 8, 5)
    store.params["blk.film.w"].value = np.zeros((5, 16))
    h = G.constant(np.random.default_rng(4).normal(size=(3, 8)))
    cond = G.constant(np.random.default_rng(5).normal(size=(3, 5)))
    assert np.array_equal(block(h, cond).value, block(h).value)
    store.params["blk.film.w"].value = np.ones((5, 16))
    assert not np.allclose(block(h, cond).value, block(h).value)


def lattice_scene(rng, n=60):
    positions = rng.integers(-12, 12, size=(n, 3)) / 64.0
    colors = rng.integers(0, 8, size=(n, 3)) / 8.0
    mask = rng.uniform(size=n) < 0.2
    cloud = PointCloud(positions, colors, np.zeros(n))
    gripper = rng.integers(-4, 4, size=3) / 64.0
    proprio = gripper + np.array([[0.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, -2.0, 0.0]]) / 64.0
    return cloud, mask, gripper, proprio


def lattice_flow(rng, gripper, horizon):
    queries = gripper + rng.integers(-8, 8, size=(10, 3)) / 64.0
    offsets = rng.integers(-4, 4, size=(10, horizon - 1, 3)) / 64.0
    return Flow(queries, offsets, 0)


def test_max_pooling_is_permutation_invariant():
    config = small_config()
    model = FCrP(config)
    cloud, mask, gripper, proprio = lattice_scene(np.random.default_rng(6))
    obs = build_state_obs(cloud, mask, gripper, proprio, gripper, config)
    assert len(obs.cloud) > 1
    perm = np.random.default_rng(7).permutation(len(obs.cloud))
    shuffled = type(obs)(obs.cloud.subset(perm), obs.proprio)
    assert np.allclose(dp3_encode(model, obs), dp3_encode(model, shuffled))
    refs = model.referenced_points(assemble_condition(None, gripper, [(cloud, mask, gripper, proprio)] * 3, 0, config))
    assert all(len(r) > 0 and r.max() < len(obs.cloud) for r in refs)


def test_condition_is_invariant_to_joint_translation():
    config = small_config()
    model = FCrP(config)
    rng = np.random.default_rng(8)
    cloud, mask, gripper, proprio = lattice_scene(rng)
    flow = lattice_flow(rng, gripper, config.flow_horizon)
    states = [(cloud, mask, gripper, proprio)] * 3
    base = assemble_condition(flow, gripper, states, 1, config)
    base_chunk = model.sample_actions(base, np.random.default_rng(0)).actions
    for _ in range(10):
        v = rng.integers(-8, 8, size=3) / 64.0
        moved_states = [(cloud.translated(v), mask, gripper + v, proprio + v)] * 3
        moved = assemble_condition(flow.translated(v), gripper + v, moved_states, 1, config)
        assert moved.same_as(base)
        assert np.array_equal(model.sample_actions(moved, np.random.default_rng(0)).actions, base_chunk)


def test_denoise_step_shapes_and_range():
    config = small_config()
    model = FCrP(config)
    rng = np.random.default_rng(9)
    cloud, mask, gripper, proprio = lattice_scene(rng)
    condition = assemble_condition(None, gripper, [(cloud, mask, gripper, proprio)] * 3, 2, config)
    noisy = rng.standard_normal((config.horizon, 4))
    assert denoise_step(model, noisy, 3, condition).shape == (config.horizon, 4)
    assert denoise_step(model, noisy, 3, None).shape == (config.horizon, 4)
    with pytest.raises(ValueError):
        denoise_step(model, noisy, config.diffusion_steps + 1, condition)
    chunk = model.sample_actions(condition, rng, next_window=3)
    assert chunk.actions.shape == (config.horizon, 4)
    assert np.array_equal(chunk.pending(), chunk.actions[2:4])


def test_action_chunk_window():
    chunk = ActionChunk(np.zeros((4, 4)), executed_prefix=1, next_window=2)
    assert len(chunk.pending()) == 2
    with pytest.raises(ValueError):
        ActionChunk(np.zeros((4, 4)), executed_prefix=4)


def test_mp_frequency_and_task_default():
    rng = np.random.default_rng(10)
    rate = np.mean([draw_mp(rng, 0.5) for _ in range(10000)])
    assert 0.47 <= rate <= 0.53
    config = FcrpConfig()
    assert config.mp_for("slide-drawer") == 0.0
    assert config.mp_for("pick-4") == 0.5
    with pytest.raises(ValueError):
        FcrpConfig(mp=1.5)


def test_policy_rejects_human_or_missing_demos():
    with pytest.raises(PolicyDataError):
        check_policy_episodes([])
    human = scripted_expert(W.make_task("pick-0", 0), "human", 0)
    with pytest.raises(PolicyDataError):
        check_policy_episodes([human])


def test_training_samples_align_flow_state_and_actions():
    config = small_config(mp=0.0)
    demo = scripted_expert(W.make_task("pick-1", 0), "robot", 0)
    flows = [None] * demo.num_frames
    rng = np.random.default_rng(11)
    for _ in range(20):
        condition, chunk, masked = make_sample(demo, flows, rng, config)
        f = condition.flow_state
        t = min(f + condition.executed_prefix, demo.num_frames - 1)
        assert not masked
        assert 0 <= condition.executed_prefix < config.horizon
        assert np.array_equal(chunk, action_chunk(demo, f, config.horizon))
        expected = demo.frames[t].proprio - demo.frames[f].gripper
        assert np.allclose(condition.obs[2].proprio, expected)
    tail = action_chunk(demo, demo.num_frames - 1, config.horizon)
    assert np.all(tail[1:, :3] == 0.0)

    masked_config = small_config(mp=1.0)
    condition, _, masked = make_sample(demo, flows, rng, masked_config)
    assert masked and all(len(o.cloud) == 0 for o in condition.obs)


def test_train_policy_variants(tmp_path):
    out = str(tmp_path / "data")
    build_dataset(DatasetConfig(tasks=("pick-0",), robot=1, human=1, out=out, n_jobs=1))
    manifest = load_manifest(out)
    sfcr_ckpt = str(tmp_path / "sfcr.joblib")
    sfcr_config = SfcrConfig(
        d_model=16, n_layers=1, n_heads=2, d_ff=32, point_dim=16, groups=8, group_size=8,
        n_queries=8, horizon=4, steps=1, batch_size=1, log_every=1,
    )
    train_sfcr(manifest, sfcr_config, sfcr_ckpt)

    ckpt = str(tmp_path / "fcrp.joblib")
    cache = str(tmp_path / "cache")
    model, curve = train_fcrp(manifest, sfcr_ckpt, small_config(), ckpt, cache_dir=cache)
    assert len(curve) == 2 and np.isfinite(curve["loss"]).all()
    assert [d for d in os.listdir(cache) if d.startswith("sfcr-")]
    restored = load_fcrp(ckpt)
    for name, node in model.store.items():
        assert np.array_equal(restored.store.params[name].value, node.value)

    train_fcrp(manifest, None, small_config(pf=False), str(tmp_path / "oracle.joblib"))
    train_fcrp(manifest, None, small_config(use_flow=False, pc=False), str(tmp_path / "noflow.joblib"))
    with pytest.raises(PolicyDataError):
        train_fcrp(manifest, None, small_config(), str(tmp_path / "missing.joblib"))


def small_flow_config(**kw):
    base = dict(
        d_model=16, n_layers=1, n_heads=2, d_ff=32, point_dim=16, groups=8, group_size=8,
        n_queries=8, horizon=4, steps=1, batch_size=1, log_every=1,
    )
    base.update(kw)
    return SfcrConfig(**base)


def test_flow_cache_follows_checkpoint_content(tmp_path):
    out = str(tmp_path / "data")
    build_dataset(DatasetConfig(tasks=("pick-0",), robot=1, human=0, out=out, n_jobs=1))
    manifest = load_manifest(out)
    demo = load_episode(manifest, select_episodes(manifest, split="train", embodiment="robot")[0])
    ckpt = str(tmp_path / "sfcr.joblib")
    cache = str(tmp_path / "cache")
    config = small_config()

    train_sfcr(manifest, small_flow_config(seed=0), ckpt)
    first = FlowProvider(config, ckpt, cache).flows(demo)
    # Même chemin, nouveaux poids
    train_sfcr(manifest, small_flow_config(seed=7), ckpt)
    provider = FlowProvider(config, ckpt, cache)
    again = provider.flows(demo)
    fresh = provider._compute(demo)

    f = next(i for i, flow in enumerate(first) if flow is not None)
    assert not np.array_equal(again[f].offsets, first[f].offsets)
    assert np.array_equal(again[f].offsets, fresh[f].offsets)
    assert len(os.listdir(cache)) == 2
    assert FlowProvider(small_config(max_flow=4), ckpt, cache).tag != provider.tag
    assert FlowProvider(small_config(flow_box_half=0.1), ckpt, cache).tag != provider.tag


def test_trained_policy_samples_concentrate_on_single_mode():
    config = small_config(diffusion_steps=50, hidden=32, n_blocks=2)
    rng = np.random.default_rng(12)
    cloud, mask, gripper, proprio = lattice_scene(rng)
    condition = assemble_condition(None, gripper, [(cloud, mask, gripper, proprio)] * 3, 0, config)
    mode = np.tile([0.015, -0.01, 0.005, 1.0], (config.horizon, 1))
    target = normalize_actions(mode, config.action_cap)

    def sample_error(model):
        samples = np.stack([
            normalize_actions(model.sample_actions(condition, np.random.default_rng(i)).actions, config.action_cap)
            for i in range(16)
        ])
        return np.abs(samples - target).mean()

    model = FCrP(config)
    optimizer = Adam(model.store, lr=3e-3)
    train_rng = np.random.default_rng(13)
    for _ in range(500):
        G.backward(model.loss([condition] * 16, np.stack([mode] * 16), train_rng))
        optimizer.step()
    after = sample_error(model)
    # Un tirage N(0, 1) brut est en moyenne à plus de 0.8 du mode
    assert after < 0.35
