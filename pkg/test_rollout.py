import numpy as np
import pytest

from src.models.fcrp import FCrP, FcrpConfig
from src.models.sfcr import SFCr, SfcrConfig
from src.simbench import world as W
from src.simbench.expert import scripted_expert
from src.simulation.rollout import (
    ROLLOUT_COLUMNS, RolloutConfig, RolloutController, moved_to_training_slot, replay_actions, run_rollouts,
)
from src.utils.report import rows_from_rollouts


def small_models(use_flow=True):
    sfcr = SFCr(SfcrConfig(
        d_model=16, n_layers=1, n_heads=2, d_ff=32, point_dim=16, groups=8, group_size=8, n_queries=8, horizon=4,
    ))
    policy = FCrP(FcrpConfig(
        horizon=4, diffusion_steps=3, point_hidden=16, obs_feature=16, flow_hidden=16, flow_feature=16,
        max_flow=8, flow_horizon=4, prefix_dim=4, k_dim=8, hidden=32, n_blocks=1, use_flow=use_flow,
    ))
    return policy, sfcr


@pytest.mark.parametrize("task_id", ["pick-2", "slide-drawer", "fold-patch"])
def test_replaying_expert_actions_reproduces_the_episode(task_id):
    scene = W.make_task(task_id, 5)
    demo = scripted_expert(scene, "robot", 1)
    state = replay_actions(scene, demo.actions())
    assert np.array_equal(state.gripper, demo.frames[-1].gripper)
    assert W.evaluate_success(state)["success"] == demo.success


def test_moved_to_training_slot():
    scene = W.make_task("pick-4", 0)
    state = W.initial_state(scene)
    state.first_close_xy = W.TRAINING_SLOTS[0].copy()
    assert moved_to_training_slot(scene, state)
    state.first_close_xy = scene.main_object.position[:2].copy()
    assert not moved_to_training_slot(scene, state)
    assert not moved_to_training_slot(W.make_task("slide-drawer", 0), W.initial_state(W.make_task("slide-drawer", 0)))


def test_rollout_record_and_flow_refresh():
    policy, sfcr = small_models()
    config = RolloutConfig(n_flow=2, max_steps=5)
    record = RolloutController(policy, sfcr, config).run(W.make_task("pick-4", 0), 0)
    assert set(ROLLOUT_COLUMNS) == set(record)
    assert record["steps"] <= 5
    assert record["flow_refreshes"] >= 1
    assert record["fallback_events"] == 0


def test_rollouts_are_reproducible():
    policy, sfcr = small_models()
    config = RolloutConfig(max_steps=4)
    a = run_rollouts(policy, sfcr, ["pick-5"], 2, seed=1, config=config)
    b = run_rollouts(policy, sfcr, ["pick-5"], 2, seed=1, config=config)
    assert list(a.columns) == ROLLOUT_COLUMNS and len(a) == 2
    assert a.equals(b)
    rows = rows_from_rollouts(a, "exp", [1])
    assert {r.metric for r in rows} >= {"success", "first_stage_only", "stage1"}


def test_async_flow_and_no_flow_variants():
    policy, sfcr = small_models()
    record = RolloutController(policy, sfcr, RolloutConfig(max_steps=6, n_flow=1, async_flow=True)).run(W.make_task("pick-0", 0))
    assert record["flow_refreshes"] >= 1
    no_flow, _ = small_models(use_flow=False)
    record = RolloutController(no_flow, None, RolloutConfig(max_steps=3, next_window=2)).run(W.make_task("pick-0", 0))
    assert record["flow_refreshes"] == 0 and record["steps"] <= 3


def test_skip_rule_holds_flow_near_handle():
    policy, sfcr = small_models()
    controller = RolloutController(policy, sfcr, RolloutConfig(skip_rule=True, d_skip=0.04))
    state = W.initial_state(W.make_task("slide-drawer", 0))
    assert not controller._skip(state)
    state.gripper = W.handle_point(state) + np.array([0.0, 0.0, 0.01])
    assert controller._skip(state)
    state.opening = 0.0
    assert not controller._skip(state)


def test_empty_box_keeps_previous_flow_then_reanchors_without_flow(monkeypatch):
    import src.simulation.rollout as R

    policy, sfcr = small_models()
    calls = []

    def first_box_only(cloud, gripper, config):
        calls.append(len(calls))
        return np.arange(5) if len(calls) == 1 else np.zeros(0, dtype=np.int64)

    seen = []
    real_assemble = R.assemble_condition

    def recording_assemble(flow, gripper, states, prefix, config, flow_state=0):
        seen.append((flow, flow_state, prefix))
        return real_assemble(flow, gripper, states, prefix, config, flow_state)

    monkeypatch.setattr(R, "flow_queries", first_box_only)
    monkeypatch.setattr(R, "assemble_condition", recording_assemble)
    horizon = policy.config.horizon
    record = RolloutController(policy, sfcr, RolloutConfig(n_flow=1, max_steps=horizon + 3)).run(W.make_task("pick-0", 0))

    assert record["flow_refreshes"] == 1
    assert record["fallback_events"] == record["steps"] - 1
    first = seen[0][0]
    assert first is not None
    for flow, flow_state, prefix in seen:
        assert prefix < horizon
        if flow_state == 0:
            assert flow is first
        else:
            assert flow is None and flow_state == horizon
