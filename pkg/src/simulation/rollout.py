"""
Exécution en boucle fermée : le flot est rafraîchi tous les n_flow pas, la politique
rééchantillonne un chunk à chaque pas et n'en exécute que `next_window` actions.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from src.models.fcrp import assemble_condition, flow_queries, load_fcrp
from src.models.sfcr import load_sfcr
from src.simbench import world as W

ROLLOUT_COLUMNS = [
    "episode_id", "task", "success", "stage_reached", "steps", "safety_violation",
    "flow_refreshes", "fallback_events", "clamp_events", "close_attempts", "first_try_hook",
    "grasp_x", "grasp_y", "final_x", "final_y", "moved_to_training_slot",
]
ROLLOUT_SEED_BASE = 5000


@dataclass
class RolloutConfig:
    n_flow: int = 4
    next_window: int = 1
    max_steps: int = 120
    skip_rule: bool = False
    d_skip: float = 0.04
    async_flow: bool = False
    seed: int = 0


@dataclass(eq=False)
class FlowSnapshot:
    """Flot immuable + état de flot associé ; remplacé d'un bloc."""
    flow: object
    state_index: int
    gripper: np.ndarray


def replay_actions(scene, actions, embodiment=W.ROBOT):
    """Rejoue une séquence d'actions dans le simulateur ; renvoie l'état final."""
    state = W.initial_state(scene)
    for values in actions:
        state = W.step(state, embodiment, W.Action.from_array(values))
    return state


def moved_to_training_slot(scene, state):
    """Échec typique : la pince se ferme (ou finit) plus près d'un emplacement d'entraînement que du bol."""
    if scene.kind != "pick":
        return False
    point = state.first_close_xy if state.first_close_xy is not None else state.gripper[:2]
    bowl = scene.main_object.position[:2]
    nearest_slot = np.min(np.linalg.norm(W.TRAINING_SLOTS - point, axis=1))
    return bool(nearest_slot < np.linalg.norm(point - bowl))


class RolloutController:
    def __init__(self, policy, flow_model, config=None, embodiment=W.ROBOT):
        self.policy = load_fcrp(policy) if isinstance(policy, str) else policy
        self.flow_model = load_sfcr(flow_model) if isinstance(flow_model, str) else flow_model
        self.config = config or RolloutConfig()
        self.embodiment = embodiment

    def _predict(self, obs, task_id, t):
        cloud, mask, gripper, _ = obs
        if not self.policy.config.use_flow or self.flow_model is None:
            return FlowSnapshot(None, t, gripper)
        idx = flow_queries(cloud, gripper, self.policy.config)
        if len(idx) == 0:
            return None
        flow = self.flow_model.predict_flow(cloud, task_id, cloud.positions[idx], mask)
        flow.state_index = t
        return FlowSnapshot(flow, t, gripper)

    def _skip(self, state):
        if not self.config.skip_rule:
            return False
        near = np.linalg.norm(state.gripper - W.handle_point(state)) < self.config.d_skip
        return bool(near and state.opening >= 0.5)

    def run(self, scene, seed=0):
        cfg, pcfg = self.config, self.policy.config
        horizon = pcfg.horizon
        rng = np.random.default_rng([cfg.seed, int(seed), scene.task_index, scene.seed])
        state = W.initial_state(scene)
        history = []
        snapshot = None
        refreshes = fallbacks = 0
        executor = ThreadPoolExecutor(max_workers=1) if cfg.async_flow else None
        pending = None
        t = 0

        def observe():
            cloud, mask = W.render(state, self.embodiment)
            history.append((cloud, mask, state.gripper.copy(), W.proprioception(state, self.embodiment)))

        try:
            observe()
            while t < cfg.max_steps:
                # history[t] est l'observation de l'état courant
                if pending is not None and pending.done():
                    fresh = pending.result()
                    pending = None
                    if fresh is None:
                        fallbacks += 1
                    else:
                        snapshot, refreshes = fresh, refreshes + int(fresh.flow is not None)

                due = snapshot is None or t - snapshot.state_index >= cfg.n_flow
                if due and pending is None and not (snapshot is not None and self._skip(state)):
                    if executor is not None and snapshot is not None:
                        pending = executor.submit(self._predict, history[t], scene.task_id, t)
                    else:
                        fresh = self._predict(history[t], scene.task_id, t)
                        if fresh is None:
                            # Boîte vide : on garde le flot précédent
                            fallbacks += 1
                        else:
                            snapshot, refreshes = fresh, refreshes + int(fresh.flow is not None)
                if snapshot is None:
                    snapshot = FlowSnapshot(None, t, state.gripper.copy())
                if t - snapshot.state_index >= horizon:
                    # Flot trop ancien pour le préfixe : ré-ancrage sans flot
                    snapshot = FlowSnapshot(None, t, history[t][2])

                f = snapshot.state_index
                states = [history[f], history[max(t - 1, 0)], history[t]]
                condition = assemble_condition(snapshot.flow, snapshot.gripper, states, t - f, pcfg, f)
                chunk = self.policy.sample_actions(condition, rng, cfg.next_window)
                done = False
                for values in chunk.pending():
                    state = W.step(state, self.embodiment, W.Action.from_array(values))
                    t += 1
                    done = state.safety_violation or W.evaluate_success(state)["success"]
                    if done or t >= cfg.max_steps:
                        break
                    observe()
                if done:
                    break
        finally:
            if executor is not None:
                executor.shutdown(wait=True)

        outcome = W.evaluate_success(state)
        grasp = state.first_close_xy if state.first_close_xy is not None else np.full(2, np.nan)
        return {
            "episode_id": f"{scene.task_id}_{scene.seed}",
            "task": scene.task_id,
            "success": bool(outcome["success"]),
            "stage_reached": int(outcome["stage_reached"]),
            "steps": int(t),
            "safety_violation": bool(state.safety_violation),
            "flow_refreshes": int(refreshes),
            "fallback_events": int(fallbacks),
            "clamp_events": int(state.clamp_events),
            "close_attempts": int(state.close_attempts),
            "first_try_hook": bool(state.first_try_success),
            "grasp_x": float(grasp[0]),
            "grasp_y": float(grasp[1]),
            "final_x": float(state.gripper[0]),
            "final_y": float(state.gripper[1]),
            "moved_to_training_slot": (not outcome["success"]) and moved_to_training_slot(scene, state),
        }


def rollout(policy, flow_model, scene, config=None, seed=0):
    return RolloutController(policy, flow_model, config).run(scene, seed)


def _rollout_job(policy, flow_model, task_id, scene_seed, config):
    return rollout(policy, flow_model, W.make_task(task_id, scene_seed), config, scene_seed)


def run_rollouts(policy, flow_model, tasks, episodes, seed=0, config=None, n_jobs=1):
    """`episodes` épisodes par tâche sur des scènes jamais vues à l'entraînement."""
    config = config or RolloutConfig()
    jobs = [(task, ROLLOUT_SEED_BASE + 1000 * int(seed) + i) for task in tasks for i in range(episodes)]
    paths = isinstance(policy, str) and (flow_model is None or isinstance(flow_model, str))
    if n_jobs != 1 and paths:
        records = Parallel(n_jobs=n_jobs)(delayed(_rollout_job)(policy, flow_model, task, s, config) for task, s in jobs)
    else:
        controller = RolloutController(policy, flow_model, config)
        records = [controller.run(W.make_task(task, s), s) for task, s in jobs]
    for r in records:
        status = "✅" if r["success"] else "❌"
        print(
            f"{status} {r['episode_id']} : {r['steps']} pas, étape {r['stage_reached']}, "
            f"{r['flow_refreshes']} flots, {r['fallback_events']} replis, {r['clamp_events']} écrêtages"
        )
    return pd.DataFrame(records, columns=ROLLOUT_COLUMNS)
