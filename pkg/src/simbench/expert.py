"""
Expert scripté : contrôleur à points de passage (approche -> saisie/accroche -> transport -> relâche).
"""
import math

import numpy as np

from src.simbench import world as W
from src.simbench.storage import Demonstration, Frame

ROBOT_SPEED = 0.015          # m par tick
HUMAN_SPEED_RANGE = (1.5, 2.0)
JITTER_SIGMA = 0.005
PRECISE_CLIP = 0.004
TRANSIT_CLIP = 2 * JITTER_SIGMA
MAX_TICKS = 600
EMBODIMENT_CODES = {"robot": 0, "human": 1}

UP = np.array([0.0, 0.0, 0.08])


def plan_waypoints(scene):
    """Liste de (position, commande doigts, précis) pour la tâche."""
    state = W.initial_state(scene)
    handle = W.handle_point(state)
    if scene.kind == "pick":
        place = scene.target_slot + np.array([0.0, 0.0, W.BOWL_HEIGHT])
        return [
            (handle + UP, 1.0, False),
            (handle, 0.0, True),
            (handle + UP, 0.0, False),
            (place + UP, 0.0, False),
            (place, 1.0, True),
            (place + UP, 1.0, False),
        ]
    if scene.kind == "slide":
        pulled = handle + 0.11 * W.DRAWER_AXIS
        return [
            (handle + UP, 1.0, False),
            (handle, 0.0, True),
            (pulled, 1.0, True),
            (pulled + UP, 1.0, False),
        ]
    hinge = scene.main_object.position
    length = scene.main_object.size
    arc = [
        hinge + length * np.array([math.cos(a), 0.0, math.sin(a)])
        for a in np.radians([45.0, 90.0, 135.0])
    ]
    end = hinge + length * np.array([math.cos(math.radians(165.0)), 0.0, math.sin(math.radians(165.0))])
    return (
        [(handle + UP, 1.0, False), (handle, 0.0, True)]
        + [(p, 0.0, True) for p in arc]
        + [(end, 1.0, True), (end + UP, 1.0, False)]
    )


def _reachable(point):
    return bool(np.all(point >= W.WORKSPACE[:, 0]) and np.all(point <= W.WORKSPACE[:, 1]))


def _record(state, embodiment, action):
    cloud, mask = W.render(state, embodiment)
    if embodiment.kind == "robot":
        return Frame(cloud, mask, state.gripper.copy(), W.proprioception(state, embodiment), action.as_array())
    # La main humaine : nuage + pose seulement
    return Frame(cloud, mask, state.gripper.copy())


def scripted_expert(scene, embodiment, noise_seed):
    if isinstance(embodiment, str):
        embodiment = W.get_embodiment(embodiment)
    rng = np.random.default_rng([scene.task_index, scene.seed, EMBODIMENT_CODES[embodiment.kind], int(noise_seed)])
    speed = ROBOT_SPEED if embodiment.kind == "robot" else ROBOT_SPEED * rng.uniform(*HUMAN_SPEED_RANGE)

    waypoints = []
    for target, finger, precise in plan_waypoints(scene):
        clip = PRECISE_CLIP if precise else TRANSIT_CLIP
        jittered = target + np.clip(rng.normal(0.0, JITTER_SIGMA, size=3), -clip, clip)
        if not _reachable(jittered):
            raise W.SimError(f"point de passage inatteignable pour {scene.task_id} : {np.round(jittered, 3)}")
        waypoints.append((jittered, finger))

    state = W.initial_state(scene)
    frames = []
    for target, finger in waypoints:
        while True:
            delta = target - state.gripper
            dist = float(np.linalg.norm(delta))
            if dist < 1e-12 and state.opening == finger:
                break
            if dist >= 1e-12:
                move = delta if dist <= speed else delta * (speed / dist)
                action = W.Action(move, state.opening)
            else:
                action = W.Action(np.zeros(3), finger)
            frames.append(_record(state, embodiment, action))
            state = W.step(state, embodiment, action)
            if len(frames) > MAX_TICKS:
                raise W.SimError(f"l'expert n'a pas terminé {scene.task_id} en {MAX_TICKS} ticks")
    frames.append(_record(state, embodiment, W.Action(np.zeros(3), state.opening)))

    outcome = W.evaluate_success(state)
    return Demonstration(
        task_id=scene.task_id,
        embodiment=embodiment.kind,
        seed=scene.seed,
        noise_seed=int(noise_seed),
        frames=frames,
        success=outcome["success"],
        stage_reached=outcome["stage_reached"],
    )
