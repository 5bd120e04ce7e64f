"""
Monde de table simulé (cinématique, sans moteur physique).

Il fournit ce que le banc réel fournissait : la scène, deux incarnations
(robot / main), un pas de simulation, le rendu en nuage de points avec
segmentation exacte de l'effecteur, et les critères de réussite.
"""
import math
from dataclasses import dataclass, field, replace

import numpy as np

from src.pcgeom.cloud import PointCloud

TASK_IDS = ("pick-0", "pick-1", "pick-2", "pick-3", "pick-4", "pick-5", "pick-6", "slide-drawer", "fold-patch")
PICK_TASKS = TASK_IDS[:7]
SEEN_PICK_TASKS = TASK_IDS[:4]
HELDOUT_PICK_TASKS = TASK_IDS[4:7]

TABLE_EXTENT = np.array([[-0.32, 0.32], [-0.27, 0.27]])
WORKSPACE = np.array([[-0.35, 0.35], [-0.30, 0.30], [0.0, 0.35]])

# Positions (x, y) du bol : #0-3 vues avec des démos robot, #4-6 seulement chez l'humain
PICK_POSITIONS = {
    0: (-0.17, -0.12), 1: (-0.17, 0.12), 2: (0.0, -0.16), 3: (0.0, 0.16),
    4: (-0.09, 0.0), 5: (-0.07, -0.09), 6: (-0.12, 0.07),
}
TRAINING_SLOTS = np.array([PICK_POSITIONS[i] for i in range(4)])
BOWL_INSTANCES = {
    "standard": (0.045, (0.85, 0.45, 0.15)),
    "wide-green": (0.05, (0.55, 0.75, 0.30)),
    "wide-blue": (0.055, (0.25, 0.45, 0.85)),
}
PICK_INSTANCE = {5: "wide-green", 6: "wide-blue"}
BOWL_HEIGHT = 0.04
TARGET_SLOT = np.array([0.17, 0.0, 0.0])

DRAWER_AXIS = np.array([0.0, 1.0, 0.0])
DRAWER_NOTCH_Y = -0.175
DRAWER_NOTCH_Z = 0.05
DRAWER_TRAVEL = 0.15
CLOTH_LENGTH = 0.12
CLOTH_Z = 0.005

STEP_CAP = 0.03
GRASP_RADIUS = 0.02
HOOK_RADIUS = 0.01
HOOK_RELEASE = 0.015
PLACE_TOLERANCE = 0.03
DRAWER_SUCCESS = 0.08
FOLD_TOLERANCE = 0.35


class SimError(Exception):
    pass


def task_index(task_id):
    try:
        return TASK_IDS.index(task_id)
    except ValueError:
        raise SimError(f"tâche inconnue : {task_id}") from None


@dataclass(eq=False)
class SceneObject:
    obj_id: int
    shape: str              # bowl-disk | drawer-slab | cloth-patch
    position: np.ndarray    # base du bol / encoche fermée / charnière
    color: tuple
    size: float


@dataclass(eq=False)
class Scene:
    task_id: str
    seed: int
    table_extent: np.ndarray
    objects: list
    target_slot: np.ndarray
    start_gripper: np.ndarray

    @property
    def task_index(self):
        return task_index(self.task_id)

    @property
    def kind(self):
        return self.task_id.split("-")[0]

    @property
    def main_object(self):
        return self.objects[0]


@dataclass(frozen=True)
class Embodiment:
    kind: str               # robot | human
    color: tuple
    closed_gap: float
    open_gap: float

    def finger_half_gap(self, opening):
        return self.closed_gap + (self.open_gap - self.closed_gap) * opening

    def finger_offsets(self, opening):
        w = self.finger_half_gap(opening)
        return np.array([[0.0, w, 0.0], [0.0, -w, 0.0]])

    def point_template(self, opening):
        """Points locaux de l'effecteur, repère = centre des doigts."""
        w = self.finger_half_gap(opening)
        pts = []
        if self.kind == "robot":
            for s in (-1.0, 1.0):
                for x in (-0.01, 0.01):
                    for z in (0.0, 0.015, 0.03):
                        pts.append((x, s * w, z))
            for y in np.linspace(-0.045, 0.045, 7):
                pts.append((0.0, y, 0.045))
            for z in (0.06, 0.08, 0.10, 0.12):
                pts.append((0.0, 0.0, z))
        else:
            for s in (-1.0, 1.0):
                for z in (0.0, 0.012, 0.024, 0.036):
                    pts.append((0.0, s * w, z))
            for y in (-0.02, 0.0, 0.02):
                for z in (0.03, 0.05):
                    pts.append((0.025, y, z))
            for x in (-0.02, 0.0, 0.02):
                for y in (-0.03, 0.0, 0.03):
                    pts.append((x, y, 0.07))
            for z in (0.10, 0.13):
                pts.append((0.0, 0.0, z))
        return np.asarray(pts, dtype=np.float64)


ROBOT = Embodiment("robot", (0.35, 0.35, 0.40), closed_gap=0.006, open_gap=0.04)
HUMAN = Embodiment("human", (0.90, 0.70, 0.58), closed_gap=0.008, open_gap=0.048)
EMBODIMENTS = {"robot": ROBOT, "human": HUMAN}


def get_embodiment(kind):
    try:
        return EMBODIMENTS[kind]
    except KeyError:
        raise SimError(f"incarnation inconnue : {kind}") from None


@dataclass(eq=False)
class Action:
    delta_position: np.ndarray
    finger_command: float

    def as_array(self):
        return np.concatenate([np.asarray(self.delta_position, dtype=np.float64), [float(self.finger_command)]])

    @classmethod
    def from_array(cls, values):
        values = np.asarray(values, dtype=np.float64)
        return cls(values[:3].copy(), float(values[3]))


@dataclass(eq=False)
class WorldState:
    scene: Scene
    gripper: np.ndarray
    opening: float = 1.0
    grasped: bool = False
    object_position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    drawer_displacement: float = 0.0
    hooked: bool = False
    fold_angle: float = 0.0
    stage_reached: int = 0
    safety_violation: bool = False
    clamp_events: int = 0
    close_attempts: int = 0
    first_try_success: bool = False
    first_close_xy: np.ndarray = None

    def copy(self):
        return replace(
            self,
            gripper=self.gripper.copy(),
            object_position=self.object_position.copy(),
            first_close_xy=None if self.first_close_xy is None else self.first_close_xy.copy(),
        )

    def same_as(self, other):
        return (
            np.array_equal(self.gripper, other.gripper)
            and self.opening == other.opening
            and self.grasped == other.grasped
            and np.array_equal(self.object_position, other.object_position)
            and self.drawer_displacement == other.drawer_displacement
            and self.hooked == other.hooked
            and self.fold_angle == other.fold_angle
            and self.stage_reached == other.stage_reached
            and self.safety_violation == other.safety_violation
        )


# --- Construction des tâches ---

def make_task(task_id, seed):
    """Scène déterministe pour (tâche, graine)."""
    idx = task_index(task_id)
    rng = np.random.default_rng([idx, int(seed)])
    start = np.array([0.06, 0.0, 0.2]) + np.concatenate([rng.uniform(-0.02, 0.02, size=2), [0.0]])
    if task_id.startswith("pick-"):
        variant = int(task_id.split("-")[1])
        radius, color = BOWL_INSTANCES[PICK_INSTANCE.get(variant, "standard")]
        xy = np.asarray(PICK_POSITIONS[variant]) + rng.uniform(-0.01, 0.01, size=2)
        bowl = SceneObject(0, "bowl-disk", np.array([xy[0], xy[1], 0.0]), color, radius)
        target = TARGET_SLOT.copy()
        objects = [bowl]
    elif task_id == "slide-drawer":
        x = rng.uniform(-0.03, 0.03)
        drawer = SceneObject(0, "drawer-slab", np.array([x, DRAWER_NOTCH_Y, DRAWER_NOTCH_Z]), (0.50, 0.34, 0.22), 0.08)
        target = drawer.position + DRAWER_SUCCESS * DRAWER_AXIS
        objects = [drawer]
    else:
        hinge = np.array([rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02), CLOTH_Z])
        cloth = SceneObject(0, "cloth-patch", hinge, (0.30, 0.40, 0.80), CLOTH_LENGTH)
        target = hinge + np.array([-CLOTH_LENGTH, 0.0, 0.0])
        objects = [cloth]
    for obj in objects:
        if not (TABLE_EXTENT[0, 0] <= obj.position[0] <= TABLE_EXTENT[0, 1] and TABLE_EXTENT[1, 0] <= obj.position[1] <= TABLE_EXTENT[1, 1]):
            raise SimError(f"objet hors de la table : {obj.position}")
    return Scene(task_id, int(seed), TABLE_EXTENT.copy(), objects, target, start)


def initial_state(scene):
    obj = scene.main_object
    return WorldState(scene=scene, gripper=scene.start_gripper.copy(), object_position=obj.position.copy())


def handle_point(state):
    """Point de préhension (bol), encoche (tiroir) ou bord libre (tissu)."""
    obj = state.scene.main_object
    if obj.shape == "bowl-disk":
        return state.object_position + np.array([0.0, 0.0, BOWL_HEIGHT])
    if obj.shape == "drawer-slab":
        return obj.position + state.drawer_displacement * DRAWER_AXIS
    theta = state.fold_angle
    return obj.position + np.array([obj.size * math.cos(theta), 0.0, obj.size * math.sin(theta)])


def proprioception(state, embodiment):
    """g : pince + deux doigts (3 x 3)."""
    return np.vstack([state.gripper, state.gripper + embodiment.finger_offsets(state.opening)])


# --- Pas de simulation ---

def step(state, embodiment, action):
    new = state.copy()
    delta = np.asarray(action.delta_position, dtype=np.float64).copy()
    norm = float(np.linalg.norm(delta))
    if norm > STEP_CAP * (1.0 + 1e-9):
        delta *= STEP_CAP / norm
        new.clamp_events += 1
        print(f"⚠️ Action écrêtée : déplacement {norm:.4f} m ramené à {STEP_CAP:.4f} m ({state.scene.task_id})")
    command = float(np.clip(action.finger_command, 0.0, 1.0))
    obj = state.scene.main_object

    new.gripper = state.gripper + delta
    if new.gripper[2] < 0.0:
        # Collision avec la table : l'épisode se termine en échec
        new.safety_violation = True

    if new.grasped and obj.shape == "bowl-disk":
        new.object_position = state.object_position + delta
    if new.hooked:
        moved = float(np.clip(state.drawer_displacement + delta @ DRAWER_AXIS, 0.0, DRAWER_TRAVEL))
        new.drawer_displacement = moved
        notch = obj.position + moved * DRAWER_AXIS
        offset = new.gripper - notch
        perpendicular = offset - (offset @ DRAWER_AXIS) * DRAWER_AXIS
        if np.linalg.norm(perpendicular) > HOOK_RELEASE:
            new.hooked = False
    if new.grasped and obj.shape == "cloth-patch":
        rel = new.gripper - obj.position
        new.fold_angle = float(np.clip(math.atan2(rel[2], rel[0]), 0.0, math.pi))

    closing = state.opening >= 0.5 and command < 0.5
    opening = state.opening < 0.5 and command >= 0.5
    new.opening = command
    if closing:
        new.close_attempts += 1
        if new.first_close_xy is None:
            new.first_close_xy = new.gripper[:2].copy()
        dist = float(np.linalg.norm(new.gripper - handle_point(new)))
        if obj.shape == "drawer-slab":
            if dist <= HOOK_RADIUS:
                new.hooked = True
        elif dist <= GRASP_RADIUS:
            new.grasped = True
        if new.hooked or new.grasped:
            new.stage_reached = max(new.stage_reached, 1)
            if new.close_attempts == 1:
                new.first_try_success = True
    elif opening:
        if new.grasped and obj.shape == "bowl-disk":
            new.object_position = np.array([new.object_position[0], new.object_position[1], 0.0])
        new.grasped = False
        new.hooked = False
    return new


# --- Réussite ---

def evaluate_success(state):
    obj = state.scene.main_object
    if obj.shape == "bowl-disk":
        placed = np.linalg.norm(state.object_position[:2] - state.scene.target_slot[:2]) <= PLACE_TOLERANCE
        success = bool(placed and not state.grasped and not state.safety_violation)
    elif obj.shape == "drawer-slab":
        success = bool(state.drawer_displacement >= DRAWER_SUCCESS and not state.safety_violation)
    else:
        success = bool(state.fold_angle >= math.pi - FOLD_TOLERANCE and not state.grasped and not state.safety_violation)
    stage = 2 if success else state.stage_reached
    return {"success": success, "stage_reached": stage}


# --- Rendu en nuage de points ---

def _table_points():
    xs = np.arange(-0.30, 0.30 + 1e-9, 0.05)
    ys = np.arange(-0.25, 0.25 + 1e-9, 0.05)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
    checker = ((np.round(gx / 0.05) + np.round(gy / 0.05)) % 2).ravel()
    colors = np.array([0.62, 0.50, 0.38]) + (checker[:, None] - 0.5) * 0.06
    return pts, colors


def _object_points(state):
    obj = state.scene.main_object
    if obj.shape == "bowl-disk":
        r = obj.size
        ring = np.linspace(0.0, 2 * math.pi, 16, endpoint=False)
        inner = np.linspace(0.0, 2 * math.pi, 10, endpoint=False)
        local = np.concatenate([
            np.stack([r * np.cos(ring), r * np.sin(ring), np.full(16, BOWL_HEIGHT)], axis=1),
            np.stack([0.65 * r * np.cos(inner), 0.65 * r * np.sin(inner), np.full(10, BOWL_HEIGHT / 2)], axis=1),
            [[0.0, 0.0, 0.005]],
        ])
        pts = state.object_position + local
        colors = np.tile(obj.color, (len(pts), 1))
        return pts, colors
    if obj.shape == "drawer-slab":
        x0 = obj.position[0]
        top = [(x0 + dx, y, 0.10) for dx in (-0.08, -0.04, 0.0, 0.04, 0.08) for y in (-0.26, -0.22, -0.18)]
        front = [(x0 + dx, DRAWER_NOTCH_Y - 0.005, z) for dx in (-0.08, -0.04, 0.0, 0.04, 0.08) for z in (0.02, 0.05, 0.08)]
        sides = [(x0 + dx, y, 0.04) for dx in (-0.08, 0.08) for y in (-0.22, -0.26)]
        notch = [(x0 - 0.005, DRAWER_NOTCH_Y, DRAWER_NOTCH_Z), (x0 + 0.005, DRAWER_NOTCH_Y, DRAWER_NOTCH_Z)]
        moving = np.asarray(front + sides + notch) + state.drawer_displacement * DRAWER_AXIS
        pts = np.concatenate([np.asarray(top), moving])
        colors = np.concatenate([
            np.tile((0.45, 0.30, 0.20), (len(top), 1)),
            np.tile(obj.color, (len(front) + len(sides), 1)),
            np.tile((0.90, 0.90, 0.20), (len(notch), 1)),
        ])
        return pts, colors
    hinge = obj.position
    vs = np.linspace(-0.06, 0.06, 5)
    left = [(hinge[0] - u, hinge[1] + v, hinge[2]) for u in (0.03, 0.06, 0.09, 0.12) for v in vs]
    c, s = math.cos(state.fold_angle), math.sin(state.fold_angle)
    right = [(hinge[0] + u * c, hinge[1] + v, hinge[2] + u * s) for u in (0.0, 0.03, 0.06, 0.09, 0.12) for v in vs]
    pts = np.asarray(left + right)
    colors = np.concatenate([np.tile(obj.color, (len(left), 1)), np.tile((0.36, 0.46, 0.86), (len(right), 1))])
    return pts, colors


def render(state, embodiment):
    """Nuage de la scène + masque exact de l'effecteur ; ordre des points fixe dans un épisode."""
    parts, colors = [], []
    table, table_colors = _table_points()
    parts.append(table)
    colors.append(table_colors)
    if state.scene.kind == "pick":
        slot = state.scene.target_slot
        marker = np.array([[slot[0] + dx, slot[1] + dy, 0.001] for dx in (-0.02, 0.0, 0.02) for dy in (-0.02, 0.0, 0.02)])
        parts.append(marker)
        colors.append(np.tile((0.20, 0.75, 0.30), (len(marker), 1)))
    obj_pts, obj_colors = _object_points(state)
    parts.append(obj_pts)
    colors.append(obj_colors)
    effector = state.gripper + embodiment.point_template(state.opening)
    n_scene = sum(len(p) for p in parts)
    parts.append(effector)
    colors.append(np.tile(embodiment.color, (len(effector), 1)))
    positions = np.concatenate(parts)
    mask = np.zeros(len(positions), dtype=bool)
    mask[n_scene:] = True
    cloud = PointCloud(positions, np.clip(np.concatenate(colors), 0.0, 1.0), np.zeros(len(positions)))
    return cloud, mask
