"""
Trajectoires et flots de points 3D.

Une trajectoire est stockée sous la forme (point requête F_0, décalages F_i - F_0) :
c'est la cible de prédiction du modèle de flot et le format des fichiers de flot.
"""
import json
from dataclasses import dataclass

import numpy as np

TARGET_MODES = ("relative", "incremental", "absolute")


@dataclass(eq=False)
class Trajectory:
    query: np.ndarray     # F_0
    offsets: np.ndarray   # (T-1) x 3, F_i - F_0 pour i >= 1

    def __post_init__(self):
        self.query = np.asarray(self.query, dtype=np.float64).reshape(3)
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 3)

    @classmethod
    def from_points(cls, points):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(points) < 1:
            raise ValueError("trajectoire vide")
        return cls(points[0], points[1:] - points[0])

    @property
    def horizon(self):
        return len(self.offsets) + 1

    @property
    def points(self):
        return np.concatenate([self.query[None, :], self.query + self.offsets], axis=0)


@dataclass(eq=False)
class Flow:
    """Ensemble ordonné de trajectoires partageant les mêmes instants."""
    queries: np.ndarray   # M x 3
    offsets: np.ndarray   # M x (T-1) x 3
    state_index: int = 0

    def __post_init__(self):
        self.queries = np.asarray(self.queries, dtype=np.float64).reshape(-1, 3)
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        if len(self.queries) == 0:
            raise ValueError("un flot doit contenir au moins une trajectoire")
        if self.offsets.ndim != 3 or self.offsets.shape[0] != len(self.queries) or self.offsets.shape[2] != 3:
            raise ValueError(f"décalages de forme {self.offsets.shape} pour {len(self.queries)} requêtes")

    @classmethod
    def from_trajectories(cls, trajectories, state_index=0):
        horizons = {t.horizon for t in trajectories}
        if len(horizons) != 1:
            raise ValueError(f"horizons différents dans le flot : {sorted(horizons)}")
        return cls(np.stack([t.query for t in trajectories]), np.stack([t.offsets for t in trajectories]), state_index)

    @classmethod
    def from_points(cls, points, state_index=0):
        points = np.asarray(points, dtype=np.float64)
        return cls(points[:, 0], points[:, 1:] - points[:, :1], state_index)

    def __len__(self):
        return len(self.queries)

    @property
    def horizon(self):
        return self.offsets.shape[1] + 1

    @property
    def trajectories(self):
        return [Trajectory(q, o) for q, o in zip(self.queries, self.offsets)]

    @property
    def positions(self):
        """Positions absolues M x T x 3."""
        return np.concatenate([self.queries[:, None, :], self.queries[:, None, :] + self.offsets], axis=1)

    def subset(self, indices):
        return Flow(self.queries[indices], self.offsets[indices], self.state_index)

    def translated(self, offset):
        return Flow(self.queries + np.asarray(offset, dtype=np.float64), self.offsets.copy(), self.state_index)


def trajectory_width(traj):
    """Plus grande distance entre deux points de la trajectoire."""
    pts = traj.points if isinstance(traj, Trajectory) else np.asarray(traj, dtype=np.float64)
    diff = pts[:, None, :] - pts[None, :, :]
    return float(np.sqrt((diff ** 2).sum(-1)).max())


def trajectory_widths(positions):
    """Largeurs de M trajectoires (M x T x 3) en une passe."""
    positions = np.asarray(positions, dtype=np.float64)
    diff = positions[:, :, None, :] - positions[:, None, :, :]
    return np.sqrt((diff ** 2).sum(-1)).max(axis=(1, 2))


def is_static(traj, eps):
    if eps <= 0:
        raise ValueError(f"seuil statique invalide : {eps}")
    return trajectory_width(traj) < eps


def encode_targets(traj, mode="relative"):
    if mode == "relative":
        return traj.offsets.copy()
    pts = traj.points
    if mode == "incremental":
        return pts[1:] - pts[:-1]
    if mode == "absolute":
        return pts[1:].copy()
    raise ValueError(f"mode de cible inconnu : {mode}")


def decode_targets(query, targets, mode="relative"):
    query = np.asarray(query, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if mode == "relative":
        return Trajectory(query, targets)
    if mode == "incremental":
        return Trajectory.from_points(np.concatenate([query[None], query + np.cumsum(targets, axis=0)]))
    if mode == "absolute":
        return Trajectory.from_points(np.concatenate([query[None], targets]))
    raise ValueError(f"mode de cible inconnu : {mode}")


def encode_flow_targets(positions, mode="relative"):
    """Version vectorisée sur M x T x 3."""
    positions = np.asarray(positions, dtype=np.float64)
    if mode == "relative":
        return positions[:, 1:] - positions[:, :1]
    if mode == "incremental":
        return positions[:, 1:] - positions[:, :-1]
    if mode == "absolute":
        return positions[:, 1:].copy()
    raise ValueError(f"mode de cible inconnu : {mode}")


def decode_flow_targets(queries, targets, mode="relative", state_index=0):
    queries = np.asarray(queries, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if mode == "relative":
        return Flow(queries, targets, state_index)
    if mode == "incremental":
        points = queries[:, None, :] + np.cumsum(targets, axis=1)
    elif mode == "absolute":
        points = targets
    else:
        raise ValueError(f"mode de cible inconnu : {mode}")
    return Flow.from_points(np.concatenate([queries[:, None, :], points], axis=1), state_index)


def write_flows(path, flows):
    with open(path, "w") as f:
        for flow in flows:
            record = {
                "state_index": int(flow.state_index),
                "T": flow.horizon,
                "queries": flow.queries.tolist(),
                "offsets": flow.offsets.tolist(),
            }
            f.write(json.dumps(record) + "\n")


def read_flows(path):
    flows = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            record = json.loads(line)
            offsets = np.asarray(record["offsets"], dtype=np.float64).reshape(len(record["queries"]), record["T"] - 1, 3)
            flows.append(Flow(record["queries"], offsets, record["state_index"]))
    return flows
