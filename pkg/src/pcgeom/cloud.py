from dataclasses import dataclass

import numpy as np


@dataclass(eq=False)
class PointCloud:
    """Nuage XYZ + RGB + canal indicateur d'effecteur (robot / main)."""
    positions: np.ndarray
    colors: np.ndarray
    effector_flag: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        self.effector_flag = np.asarray(self.effector_flag, dtype=np.float64).reshape(-1)
        n = len(self.positions)
        if len(self.colors) != n or len(self.effector_flag) != n:
            raise ValueError(f"tailles incohérentes : {n} positions, {len(self.colors)} couleurs, {len(self.effector_flag)} indicateurs")
        if n and (self.colors.min() < 0.0 or self.colors.max() > 1.0):
            raise ValueError("couleurs hors de [0, 1]")
        if n and not np.all((self.effector_flag == 0.0) | (self.effector_flag == 1.0)):
            raise ValueError("l'indicateur d'effecteur doit être binaire")

    def __len__(self):
        return len(self.positions)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))

    @classmethod
    def from_rows(cls, rows):
        rows = np.asarray(rows, dtype=np.float64).reshape(-1, 7)
        return cls(rows[:, :3], rows[:, 3:6], rows[:, 6])

    def as_rows(self):
        """Lignes N x 7 (xyz, rgb, indicateur)."""
        return np.concatenate([self.positions, self.colors, self.effector_flag[:, None]], axis=1)

    def subset(self, indices):
        return PointCloud(self.positions[indices], self.colors[indices], self.effector_flag[indices])

    def with_positions(self, positions):
        return PointCloud(positions, self.colors.copy(), self.effector_flag.copy())

    def translated(self, offset):
        return self.with_positions(self.positions + np.asarray(offset, dtype=np.float64))


@dataclass(eq=False)
class CropBox:
    """Boîte alignée sur le repère monde, centrée sur la pince."""
    center: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.half_extents = np.asarray(self.half_extents, dtype=np.float64).reshape(3)
        if np.any(self.half_extents <= 0):
            raise ValueError(f"demi-dimensions non positives : {self.half_extents}")

    def contains(self, positions):
        return np.all(np.abs(np.asarray(positions) - self.center) <= self.half_extents, axis=-1)


@dataclass(eq=False)
class GroupSet:
    centers: np.ndarray          # G x 3 (x_0 de chaque groupe)
    center_indices: np.ndarray   # G
    member_indices: np.ndarray   # G x k
    features: np.ndarray         # G x k x 7, xyz centrés sur le groupe

    @property
    def size(self):
        return len(self.centers)
