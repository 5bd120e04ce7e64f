import numpy as np

from src.pcgeom.cloud import GroupSet, PointCloud


def voxel_downsample(cloud, voxel):
    """Un point par voxel occupé, au barycentre ; sortie triée par indice de voxel."""
    if voxel <= 0:
        raise ValueError(f"taille de voxel invalide : {voxel}")
    if len(cloud) == 0:
        return PointCloud.empty()
    keys = np.floor(cloud.positions / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n_vox = len(counts)

    def _average(values):
        out = np.zeros((n_vox, values.shape[1]))
        np.add.at(out, inverse, values)
        return out / counts[:, None]

    positions = _average(cloud.positions)
    colors = np.clip(_average(cloud.colors), 0.0, 1.0)
    flags = _average(cloud.effector_flag[:, None])[:, 0]
    return PointCloud(positions, colors, (flags >= 0.5).astype(np.float64))


def farthest_point_sample(positions, n_samples, seed_index=0):
    """FPS glouton ; égalités -> plus petit indice."""
    positions = np.asarray(positions.positions if isinstance(positions, PointCloud) else positions, dtype=np.float64)
    n = len(positions)
    if n_samples < 1 or n_samples > n:
        raise ValueError(f"impossible de tirer {n_samples} centres parmi {n} points")
    if not 0 <= seed_index < n:
        raise ValueError(f"indice de départ hors limites : {seed_index}")
    chosen = [int(seed_index)]
    min_d = np.sum((positions - positions[seed_index]) ** 2, axis=1)
    min_d[seed_index] = -1.0
    for _ in range(n_samples - 1):
        nxt = int(np.argmax(min_d))
        chosen.append(nxt)
        min_d = np.minimum(min_d, np.sum((positions - positions[nxt]) ** 2, axis=1))
        min_d[chosen] = -1.0
    return np.asarray(chosen, dtype=np.int64)


def group_points(cloud, centers, k):
    """k plus proches voisins de chaque centre (lui compris), positions centrées."""
    if k < 1:
        raise ValueError(f"taille de groupe invalide : {k}")
    centers = np.asarray(centers, dtype=np.int64)
    pos = cloud.positions
    d = np.sum((pos[centers][:, None, :] - pos[None, :, :]) ** 2, axis=-1)
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    if order.shape[1] < k:
        # Nuage trop petit : on répète le plus proche
        pad = np.repeat(order[:, :1], k - order.shape[1], axis=1)
        order = np.concatenate([order, pad], axis=1)
    rows = cloud.as_rows()[order]
    rows[..., :3] -= pos[centers][:, None, :]
    return GroupSet(pos[centers].copy(), centers, order, rows)


def crop(cloud, box):
    """Garde les points dans la boîte, exprimés dans le repère de son centre."""
    mask = box.contains(cloud.positions)
    return PointCloud(recenter(cloud.positions[mask], box.center), cloud.colors[mask], cloud.effector_flag[mask])


def recenter(points, origin):
    return np.asarray(points, dtype=np.float64) - np.asarray(origin, dtype=np.float64)
