from dataclasses import dataclass

import numpy as np

from src.flowkit.flow import encode_flow_targets, trajectory_widths


@dataclass(eq=False)
class QueryBatch:
    queries: np.ndarray       # N_q x 3
    targets: np.ndarray       # N_q x (T-1) x 3
    moving_mask: np.ndarray   # N_q booléens
    indices: np.ndarray       # indices des trajectoires tirées
    moving_ratio: float       # p_m tiré pour ce lot


def _take(rng, pool, count):
    if count <= 0 or len(pool) == 0:
        return np.zeros(0, dtype=np.int64)
    return rng.choice(pool, size=min(count, len(pool)), replace=False)


def sample_query_batch(positions, n_queries, rng, eps, moving_ratio=None, mode="relative"):
    """
    Tire N_q trajectoires : round(p_m N_q) mobiles et le reste statiques, p_m ~ U(0, 1).
    Une classe trop petite est complétée par l'autre.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if len(positions) == 0:
        raise ValueError("aucune trajectoire à échantillonner")
    p_m = float(rng.uniform(0.0, 1.0)) if moving_ratio is None else float(moving_ratio)
    moving = trajectory_widths(positions) >= eps
    moving_pool = np.flatnonzero(moving)
    static_pool = np.flatnonzero(~moving)

    n_move = int(np.floor(p_m * n_queries + 0.5))
    n_static = n_queries - n_move
    if n_move > len(moving_pool):
        n_static += n_move - len(moving_pool)
        n_move = len(moving_pool)
    if n_static > len(static_pool):
        n_move = min(len(moving_pool), n_move + n_static - len(static_pool))
        n_static = len(static_pool)

    picked = np.concatenate([_take(rng, moving_pool, n_move), _take(rng, static_pool, n_static)])
    if len(picked) < n_queries:
        # Moins de trajectoires que N_q : tirage avec remise pour garder une forme fixe
        extra = rng.choice(len(positions), size=n_queries - len(picked), replace=True)
        picked = np.concatenate([picked, extra])
    picked = picked.astype(np.int64)
    chosen = positions[picked]
    return QueryBatch(
        queries=chosen[:, 0].copy(),
        targets=encode_flow_targets(chosen, mode),
        moving_mask=moving[picked],
        indices=picked,
        moving_ratio=p_m,
    )


def grid_query_indices(cloud, box, spacing):
    """Indices des points de la boîte les plus proches du centre de chaque cellule occupée."""
    if spacing <= 0:
        raise ValueError(f"pas de grille invalide : {spacing}")
    inside = np.flatnonzero(box.contains(cloud.positions))
    if len(inside) == 0:
        return np.zeros(0, dtype=np.int64)
    low = box.center - box.half_extents
    n_cells = np.maximum(np.ceil(2 * box.half_extents / spacing).astype(np.int64), 1)
    pts = cloud.positions[inside]
    cells = np.clip(np.floor((pts - low) / spacing).astype(np.int64), 0, n_cells - 1)
    centers = low + (cells + 0.5) * spacing
    dist = np.sum((pts - centers) ** 2, axis=1)
    # Tri par cellule (ordre de grille), puis distance, puis indice
    order = np.lexsort((inside, dist, cells[:, 2], cells[:, 1], cells[:, 0]))
    cells_sorted = cells[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = np.any(cells_sorted[1:] != cells_sorted[:-1], axis=1)
    return inside[order[first]]


def grid_queries_in_box(cloud, box, spacing):
    return cloud.positions[grid_query_indices(cloud, box, spacing)].copy()


def subsample_grid_order(count, cap):
    """Au plus `cap` indices répartis régulièrement dans l'ordre de grille."""
    if count <= cap:
        return np.arange(count)
    return np.unique(np.round(np.linspace(0, count - 1, cap)).astype(np.int64))
