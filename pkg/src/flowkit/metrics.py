import numpy as np


def displacement_errors(fpred, ftrue):
    """Erreurs ‖F̂_i - F_i‖ en positions absolues, M x T."""
    if fpred.queries.shape != ftrue.queries.shape or fpred.offsets.shape != ftrue.offsets.shape:
        raise ValueError(f"flots non appariés : {fpred.offsets.shape} vs {ftrue.offsets.shape}")
    return np.linalg.norm(fpred.positions - ftrue.positions, axis=-1)


def ade(fpred, ftrue):
    # Moyenne sur toutes les paires (trajectoire, instant)
    return float(displacement_errors(fpred, ftrue).mean())


def fde(fpred, ftrue):
    return float(displacement_errors(fpred, ftrue)[:, -1].mean())
