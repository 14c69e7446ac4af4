"""Voronoi-based controllers: the clairvoyant expert and decentralized CVT."""
from __future__ import annotations

import numpy as np

from .coverage import tessellate
from .world import CommGraph, ImportanceField, SwarmState, clamp_norm


def clairvoyant_action(positions, field: ImportanceField, u_max: float, dt: float = 1.0) -> np.ndarray:
    """One Lloyd step on the true IDF: chase the weighted centroid, clamped to u_max."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    centroids = tessellate(positions, field).centroids
    return clamp_norm((centroids - positions) / dt, u_max)


def dcvt_action(state: SwarmState, graph: CommGraph, u_max: float, dt: float = 1.0) -> np.ndarray:
    """Per-robot Lloyd step using one-hop neighbour positions and own sensed IDF."""
    out = np.zeros_like(state.positions)
    for i in range(state.num_robots):
        known = state.known_idf_of(i)
        if not known.any():
            continue
        # sorted global indices keep the lowest-index tie rule consistent with the centralized expert
        group = np.sort(np.concatenate([[i], graph.neighbors(i)]))
        me = int(np.searchsorted(group, i))
        local = ImportanceField(known, state.field.resolution)
        tess = tessellate(state.positions[group], local)
        out[i] = (tess.centroids[me] - state.positions[i]) / dt
    return clamp_norm(out, u_max)
