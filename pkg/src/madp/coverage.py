"""Grid Voronoi tessellation, coverage cost and IDF-weighted centroids.

Everything is evaluated on the IDF grid itself, so the tessellation and the
cost integral are exactly consistent with each other.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .world import ImportanceField, cell_centers

_CHUNK = 1 << 16


@dataclass
class Tessellation:
    assignment: np.ndarray  # (nx, ny) robot index per cell
    positions: np.ndarray  # (N, 2) generating robots
    mass: np.ndarray  # (N,) IDF mass per cell
    centroids: np.ndarray  # (N, 2)


def _sq_dists(cells: np.ndarray, positions: np.ndarray) -> np.ndarray:
    diff = cells[:, None, :] - positions[None, :, :]
    return (diff * diff).sum(-1)


def _assign(positions, n: int, resolution: float):
    """Yield (slice, squared distances, nearest robot) for chunks of cells."""
    cells = cell_centers(n, resolution)
    for s in range(0, cells.shape[0], _CHUNK):
        d2 = _sq_dists(cells[s : s + _CHUNK], positions)
        yield slice(s, s + d2.shape[0]), d2, np.argmin(d2, axis=1)


def _moments(owner, phi, cells, nrob):
    mass = np.bincount(owner, weights=phi, minlength=nrob)
    mx = np.bincount(owner, weights=phi * cells[:, 0], minlength=nrob)
    my = np.bincount(owner, weights=phi * cells[:, 1], minlength=nrob)
    return mass, mx, my


def tessellate(positions, field: ImportanceField) -> Tessellation:
    """Assign every cell to its nearest robot (lowest index on ties)."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    if positions.shape[0] < 1:
        raise ValueError("tessellate needs at least one robot")
    n = field.grid.shape[0]
    assignment = np.empty(n * n, dtype=np.int64)
    for sl, _, owner in _assign(positions, n, field.resolution):
        assignment[sl] = owner
    tess = Tessellation(assignment.reshape(n, n), positions, np.zeros(0), np.zeros((0, 2)))
    tess.mass, tess.centroids = _mass_and_centroids(tess, field)
    return tess


def _mass_and_centroids(tess: Tessellation, field: ImportanceField):
    nrob = tess.positions.shape[0]
    mass, mx, my = _moments(tess.assignment.reshape(-1), field.grid.reshape(-1), field.cell_centers(), nrob)
    out = tess.positions.copy()
    has = mass > 0
    out[has, 0] = mx[has] / mass[has]
    out[has, 1] = my[has] / mass[has]
    return mass, out


def weighted_centroids(tess: Tessellation, field: ImportanceField) -> np.ndarray:
    """IDF-weighted centroid of every cell; zero-mass cells return the robot position."""
    return _mass_and_centroids(tess, field)[1]


def coverage_cost(positions, field: ImportanceField) -> float:
    """Sum over Voronoi cells of squared distance to the owning robot times IDF."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    phi = field.grid.reshape(-1)
    total = 0.0
    for sl, d2, owner in _assign(positions, field.grid.shape[0], field.resolution):
        total += float(np.dot(d2[np.arange(d2.shape[0]), owner], phi[sl]))
    return total * field.cell_area
