"""Coverage-control environment: importance field, kinematics, sensing, comms."""
from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .ndtensor import ContractError


@dataclass(frozen=True)
class WorldConfig:
    side_length: float = 1024.0
    resolution: float = 1.0
    num_robots: int = 32
    num_features: int = 32
    sigma_range: tuple = (40.0, 60.0)
    peak_range: tuple = (0.6, 1.0)
    truncation: float = 2.0
    sensor_fov: float = 64.0
    local_map_span: float = 256.0
    comm_radius: float = 256.0
    u_max: float = 5.0
    dt: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sigma_range", tuple(float(v) for v in self.sigma_range))
        object.__setattr__(self, "peak_range", tuple(float(v) for v in self.peak_range))
        self.validate()

    def validate(self):
        cells = self.side_length / self.resolution
        if self.resolution <= 0 or abs(cells - round(cells)) > 1e-9:
            raise ContractError("side_length must be a multiple of resolution")
        if not (0 < self.sensor_fov <= self.local_map_span <= self.side_length):
            raise ContractError("need 0 < sensor_fov <= local_map_span <= side_length")
        lo, hi = self.sigma_range
        if not 0 < lo <= hi:
            raise ContractError("sigma_range must satisfy 0 < min <= max")
        plo, phi = self.peak_range
        if not 0 < plo <= phi <= 1:
            raise ContractError("peak_range must lie within (0, 1]")
        if self.num_robots < 1 or self.num_features < 0:
            raise ContractError("num_robots >= 1 and num_features >= 0 required")
        if self.u_max <= 0 or self.dt <= 0:
            raise ContractError("u_max and dt must be positive")

    @property
    def cells(self) -> int:
        return int(round(self.side_length / self.resolution))

    @classmethod
    def desk(cls, **overrides) -> "WorldConfig":
        """Small preset used by tests and CI-speed experiments."""
        base = dict(side_length=256.0, resolution=4.0, num_robots=4, num_features=4)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> "WorldConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sigma_range"] = list(self.sigma_range)
        d["peak_range"] = list(self.peak_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown world config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "WorldConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


@dataclass
class ImportanceField:
    """IDF sampled at cell centres. ``grid[ix, iy]`` sits at ((ix+.5)r, (iy+.5)r)."""

    grid: np.ndarray
    resolution: float
    features: np.ndarray = dc_field(default_factory=lambda: np.zeros((0, 4)))

    @property
    def side_length(self) -> float:
        return self.grid.shape[0] * self.resolution

    @property
    def cell_area(self) -> float:
        return self.resolution**2

    def cell_centers(self) -> np.ndarray:
        """(nx*ny, 2) centres in the same order as ``grid.reshape(-1)``."""
        return cell_centers(self.grid.shape[0], self.resolution)

    def scaled(self, factor: float) -> "ImportanceField":
        return ImportanceField(self.grid * factor, self.resolution, self.features.copy())


def cell_centers(n: int, resolution: float) -> np.ndarray:
    c = (np.arange(n) + 0.5) * resolution
    gx, gy = np.meshgrid(c, c, indexing="ij")
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)


def field_from_features(features, config: WorldConfig) -> ImportanceField:
    """Sum truncated isotropic Gaussians given as rows (mu_x, mu_y, sigma, peak)."""
    features = np.asarray(features, dtype=np.float64).reshape(-1, 4)
    n = config.cells
    c = (np.arange(n) + 0.5) * config.resolution
    grid = np.zeros((n, n))
    for mx, my, sigma, peak in features:
        dx2 = (c - mx) ** 2
        dy2 = (c - my) ** 2
        d2 = dx2[:, None] + dy2[None, :]
        g = peak * np.exp(-d2 / (2.0 * sigma**2))
        g[d2 > (config.truncation * sigma) ** 2] = 0.0
        grid += g
    np.maximum(grid, 0.0, out=grid)
    return ImportanceField(grid, config.resolution, features)


def sample_features(config: WorldConfig, rng: np.random.Generator) -> np.ndarray:
    f = config.num_features
    mu = rng.uniform(0.0, config.side_length, size=(f, 2))
    sigma = rng.uniform(*config.sigma_range, size=f)
    peak = rng.uniform(*config.peak_range, size=f)
    return np.column_stack([mu, sigma, peak]) if f else np.zeros((0, 4))


def generate_field(config: WorldConfig, rng: np.random.Generator) -> ImportanceField:
    return field_from_features(sample_features(config, rng), config)


def load_point_features(path, config: WorldConfig) -> ImportanceField:
    """Read ``x,y[,sigma][,peak]`` rows; missing columns take range midpoints / 1.0."""
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.reader(fh):
            if not raw or raw[0].strip().startswith("#"):
                continue
            try:
                vals = [float(v) for v in raw if v.strip() != ""]
            except ValueError:
                if rows:
                    raise
                continue  # header line
            if len(vals) < 2:
                raise ContractError(f"point feature row needs x,y: {raw}")
            sigma = vals[2] if len(vals) > 2 else 0.5 * sum(config.sigma_range)
            peak = vals[3] if len(vals) > 3 else 1.0
            rows.append((vals[0], vals[1], sigma, peak))
    return field_from_features(np.array(rows).reshape(-1, 4), config)


@dataclass
class SwarmState:
    positions: np.ndarray
    explored: np.ndarray  # (N, nx, ny) bool
    field: ImportanceField
    t: int = 0

    @property
    def num_robots(self) -> int:
        return self.positions.shape[0]

    @property
    def known_idf(self) -> np.ndarray:
        """Per-robot IDF: true values on explored cells, zero elsewhere."""
        return np.where(self.explored, self.field.grid[None], 0.0)

    def known_idf_of(self, robot: int) -> np.ndarray:
        return np.where(self.explored[robot], self.field.grid, 0.0)

    def copy(self) -> "SwarmState":
        return SwarmState(self.positions.copy(), self.explored.copy(), self.field, self.t)


def _fov_range(center: float, half: float, resolution: float, n: int):
    lo = int(np.ceil((center - half) / resolution - 0.5))
    hi = int(np.ceil((center + half) / resolution - 0.5))
    return max(lo, 0), min(hi, n)


def sense(state: SwarmState, config: WorldConfig) -> SwarmState:
    """Mark each robot's sensor square as explored (in place) and return the state."""
    n = state.field.grid.shape[0]
    half = config.sensor_fov / 2.0
    for i, (x, y) in enumerate(state.positions):
        x0, x1 = _fov_range(x, half, config.resolution, n)
        y0, y1 = _fov_range(y, half, config.resolution, n)
        state.explored[i, x0:x1, y0:y1] = True
    return state


def init_state(config: WorldConfig, field: ImportanceField, positions) -> SwarmState:
    positions = np.clip(np.asarray(positions, dtype=np.float64), 0.0, config.side_length)
    n = field.grid.shape[0]
    explored = np.zeros((positions.shape[0], n, n), dtype=bool)
    return sense(SwarmState(positions, explored, field, 0), config)


def clamp_norm(u, u_max: float) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    norm = np.linalg.norm(u, axis=-1, keepdims=True)
    factor = np.minimum(1.0, u_max / np.maximum(norm, 1e-300))
    return u * factor


def step(state: SwarmState, actions, config: WorldConfig) -> SwarmState:
    actions = np.asarray(actions, dtype=np.float64)
    if actions.shape != state.positions.shape:
        raise ContractError(f"actions shape {actions.shape} != positions {state.positions.shape}")
    if not np.all(np.isfinite(actions)):
        raise ContractError("actions must be finite")
    u = clamp_norm(actions, config.u_max)
    pos = np.clip(state.positions + config.dt * u, 0.0, config.side_length)
    nxt = SwarmState(pos, state.explored.copy(), state.field, state.t + 1)
    return sense(nxt, config)


@dataclass
class CommGraph:
    adjacency: np.ndarray  # (N, N) bool
    components: np.ndarray  # (N,) int

    def neighbors(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.adjacency[i])


def pairwise_distances(positions) -> np.ndarray:
    p = np.asarray(positions, dtype=np.float64)
    diff = p[:, None, :] - p[None, :, :]
    return np.sqrt((diff**2).sum(-1))


def comm_graph(positions, r_c: float) -> CommGraph:
    d = pairwise_distances(positions)
    adj = d <= r_c
    np.fill_diagonal(adj, False)
    _, labels = connected_components(csr_matrix(adj), directed=False)
    return CommGraph(adj, labels.astype(int))
