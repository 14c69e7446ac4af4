"""Local observations and the CNN that embeds them into 32-d tokens."""
from __future__ import annotations

import numpy as np

from . import ndtensor as nd
from .ndtensor import ContractError, Tensor
from .world import CommGraph, SwarmState, WorldConfig

OBS_CHANNELS = 4
OBS_SIZE = 32
TOKEN_DIM = 32
CNN_CHANNELS = (4, 8, 16, 32)
FEATURE_SIZE = OBS_SIZE // 8  # spatial size after three stride-2 convolutions


def _window_origin(x: float, span: float, resolution: float) -> int:
    return int(np.floor((x - span / 2.0) / resolution + 0.5))


def _crop(grid: np.ndarray, ox: int, oy: int, w: int) -> np.ndarray:
    """``grid[ox:ox+w, oy:oy+w]`` with zeros outside the grid."""
    n = grid.shape[0]
    out = np.zeros((w, w))
    x0, x1 = max(ox, 0), min(ox + w, n)
    y0, y1 = max(oy, 0), min(oy + w, n)
    if x0 < x1 and y0 < y1:
        out[x0 - ox : x1 - ox, y0 - oy : y1 - oy] = grid[x0:x1, y0:y1]
    return out


def build_observation(state: SwarmState, robot: int, graph: CommGraph, config: WorldConfig) -> np.ndarray:
    """Return the (4, 32, 32) local map stack for one robot.

    Channels: sensed density, out-of-world indicator, neighbour x-offset,
    neighbour y-offset. Offsets are divided by the local-map span and splatted
    into the pixel containing the neighbour.
    """
    res = config.resolution
    span = config.local_map_span
    w = int(round(span / res))
    x, y = state.positions[robot]
    ox, oy = _window_origin(x, span, res), _window_origin(y, span, res)
    obs = np.zeros((OBS_CHANNELS, OBS_SIZE, OBS_SIZE))

    density = _crop(state.known_idf_of(robot), ox, oy, w)
    obs[0] = nd.bilinear_downsample(density, OBS_SIZE, OBS_SIZE) if w != OBS_SIZE else density

    pix = span / OBS_SIZE
    cx = ox * res + (np.arange(OBS_SIZE) + 0.5) * pix
    cy = oy * res + (np.arange(OBS_SIZE) + 0.5) * pix
    out_x = (cx < 0) | (cx > config.side_length)
    out_y = (cy < 0) | (cy > config.side_length)
    obs[1] = (out_x[:, None] | out_y[None, :]).astype(np.float64)

    for j in graph.neighbors(robot):
        px = int(np.floor((state.positions[j, 0] - ox * res) / pix))
        py = int(np.floor((state.positions[j, 1] - oy * res) / pix))
        if 0 <= px < OBS_SIZE and 0 <= py < OBS_SIZE:
            d = (state.positions[j] - state.positions[robot]) / span
            obs[2, px, py] += d[0]
            obs[3, px, py] += d[1]
    return obs


def build_observations(state: SwarmState, graph: CommGraph, config: WorldConfig) -> np.ndarray:
    return np.stack([build_observation(state, i, graph, config) for i in range(state.num_robots)])


def init_perception(rng: np.random.Generator, prefix: str = "cnn") -> dict:
    params = {}
    for layer, (cin, cout) in enumerate(zip(CNN_CHANNELS[:-1], CNN_CHANNELS[1:]), start=1):
        std = np.sqrt(2.0 / (cin * 9))
        params[f"{prefix}.conv{layer}.w"] = rng.normal(0.0, std, size=(cout, cin, 3, 3))
        params[f"{prefix}.conv{layer}.b"] = np.zeros(cout)
    flat = CNN_CHANNELS[-1] * FEATURE_SIZE * FEATURE_SIZE
    params[f"{prefix}.proj.w"] = rng.normal(0.0, np.sqrt(1.0 / flat), size=(flat, TOKEN_DIM))
    params[f"{prefix}.proj.b"] = np.zeros(TOKEN_DIM)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}


def encode(obs, params: dict, prefix: str = "cnn") -> Tensor:
    """Embed observations (..., 4, 32, 32) into tokens (..., 32)."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[-3:] != (OBS_CHANNELS, OBS_SIZE, OBS_SIZE):
        raise ContractError(f"observation must end in (4, 32, 32), got {obs.shape}")
    lead = obs.shape[:-3]
    h = Tensor(obs.reshape((-1, OBS_CHANNELS, OBS_SIZE, OBS_SIZE)))
    for layer in (1, 2, 3):
        h = nd.conv2d(h, params[f"{prefix}.conv{layer}.w"], params[f"{prefix}.conv{layer}.b"], stride=2, padding=1)
        h = nd.leaky_relu(h)
    # flatten rather than pool so the token keeps where things are in the map
    h = h.reshape((h.shape[0], -1))
    z = nd.matmul(h, params[f"{prefix}.proj.w"]) + params[f"{prefix}.proj.b"]
    return z.reshape(lead + (TOKEN_DIM,))
