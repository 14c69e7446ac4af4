"""Noise schedule, DDPM training loss, DDIM sampling and the MADP policy."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import ndtensor as nd
from . import perception, stformer
from .ndtensor import ContractError, Tensor
from .stformer import STConfig
from .world import CommGraph, SwarmState, WorldConfig, clamp_norm


class NoiseSchedule:
    """Linear alpha schedule with cumulative products.

    ``alphas[k-1]`` is alpha_k for k = 1..K; ``alpha_bar(0) == 1``.
    """

    def __init__(self, steps: int = 1000, alpha_start: float = 0.9999, alpha_end: float = 0.98):
        if steps < 1:
            raise ContractError("schedule needs at least one step")
        self.steps = steps
        self.alphas = np.linspace(alpha_start, alpha_end, steps)
        if not np.all((self.alphas > 0) & (self.alphas < 1)):
            raise ContractError("alphas must lie in (0, 1)")
        self._bars = np.concatenate([[1.0], np.cumprod(self.alphas)])

    @property
    def alpha_bars(self) -> np.ndarray:
        return self._bars[1:]

    def alpha_bar(self, k):
        return self._bars[np.asarray(k)]

    def alpha(self, k):
        return self.alphas[np.asarray(k) - 1]

    def ddim_steps(self, s: int) -> np.ndarray:
        """S evenly spaced steps, decreasing, from K down to 1."""
        if s < 1 or s > self.steps:
            raise ContractError(f"need 1 <= S <= K, got S={s}, K={self.steps}")
        if s == 1:
            return np.array([self.steps])
        ks = np.round(np.linspace(self.steps, 1, s)).astype(int)
        if np.any(np.diff(ks) >= 0):
            raise ContractError("DDIM subset must be strictly decreasing")
        return ks


def forward_sample(u0, k, eps, schedule: NoiseSchedule):
    """U_k = sqrt(abar_k) U_0 + sqrt(1 - abar_k) eps. ``k`` may be per batch row."""
    u0 = np.asarray(u0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    k = np.asarray(k)
    if np.any(k < 1) or np.any(k > schedule.steps):
        raise ContractError("diffusion step outside 1..K")
    ab = schedule.alpha_bar(k)
    ab = ab.reshape(ab.shape + (1,) * (u0.ndim - ab.ndim))
    return np.sqrt(ab) * u0 + np.sqrt(1.0 - ab) * eps


def ddpm_loss(score, u0, schedule: NoiseSchedule, rng: np.random.Generator, k=None, eps=None) -> Tensor:
    """Mean squared error between drawn noise and ``score(U_k, k)``.

    ``u0`` is (B, ...) with one diffusion step per leading row. ``score``
    returns a Tensor shaped like ``u0``.
    """
    u0 = np.asarray(u0, dtype=np.float64)
    if k is None:
        k = rng.integers(1, schedule.steps + 1, size=u0.shape[0])
    if eps is None:
        eps = rng.standard_normal(u0.shape)
    u_k = forward_sample(u0, k, eps, schedule)
    return nd.mse_loss(score(u_k, k), eps)


def ddim_constants(schedule: NoiseSchedule, k: int, k_prev: int, eta: float):
    """(c0, c1, c2, sigma) for the update U' = c0 U + (c2 - c0 c1) eps_hat + sigma z."""
    ab, ab_prev = schedule.alpha_bar(k), schedule.alpha_bar(k_prev)
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab)) * np.sqrt(1.0 - ab / ab_prev)
    c0 = np.sqrt(ab_prev / ab)
    c1 = np.sqrt(1.0 - ab)
    c2 = np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0))
    return c0, c1, c2, sigma


def ddim_sample(eps_model, shape, schedule: NoiseSchedule, steps: int = 50, eta: float = 0.0, rng=None, noise=None,
                clip: float | None = None):
    """Reverse diffusion from N(0, I) to U_0.

    ``eps_model(u, k)`` returns predicted noise as an array. Randomness comes
    from ``noise`` (shape (S+1, *shape); row 0 is the prior) when given,
    otherwise from ``rng``. With ``clip`` the implied clean sample is clipped
    to [-clip, clip] at every step and the noise estimate recomputed from it.
    """
    ks = schedule.ddim_steps(steps)
    if noise is None:
        if rng is None:
            raise ContractError("ddim_sample needs rng or noise")
        noise = rng.standard_normal((len(ks) + 1,) + tuple(shape))
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (len(ks) + 1,) + tuple(shape):
        raise ContractError(f"noise must have shape {(len(ks) + 1,) + tuple(shape)}")
    u = noise[0].copy()
    for i, k in enumerate(ks):
        k_prev = int(ks[i + 1]) if i + 1 < len(ks) else 0
        c0, c1, c2, sigma = ddim_constants(schedule, int(k), k_prev, eta)
        eps_hat = np.asarray(eps_model(u, int(k)), dtype=np.float64)
        if clip is not None:
            ab = schedule.alpha_bar(int(k))
            u0_hat = np.clip((u - c1 * eps_hat) / np.sqrt(ab), -clip, clip)
            eps_hat = (u - np.sqrt(ab) * u0_hat) / c1
        u = c0 * u + (c2 - c0 * c1) * eps_hat
        if sigma > 0:
            u = u + sigma * noise[i + 1]
    return u


# ---------------------------------------------------------------------------
# the MADP network


@dataclass(frozen=True)
class ModelConfig:
    st: STConfig = dc_field(default_factory=STConfig)
    diffusion_steps: int = 1000
    alpha_start: float = 0.9999
    alpha_end: float = 0.98
    sample_steps: int = 50
    eta: float = 0.0
    position_scale: float = 1024.0  # positions in the token are divided by this
    clip_sample: bool = True  # keep sampled actions inside the normalised range

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        st = overrides.pop("st", None) or STConfig.desk(rope_period=256.0)
        base = dict(st=st, position_scale=256.0)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["st"] = self.st.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["st"] = STConfig(**d.get("st", {}))
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.diffusion_steps, self.alpha_start, self.alpha_end)


class MADPModel:
    """CNN + encoder + denoiser, with a flat name -> Tensor parameter dict."""

    def __init__(self, config: ModelConfig, params: dict | None = None, seed: int = 0):
        self.config = config
        self.schedule = config.schedule()
        if params is None:
            rng = np.random.default_rng(seed)
            raw = {}
            raw.update({k: v.data for k, v in perception.init_perception(rng).items()})
            raw.update(stformer.init_encoder(rng, config.st, perception.TOKEN_DIM + 2))
            raw.update(stformer.init_decoder(rng, config.st))
            params = {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}
        self.params = params

    @property
    def st(self) -> STConfig:
        return self.config.st

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def tokens(self, obs) -> Tensor:
        """Per-robot perceptual tokens z_i (…, N, 32)."""
        return perception.encode(obs, self.params)

    def condition(self, z, positions, mask, attention_log=None) -> Tensor:
        pos = np.asarray(positions, dtype=np.float64)
        z0 = nd.concat([nd.as_tensor(z), Tensor(pos / self.config.position_scale)], axis=-1)
        return stformer.encode(z0, pos, mask, self.params, self.st, attention_log=attention_log)

    def denoise(self, u_k, positions, c, mask, k, attention_log=None) -> Tensor:
        return stformer.decode(u_k, positions, c, mask, self.params, self.st, k, attention_log=attention_log)

    def loss(self, batch: dict, rng: np.random.Generator, k=None, eps=None) -> Tensor:
        """DDPM loss on a batch with keys U0 (B,N,2), O (B,N,4,32,32), X (B,N,2), M (B,N,N)."""
        c = self.condition(self.tokens(batch["O"]), batch["X"], batch["M"])
        return ddpm_loss(
            lambda u, kk: self.denoise(u, batch["X"], c, batch["M"], kk),
            batch["U0"],
            self.schedule,
            rng,
            k=k,
            eps=eps,
        )

    def sample(self, obs, positions, mask, steps=None, eta=None, rng=None, noise=None) -> np.ndarray:
        """Normalised actions (N, 2). The encoder runs once; the denoiser S times."""
        steps = self.config.sample_steps if steps is None else steps
        eta = self.config.eta if eta is None else eta
        positions = np.asarray(positions, dtype=np.float64)
        with nd.no_grad():
            c = self.condition(self.tokens(obs), positions, mask)
            return ddim_sample(
                lambda u, k: self.denoise(u, positions, c, mask, k).data,
                positions.shape,
                self.schedule,
                steps,
                eta,
                rng=rng,
                noise=noise,
                clip=1.0 if self.config.clip_sample else None,
            )

    def save(self, path) -> None:
        path = Path(path)
        nd.save_params(self.params, path)
        path.with_suffix(".model.json").write_text(json.dumps(self.config.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "MADPModel":
        path = Path(path)
        config = ModelConfig.from_dict(json.loads(path.with_suffix(".model.json").read_text()))
        return cls(config, nd.load_params(path))

    def copy_params(self) -> dict:
        return {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}


def policy_noise(seed: int, t: int, robots, steps: int, prior_seed: int | None = None) -> np.ndarray:
    """Sampler noise (S+1, len(robots), 2); column j comes from stream (seed, robot j, t).

    With ``prior_seed`` the prior row is drawn from (prior_seed, robot j, t)
    instead, so runs with different ``seed`` share their starting noise.
    """
    robots = [int(j) for j in robots]
    noise = np.zeros((steps + 1, len(robots), 2))
    for col, j in enumerate(robots):
        noise[:, col] = np.random.default_rng([seed, j, t]).standard_normal((steps + 1, 2))
        if prior_seed is not None:
            noise[0, col] = np.random.default_rng([prior_seed, j, t]).standard_normal((steps + 1, 2))[0]
    return noise


def policy_step(
    model: MADPModel,
    state: SwarmState,
    graph: CommGraph,
    config: WorldConfig,
    seed: int = 0,
    decentralized: bool = False,
    steps: int | None = None,
    eta: float | None = None,
    obs=None,
    prior_seed: int | None = None,
) -> np.ndarray:
    """Physical velocity actions (N, 2) for the whole swarm.

    In decentralized mode robot i runs the sampler over its attention
    neighbourhood only (row i of the mask) and keeps its own column.
    """
    steps = model.config.sample_steps if steps is None else steps
    n_steps = len(model.schedule.ddim_steps(steps))
    if obs is None:
        obs = perception.build_observations(state, graph, config)
    pos = state.positions
    mask = stformer.build_mask(pos, graph, model.st.attention_radius)
    if not decentralized:
        noise = policy_noise(seed, state.t, range(state.num_robots), n_steps, prior_seed)
        u = model.sample(obs, pos, mask, steps, eta, noise=noise)
    else:
        u = np.zeros_like(pos)
        for i in range(state.num_robots):
            group = np.flatnonzero(mask[i])
            me = int(np.searchsorted(group, i))
            noise = policy_noise(seed, state.t, group, n_steps, prior_seed)
            sub = model.sample(obs[group], pos[group], mask[np.ix_(group, group)], steps, eta, noise=noise)
            u[i] = sub[me]
    return clamp_norm(u * config.u_max, config.u_max)
