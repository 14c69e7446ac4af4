"""Spatial transformer: masked multi-head attention with 2-D rotary encoding.

Tokens are stored row-wise, ``(B, N, d)``: one row per agent. Unbatched
``(N, d)`` inputs are accepted everywhere and returned unbatched.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .ndtensor import ContractError, Tensor
from .world import CommGraph, pairwise_distances


@dataclass(frozen=True)
class STConfig:
    layers: int = 8
    heads: int = 8
    head_dim: int = 32
    rope_period: float = 1024.0
    attention_radius: float = 256.0
    pre_norm: bool = True

    def __post_init__(self):
        if self.head_dim % 4:
            raise ContractError("head_dim must be divisible by 4 for 2-D RoPE")
        if self.layers < 1 or self.heads < 1:
            raise ContractError("need at least one layer and one head")

    @property
    def d_model(self) -> int:
        return self.heads * self.head_dim

    @classmethod
    def desk(cls, **overrides) -> "STConfig":
        base = dict(layers=2, heads=2, head_dim=16)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# masks and rotary phases


def build_mask(positions, graph, r_att: float) -> np.ndarray:
    """M_att = (distance <= r_att) AND (same communication component); diagonal set."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    comps = graph.components if isinstance(graph, CommGraph) else np.asarray(graph)
    window = pairwise_distances(positions) <= r_att
    same = comps[:, None] == comps[None, :]
    mask = window & same
    np.fill_diagonal(mask, True)
    return mask


@dataclass
class RopeBasis:
    frequencies: np.ndarray  # (D/4,)
    phases: np.ndarray  # (N, D/2) complex, unit modulus

    @property
    def angles(self) -> np.ndarray:
        return np.angle(self.phases)


def rope_frequencies(dim: int, tau: float) -> np.ndarray:
    if dim % 4:
        raise ContractError("RoPE dimension must be divisible by 4")
    i = np.arange(1, dim // 4 + 1)
    return 2.0 * np.pi * tau ** (-4.0 * i / dim)


def rope_angles(positions, dim: int, tau: float) -> np.ndarray:
    """Real angles (..., N, D/2): column 2c uses x, column 2c+1 uses y, both at omega_c."""
    positions = np.asarray(positions, dtype=np.float64)
    w = rope_frequencies(dim, tau)
    ang = np.empty(positions.shape[:-1] + (dim // 2,))
    ang[..., 0::2] = positions[..., 0:1] * w
    ang[..., 1::2] = positions[..., 1:2] * w
    return ang


def rope_phases(positions, dim: int, tau: float) -> RopeBasis:
    return RopeBasis(rope_frequencies(dim, tau), np.exp(1j * rope_angles(positions, dim, tau)))


# ---------------------------------------------------------------------------
# parameters


def _linear(rng, fan_in, fan_out, scale=1.0):
    return rng.normal(0.0, scale * np.sqrt(1.0 / fan_in), size=(fan_in, fan_out))


def init_attention(rng, prefix: str, cfg: STConfig, cross: bool = False) -> dict:
    d, da = cfg.d_model, cfg.heads * cfg.head_dim
    p = {
        f"{prefix}.ln.g": np.ones(d),
        f"{prefix}.ln.b": np.zeros(d),
        f"{prefix}.wq": _linear(rng, d, da),
        f"{prefix}.wk": _linear(rng, d, da),
        f"{prefix}.wv": _linear(rng, d, da),
        f"{prefix}.wo": _linear(rng, da, d, 0.5),
        f"{prefix}.bo": np.zeros(d),
    }
    if cross:
        p[f"{prefix}.lnc.g"] = np.ones(d)
        p[f"{prefix}.lnc.b"] = np.zeros(d)
    return p


def decoder_block_is_cross(layer: int) -> bool:
    """Decoder blocks alternate self-attention (even) and cross-attention (odd)."""
    return layer % 2 == 1


def init_encoder(rng, cfg: STConfig, token_dim: int = 34, prefix: str = "enc") -> dict:
    p = {f"{prefix}.in.w": _linear(rng, token_dim, cfg.d_model), f"{prefix}.in.b": np.zeros(cfg.d_model)}
    for layer in range(cfg.layers):
        p.update(init_attention(rng, f"{prefix}.{layer}", cfg))
    p[f"{prefix}.out.g"] = np.ones(cfg.d_model)
    p[f"{prefix}.out.b"] = np.zeros(cfg.d_model)
    return p


def init_decoder(rng, cfg: STConfig, action_dim: int = 2, prefix: str = "dec") -> dict:
    d = cfg.d_model
    p = {
        f"{prefix}.in.w": _linear(rng, action_dim, d),
        f"{prefix}.in.b": np.zeros(d),
        f"{prefix}.time.w": _linear(rng, d, d),
        f"{prefix}.time.b": np.zeros(d),
    }
    for layer in range(cfg.layers):
        p.update(init_attention(rng, f"{prefix}.{layer}", cfg, cross=decoder_block_is_cross(layer)))
    p[f"{prefix}.out.g"] = np.ones(d)
    p[f"{prefix}.out.b"] = np.zeros(d)
    p[f"{prefix}.out.w"] = _linear(rng, d, action_dim, 0.1)
    p[f"{prefix}.out.bias"] = np.zeros(action_dim)
    return p


# ---------------------------------------------------------------------------
# forward passes


def _norm(x, params, key):
    return nd.layer_norm(x) * params[key + ".g"] + params[key + ".b"]


def _batched(*arrays):
    """Add a leading batch axis to unbatched inputs; report whether we did."""
    z = arrays[0]
    squeeze = z.ndim == 2
    if not squeeze:
        return squeeze, arrays
    out = [nd.reshape(z, (1,) + z.shape)]
    for a in arrays[1:]:
        out.append(None if a is None else (a[None] if isinstance(a, np.ndarray) else nd.reshape(a, (1,) + a.shape)))
    return squeeze, tuple(out)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, _ = x.shape
    return nd.transpose(x.reshape(b, n, heads, -1), (0, 2, 1, 3))


def attention_layer(
    z,
    positions,
    mask,
    params: dict,
    prefix: str,
    cfg: STConfig,
    first_layer: bool = False,
    context=None,
    return_attention: bool = False,
):
    """One masked multi-head attention block with skip connection.

    ``Z' = leaky(concat_h(A_h V_h LN(Z)) W + b + Z)``. Queries come from ``z``;
    keys and values come from ``context`` (cross-attention) or ``z`` itself.
    In the first layer queries and keys are rotated by the agents' RoPE
    phases, which makes the logits depend on relative positions only.
    """
    z = nd.as_tensor(z)
    positions = np.asarray(positions, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    context = None if context is None else nd.as_tensor(context)
    squeeze, (z, positions, mask, context) = _batched(z, positions, mask, context)

    h, dh = cfg.heads, cfg.head_dim
    zq = _norm(z, params, prefix + ".ln") if cfg.pre_norm else z
    if context is None:
        zk = zq
    else:
        zk = _norm(context, params, prefix + ".lnc") if cfg.pre_norm else context
    q = _split_heads(nd.matmul(zq, params[prefix + ".wq"]), h)
    k = _split_heads(nd.matmul(zk, params[prefix + ".wk"]), h)
    v = _split_heads(nd.matmul(zk, params[prefix + ".wv"]), h)
    if first_layer:
        ang = rope_angles(positions, dh, cfg.rope_period)[:, None]  # (B, 1, N, dh/2)
        cos, sin = np.cos(ang), np.sin(ang)
        q = nd.rotate_pairs(q, cos, sin)
        k = nd.rotate_pairs(k, cos, sin)
    logits = nd.scale(nd.matmul(q, nd.swapaxes(k, -1, -2)), 1.0 / np.sqrt(dh))
    bias = np.where(mask, 0.0, -np.inf)[:, None]
    attn = nd.softmax_rows(logits + bias)
    y = nd.matmul(attn, v)  # (B, H, N, dh)
    b, _, n, _ = y.shape
    y = nd.transpose(y, (0, 2, 1, 3)).reshape(b, n, h * dh)
    out = nd.leaky_relu(nd.matmul(y, params[prefix + ".wo"]) + params[prefix + ".bo"] + z)
    if squeeze:
        out = out.reshape(out.shape[1:])
        attn = attn.reshape(attn.shape[1:])
    return (out, attn) if return_attention else out


def encode(z0, positions, mask, params: dict, cfg: STConfig, prefix: str = "enc", attention_log=None) -> Tensor:
    """Self-attention stack over agent tokens ``[z_i, x_i]`` -> conditioning C."""
    z = nd.matmul(nd.as_tensor(z0), params[prefix + ".in.w"]) + params[prefix + ".in.b"]
    for layer in range(cfg.layers):
        z, attn = attention_layer(
            z, positions, mask, params, f"{prefix}.{layer}", cfg, first_layer=layer == 0, return_attention=True
        )
        if attention_log is not None:
            attention_log.append(attn.data)
    return _norm(z, params, prefix + ".out")


def step_embedding(k, dim: int) -> np.ndarray:
    """Sinusoidal embedding of diffusion step(s) ``k``: (..., dim)."""
    k = np.asarray(k, dtype=np.float64)[..., None]
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    return np.concatenate([np.sin(k * freqs), np.cos(k * freqs)], axis=-1)


def decode(u_k, positions, c, mask, params: dict, cfg: STConfig, k, prefix: str = "dec", attention_log=None) -> Tensor:
    """Predict the noise in ``u_k`` (…, N, 2) given conditioning ``c`` and step ``k``.

    ``k`` is a scalar or one step per batch element. Each action token starts
    as an embedding of its noisy action plus a step embedding plus the agent's
    own conditioning row, then alternates self- and cross-attention blocks.
    """
    u_k = nd.as_tensor(u_k)
    c = nd.as_tensor(c)
    temb = step_embedding(k, cfg.d_model)
    if temb.ndim == 1:
        temb = temb[None]
    elif u_k.ndim == 3:
        temb = temb[:, None, :]
    t = nd.matmul(Tensor(temb), params[prefix + ".time.w"]) + params[prefix + ".time.b"]
    x = nd.matmul(u_k, params[prefix + ".in.w"]) + params[prefix + ".in.b"] + t + c
    for layer in range(cfg.layers):
        cross = decoder_block_is_cross(layer)
        x, attn = attention_layer(
            x,
            positions,
            mask,
            params,
            f"{prefix}.{layer}",
            cfg,
            first_layer=layer == 0,
            context=c if cross else None,
            return_attention=True,
        )
        if attention_log is not None:
            attention_log.append(attn.data)
    x = _norm(x, params, prefix + ".out")
    return nd.matmul(x, params[prefix + ".out.w"]) + params[prefix + ".out.bias"]
