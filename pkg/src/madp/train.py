"""Expert dataset generation and the imitation-learning loop."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ndtensor as nd
from .diffusion import MADPModel, ModelConfig
from .experts import clairvoyant_action
from .perception import build_observations
from .stformer import build_mask
from .world import WorldConfig, comm_graph, generate_field, init_state, step

log = logging.getLogger(__name__)

SPLIT_RATIO = (0.7, 0.2, 0.1)


class TrainingError(RuntimeError):
    pass


@dataclass
class Dataset:
    U0: np.ndarray  # (M, N, 2) normalised expert actions
    O: np.ndarray  # (M, N, 4, 32, 32)
    X: np.ndarray  # (M, N, 2)
    meta: np.ndarray  # (M, 2) int: rollout index, timestep
    splits: dict
    world: WorldConfig
    seed: int
    rollout_steps: int

    def __len__(self):
        return self.U0.shape[0]

    def subset(self, idx) -> dict:
        return {"U0": self.U0[idx], "O": self.O[idx], "X": self.X[idx]}

    def save(self, path) -> None:
        """``<path>.json`` manifest plus one little-endian f8 blob per field."""
        path = Path(path)
        blobs = {}
        for name in ("U0", "O", "X", "meta"):
            arr = np.asarray(getattr(self, name), dtype="<f8")
            blob = path.with_name(f"{path.stem}.{name}.bin")
            blob.write_bytes(arr.tobytes())
            blobs[name] = {"file": blob.name, "shape": list(arr.shape)}
        manifest = {
            "format": "madp-dataset/1",
            "count": len(self),
            "num_robots": int(self.U0.shape[1]) if len(self) else self.world.num_robots,
            "world": self.world.to_dict(),
            "seed": self.seed,
            "rollout_steps": self.rollout_steps,
            "split_ratio": list(SPLIT_RATIO),
            "split_sizes": {k: len(v) for k, v in self.splits.items()},
            "splits": {k: [int(i) for i in v] for k, v in self.splits.items()},
            "blobs": blobs,
        }
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        manifest = json.loads(path.with_suffix(".json").read_text())
        arrays = {}
        for name, spec in manifest["blobs"].items():
            raw = (path.parent / spec["file"]).read_bytes()
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(spec["shape"]).copy()
        return cls(
            U0=arrays["U0"],
            O=arrays["O"],
            X=arrays["X"],
            meta=arrays["meta"].astype(np.int64),
            splits={k: np.array(v, dtype=np.int64) for k, v in manifest["splits"].items()},
            world=WorldConfig.from_dict(manifest["world"]),
            seed=manifest["seed"],
            rollout_steps=manifest["rollout_steps"],
        )


def split_indices(m: int, rng: np.random.Generator, ratio=SPLIT_RATIO) -> dict:
    order = rng.permutation(m)
    n_train = int(round(ratio[0] * m))
    n_val = int(round(ratio[1] * m))
    n_val = min(n_val, m - n_train)
    return {
        "train": np.sort(order[:n_train]),
        "val": np.sort(order[n_train : n_train + n_val]),
        "test": np.sort(order[n_train + n_val :]),
    }


def expert_rollout(world: WorldConfig, seed: int, rollout: int, steps: int):
    """Yield (t, state, graph) along a clairvoyant rollout; deterministic in (seed, rollout)."""
    rng = np.random.default_rng([seed, rollout])
    field = generate_field(world, rng)
    pos = rng.uniform(0.0, world.side_length, size=(world.num_robots, 2))
    state = init_state(world, field, pos)
    for t in range(steps):
        graph = comm_graph(state.positions, world.comm_radius)
        yield t, state, graph
        state = step(state, clairvoyant_action(state.positions, field, world.u_max, world.dt), world)


def example_at(world: WorldConfig, seed: int, rollout: int, t: int):
    """Regenerate one dataset row (U0, O, X) from its metadata."""
    for tt, state, graph in expert_rollout(world, seed, rollout, t + 1):
        if tt == t:
            return _record(state, graph, world)
    raise ValueError("timestep beyond rollout")


def _record(state, graph, world):
    u = clairvoyant_action(state.positions, state.field, world.u_max, world.dt) / world.u_max
    return u, build_observations(state, graph, world), state.positions.copy()


def generate_dataset(
    world: WorldConfig,
    num_examples: int,
    seed: int = 0,
    rollout_steps: int = 150,
    rows_per_rollout: int = 20,
) -> Dataset:
    """Sample (U0, O, X) rows from clairvoyant rollouts on random fields.

    Each rollout contributes up to ``rows_per_rollout`` timesteps drawn
    uniformly without replacement; rollouts continue until the quota is met.
    """
    rows_per_rollout = max(1, min(rows_per_rollout, rollout_steps))
    u0, obs, xs, meta = [], [], [], []
    rollout = 0
    while len(u0) < num_examples:
        pick_rng = np.random.default_rng([seed, rollout, 1])
        quota = min(rows_per_rollout, num_examples - len(u0))
        wanted = set(pick_rng.choice(rollout_steps, size=quota, replace=False).tolist())
        last = max(wanted)
        for t, state, graph in expert_rollout(world, seed, rollout, last + 1):
            if t in wanted:
                u, o, x = _record(state, graph, world)
                u0.append(u)
                obs.append(o)
                xs.append(x)
                meta.append((rollout, t))
        rollout += 1
    n = world.num_robots
    splits = split_indices(num_examples, np.random.default_rng([seed, 2]))
    return Dataset(
        U0=np.array(u0).reshape(num_examples, n, 2),
        O=np.array(obs).reshape(num_examples, n, 4, 32, 32),
        X=np.array(xs).reshape(num_examples, n, 2),
        meta=np.array(meta, dtype=np.int64).reshape(num_examples, 2),
        splits=splits,
        world=world,
        seed=seed,
        rollout_steps=rollout_steps,
    )


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 8.5e-5
    weight_decay: float = 2.1e-12
    batch_size: int = 196
    max_epochs: int = 1000
    patience: int = 500
    min_delta: float = 1e-4
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    time_budget: float | None = None  # seconds; stop after the epoch that exceeds it

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning rate and weight decay must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")
        if self.patience > max(self.max_epochs, 1):
            raise ValueError("patience must not exceed max_epochs")

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls(**json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class AdamW:
    """Adam moments with weight decay applied directly to the weights."""

    def __init__(self, params: dict, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.wd, self.b1, self.b2, self.eps = lr, weight_decay, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data -= self.lr * (update + self.wd * p.data)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def batch_from(dataset: Dataset, idx, r_att: float) -> dict:
    b = dataset.subset(idx)
    # training sees the full-swarm mask each example was recorded under
    b["M"] = np.stack([build_mask(x, comm_graph(x, dataset.world.comm_radius), r_att) for x in b["X"]])
    return b


def evaluate_loss(model: MADPModel, batches, seed: int) -> float:
    """Mean DDPM loss over fixed batches with a fixed noise stream."""
    rng = np.random.default_rng([seed, 99])
    total, count = 0.0, 0
    with nd.no_grad():
        for b in batches:
            n = len(b["U0"])
            total += model.loss(b, rng).item() * n
            count += n
    return total / max(count, 1)


@dataclass
class TrainResult:
    model: MADPModel
    history: list  # (epoch, train_loss, val_loss)
    best_epoch: int
    best_val: float


def _chunks(idx, size):
    return [idx[i : i + size] for i in range(0, len(idx), size)]


def train(
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    model: MADPModel | None = None,
    start_epoch: int = 0,
    history=None,
    progress=None,
) -> TrainResult:
    """Minimise the DDPM loss; return the best-validation checkpoint."""
    if model is None:
        model = MADPModel(model_config, seed=train_config.seed)
    r_att = model.st.attention_radius
    cfg = train_config
    opt = AdamW(model.params, cfg.learning_rate, cfg.weight_decay, cfg.beta1, cfg.beta2)
    train_idx = dataset.splits["train"]
    val_idx = dataset.splits["val"] if len(dataset.splits["val"]) else train_idx
    val_batches = [batch_from(dataset, c, r_att) for c in _chunks(val_idx, cfg.batch_size)]
    train_masks = {int(i): m for i, m in zip(train_idx, batch_from(dataset, train_idx, r_att)["M"])}

    history = list(history or [])
    best_val = evaluate_loss(model, val_batches, cfg.seed)
    best_params = model.copy_params()
    best_epoch = start_epoch
    patience_ref = best_val
    since_best = 0
    t0 = time.monotonic()
    for epoch in range(start_epoch + 1, start_epoch + cfg.max_epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(train_idx)
        losses = []
        for chunk in _chunks(order, cfg.batch_size):
            batch = dataset.subset(chunk)
            batch["M"] = np.stack([train_masks[int(i)] for i in chunk])
            opt.zero_grad()
            loss = model.loss(batch, rng)
            if not math.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch}")
            nd.backward(loss)
            opt.step()
            losses.append(loss.item() * len(chunk))
        train_loss = sum(losses) / len(order)
        val_loss = evaluate_loss(model, val_batches, cfg.seed)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history.append((epoch, train_loss, val_loss))
        if progress:
            progress(epoch, train_loss, val_loss)
        log.info("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)
        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            best_params = model.copy_params()
        # patience only resets on improvements larger than min_delta
        if val_loss < patience_ref - cfg.min_delta:
            patience_ref, since_best = val_loss, 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
        if cfg.time_budget is not None and time.monotonic() - t0 > cfg.time_budget:
            break
    best = MADPModel(model.config, best_params)
    return TrainResult(best, history, best_epoch, best_val)


def write_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, tr, va in history:
            w.writerow([epoch, repr(float(tr)), repr(float(va))])


def read_history(path) -> list:
    with open(path, newline="") as fh:
        return [(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"])) for r in csv.DictReader(fh)]
