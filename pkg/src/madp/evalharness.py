"""Rollouts, baselines and the experiment suites (sigma sweep, launch
scenarios, N/F scalability grid, trajectory fans)."""
from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .coverage import coverage_cost
from .diffusion import MADPModel, policy_step
from .experts import clairvoyant_action, dcvt_action
from .world import WorldConfig, comm_graph, generate_field, init_state, step

# Launch rectangles (x_lo, x_hi, y_lo, y_hi) in metres for a 1024 m world.
SCENARIOS = {
    "uniform": (0.0, 1024.0, 0.0, 1024.0),
    "square": (115.25, 217.25, 115.25, 217.25),
    "line": (0.0, 1024.0, 96.0, 352.0),
}
REFERENCE_SIDE = 1024.0
TRAINING_SIGMA_RANGE = (40.0, 60.0)


def scenario_bounds(name: str, side_length: float = REFERENCE_SIDE):
    """Launch rectangle for ``name``, scaled from the 1024 m reference world."""
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    s = side_length / REFERENCE_SIDE
    return tuple(v * s for v in SCENARIOS[name])


def initial_positions(world: WorldConfig, rng: np.random.Generator, scenario: str = "uniform") -> np.ndarray:
    x0, x1, y0, y1 = scenario_bounds(scenario, world.side_length)
    n = world.num_robots
    return np.column_stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n)])


# ---------------------------------------------------------------------------
# policies: act(state, graph, world, seed) -> (N, 2) velocities


class ZeroPolicy:
    name = "zero"

    def act(self, state, graph, world, seed):
        return np.zeros_like(state.positions)


class RandomPolicy:
    """Velocities drawn uniformly from the disc of radius u_max."""

    name = "random"

    def act(self, state, graph, world, seed):
        rng = np.random.default_rng([seed, state.t, 7])
        n = state.num_robots
        r = world.u_max * np.sqrt(rng.uniform(size=n))
        a = rng.uniform(0, 2 * np.pi, size=n)
        return np.column_stack([r * np.cos(a), r * np.sin(a)])


class ClairvoyantPolicy:
    name = "clairvoyant"

    def act(self, state, graph, world, seed):
        return clairvoyant_action(state.positions, state.field, world.u_max, world.dt)


class DCVTPolicy:
    name = "dcvt"

    def act(self, state, graph, world, seed):
        return dcvt_action(state, graph, world.u_max, world.dt)


@dataclass
class MADPPolicy:
    """Learned policy. ``run`` re-keys the sampler noise; ``fixed_prior`` keeps
    the prior draw of the un-keyed stream so runs only differ through eta."""

    model: MADPModel
    decentralized: bool = False
    steps: int | None = None
    eta: float | None = None
    name: str = "madp"
    run: int | None = None
    fixed_prior: bool = False

    def act(self, state, graph, world, seed):
        noise_seed = seed if self.run is None else seed * 100003 + self.run + 1
        return policy_step(
            self.model,
            state,
            graph,
            world,
            seed=noise_seed,
            decentralized=self.decentralized,
            steps=self.steps,
            eta=self.eta,
            prior_seed=seed if self.fixed_prior else None,
        )


def expert_policy(name: str):
    table = {"clairvoyant": ClairvoyantPolicy, "dcvt": DCVTPolicy, "random": RandomPolicy, "zero": ZeroPolicy}
    if name not in table:
        raise ValueError(f"unknown policy {name!r}; choose from {sorted(table)}")
    return table[name]()


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class RolloutRecord:
    costs: np.ndarray  # (T+1,)
    seed: int
    policy: str
    world: WorldConfig
    scenario: str = "uniform"
    positions: np.ndarray | None = None  # (T+1, N, 2)
    initial_positions: np.ndarray | None = None

    @property
    def normalized(self) -> np.ndarray:
        if self.costs[0] == 0:
            return np.ones_like(self.costs)
        return self.costs / self.costs[0]

    @property
    def final(self) -> float:
        return float(self.normalized[-1])


def make_environment(world: WorldConfig, seed: int, scenario: str = "uniform", field=None):
    """Field and initial state for ``seed``; identical across policies (paired runs)."""
    if field is None:
        field = generate_field(world, np.random.default_rng([seed, 0]))
    pos = initial_positions(world, np.random.default_rng([seed, 1]), scenario)
    return field, init_state(world, field, pos)


def rollout(
    policy,
    world: WorldConfig,
    steps: int,
    seed: int,
    scenario: str = "uniform",
    field=None,
    record_positions: bool = False,
    field_scale: float = 1.0,
) -> RolloutRecord:
    field, state = make_environment(world, seed, scenario, field)
    if field_scale != 1.0:
        field = field.scaled(field_scale)
        state = init_state(world, field, state.positions)
    start = state.positions.copy()
    costs = np.empty(steps + 1)
    traj = np.empty((steps + 1,) + state.positions.shape) if record_positions else None
    for t in range(steps + 1):
        costs[t] = coverage_cost(state.positions, field)
        if traj is not None:
            traj[t] = state.positions
        if t == steps:
            break
        graph = comm_graph(state.positions, world.comm_radius)
        state = step(state, policy.act(state, graph, world, seed), world)
    return RolloutRecord(costs, seed, policy.name, world, scenario, traj, start)


def _rollout_job(args):
    return rollout(*args)


def run_rollouts(policy, world, steps, seeds, scenario="uniform", jobs: int = 1) -> list:
    args = [(policy, world, steps, int(s), scenario) for s in seeds]
    if jobs <= 1:
        return [_rollout_job(a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_rollout_job, args))


def confidence_band(records) -> tuple:
    """Per-timestep mean and 95% half-width (1.96 standard errors) of normalized cost."""
    traces = np.stack([r.normalized for r in records])
    mean = traces.mean(axis=0)
    if len(records) < 2:
        return mean, np.zeros_like(mean)
    se = traces.std(axis=0, ddof=1) / np.sqrt(len(records))
    return mean, 1.96 * se


def write_rollouts_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestep", "seed", "policy", "cost", "normalized_cost"])
        for r in records:
            for t, (c, nc) in enumerate(zip(r.costs, r.normalized)):
                w.writerow([t, r.seed, r.policy, repr(float(c)), repr(float(nc))])


def mean_stderr(values) -> tuple:
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size))


# ---------------------------------------------------------------------------
# experiment suites


def box_stats(values) -> dict:
    """Box-plot summary with 1.5 IQR whiskers."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo) & (v <= hi)]
    return {
        "min": float(v.min()),
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
        "max": float(v.max()),
        "whisker_lo": float(inside.min()),
        "whisker_hi": float(inside.max()),
        "outliers": [float(x) for x in v[(v < lo) | (v > hi)]],
        "mean": float(v.mean()),
        "n": int(v.size),
    }


def sigma_sweep(policies, world: WorldConfig, ranges, seeds, steps: int, jobs: int = 1) -> list:
    """Final normalized cost distribution per (sigma range, policy)."""
    rows = []
    for lo, hi in ranges:
        w = world.replace(sigma_range=(lo, hi))
        for p in policies:
            finals = [r.final for r in run_rollouts(p, w, steps, seeds, jobs=jobs)]
            rows.append({"sigma_min": float(lo), "sigma_max": float(hi), "policy": p.name, "finals": finals, **box_stats(finals)})
    return rows


def init_scenarios(policies, world: WorldConfig, scenarios, seeds, steps: int, jobs: int = 1) -> list:
    """Mean +- standard error of final normalized cost per (scenario, policy)."""
    rows = []
    for sc in scenarios:
        bounds = scenario_bounds(sc, world.side_length)
        for p in policies:
            recs = run_rollouts(p, world, steps, seeds, scenario=sc, jobs=jobs)
            mean, se = mean_stderr([r.final for r in recs])
            rows.append(
                {
                    "scenario": sc,
                    "policy": p.name,
                    "mean": mean,
                    "stderr": se,
                    "n": len(recs),
                    "bounds": bounds,
                    "initial_positions": [r.initial_positions for r in recs],
                }
            )
    return rows


def percent_difference(baseline_mean: float, policy_mean: float) -> float:
    """(Mean(baseline) - Mean(policy)) / Mean(baseline), in percent."""
    return float(100.0 * (baseline_mean - policy_mean) / baseline_mean)


def scalability_grid(policy, baseline, world: WorldConfig, n_values, f_values, seeds, steps: int, jobs: int = 1) -> list:
    rows = []
    for n in n_values:
        for f in f_values:
            w = world.replace(num_robots=int(n), num_features=int(f))
            pm = np.mean([r.final for r in run_rollouts(policy, w, steps, seeds, jobs=jobs)])
            bm = np.mean([r.final for r in run_rollouts(baseline, w, steps, seeds, jobs=jobs)])
            rows.append(
                {
                    "N": int(n),
                    "F": int(f),
                    "policy": policy.name,
                    "baseline": baseline.name,
                    "policy_mean": float(pm),
                    "baseline_mean": float(bm),
                    "percent_difference": percent_difference(bm, pm),
                }
            )
    return rows


@dataclass
class FanRun:
    trajectory: np.ndarray  # (horizon+1, 2) positions of the chosen robot
    final_cost: float  # normalized coverage cost at the horizon


def trajectory_fan(model, world: WorldConfig, robot: int, runs: int, horizon: int, seed: int = 0,
                   eta: float = 1.0, fixed_prior: bool = True, steps: int | None = None) -> list:
    """Repeated MADP rollouts from one environment; returns one FanRun per run."""
    out = []
    for run in range(runs):
        p = MADPPolicy(model, steps=steps, eta=eta, name=f"madp-run{run}", run=run, fixed_prior=fixed_prior)
        rec = rollout(p, world, horizon, seed, record_positions=True)
        out.append(FanRun(rec.positions[:, robot].copy(), rec.final))
    return out


# ---------------------------------------------------------------------------
# output files


def write_rows_csv(rows, path, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(float(r[c])) if isinstance(r[c], (float, np.floating)) else r[c] for c in columns])


def write_manifest(path, **fields) -> None:
    def conv(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.integer,)):
            return int(o)
        if isinstance(o, (np.floating,)):
            return float(o)
        if hasattr(o, "to_dict"):
            return o.to_dict()
        raise TypeError(type(o))

    Path(path).write_text(json.dumps(fields, indent=2, default=conv))
