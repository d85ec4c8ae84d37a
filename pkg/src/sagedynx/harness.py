"""Evaluation harness: clairvoyant reference runs, baselines, and regret.

Regret is measured against a clairvoyant controller that plans with the
true dynamics (no model, no exploration) under the same constraints, noise
table, and planner budget. The per-step regret is the infinity-distance of
the position components to the clairvoyant state at the same step index;
runs are compared by the cumulative sum.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .algorithms import (
    RunLog,
    RunResult,
    _plan_seed,
    _tracking_leg,
    explore_run,
    make_model,
    noise_table,
    sagedynx_run,
)
from .bounds import LipschitzConstants
from .envs import Environment
from .planner import PlanConfig, TrueDynamics, solve_tracking

BASELINE_KINDS = ("no-learning", "two-stage")


@dataclass
class RegretSeries:
    env_name: str
    seed: int
    per_step: np.ndarray
    label: str = ""

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.per_step)

    @property
    def total(self) -> float:
        return float(self.per_step.sum())

    def to_csv(self) -> str:
        lines = ["k,regret,cumulative"]
        cum = 0.0
        for k, r in enumerate(self.per_step):
            cum += float(r)
            lines.append(f"{k},{float(r)!r},{cum!r}")
        return "\n".join(lines) + "\n"


def run_clairvoyant(
    env: Environment,
    plan_config: PlanConfig,
    *,
    seed: int = 0,
    max_steps: int = 600,
    replan_every: int = 1,
) -> RunResult:
    """Receding-horizon planning on the true dynamics (regret reference)."""
    dyn = TrueDynamics(env.true_step)
    log = RunLog(env.name, seed)
    noise = noise_table(env, seed, max_steps)
    x = env.x0.copy()
    k = 0
    warm = None
    while k < max_steps:
        cfg = replace(plan_config, seed=_plan_seed(seed, k, "clairvoyant"))
        plan = solve_tracking(
            dyn, x, cfg, env.reward_spec, start_index=k, warm=warm
        )
        warm = plan
        take = min(replan_every, plan.actions.shape[0], max_steps - k)
        for h in range(take):
            u = plan.actions[h]
            log.add_row(k, x, u, env.constraints, 0.0, False)
            x = env.true_step(x[None, :], u[None, :])[0] + noise[k]
            k += 1
    return RunResult(log, None, None, None, None, 0, k)


def run_baseline(
    env: Environment,
    plan_config: PlanConfig,
    lips: LipschitzConstants,
    kind: str,
    *,
    seed: int = 0,
    max_steps: int = 600,
    explore_steps: int = 100,
    replan_every: int = 5,
) -> RunResult:
    """Reference controllers the learning loop is compared against.

    "no-learning" tracks pessimistically with the frozen prior model;
    "two-stage" explores for explore_steps physical steps first, then
    tracks with whatever model that produced (no further updates).
    """
    if kind == "no-learning":
        return sagedynx_run(
            env, plan_config, lips, seed=seed, max_steps=max_steps,
            learn=False, replan_every=replan_every,
        )
    if kind != "two-stage":
        raise ValueError(f"unknown baseline kind {kind!r}")
    model = make_model(env, seed)
    log = RunLog(env.name, seed)
    noise = noise_table(env, seed, max_steps + 4 * plan_config.horizon_total)
    res = explore_run(
        env, plan_config, lips, seed=seed, model=model,
        max_steps=min(explore_steps, max_steps), log=log, noise=noise,
    )
    x = res.state if res.state is not None else env.x0.copy()
    k = res.steps
    if k < max_steps:
        x, k = _tracking_leg(
            env, res.model, res.safe_set, plan_config, lips, log, x, k,
            noise, seed=seed, max_steps=max_steps,
            replan_every=replan_every,
        )
    return RunResult(log, res.model, res.safe_set, None, None, res.updates, k)


def compute_regret(run, reference, pos_idx, label: str = "") -> RegretSeries:
    """Per-step infinity-distance of position components to the clairvoyant
    trajectory at equal step indices, as a cumulative series."""
    states = run.states() if hasattr(run, "states") else run.log.states()
    ref = (
        reference.states()
        if hasattr(reference, "states")
        else reference.log.states()
    )
    n = min(states.shape[0], ref.shape[0])
    idx = list(pos_idx)
    per = np.abs(states[:n][:, idx] - ref[:n][:, idx]).max(axis=1)
    env_name = run.env_name if hasattr(run, "env_name") else run.log.env_name
    seed = run.seed if hasattr(run, "seed") else run.log.seed
    return RegretSeries(env_name, seed, per, label=label)


def aggregate_seeds(series: list[RegretSeries]) -> dict:
    """Mean/std of total regret across seeds plus the mean cumulative curve."""
    if not series:
        raise ValueError("no regret series to aggregate")
    totals = np.asarray([s.total for s in series])
    n = min(s.per_step.size for s in series)
    curves = np.stack([s.cumulative[:n] for s in series])
    return {
        "label": series[0].label,
        "seeds": [s.seed for s in series],
        "total_mean": float(totals.mean()),
        "total_std": float(totals.std()),
        "cumulative_mean": [float(v) for v in curves.mean(axis=0)],
    }


def regret_ratio(algo: dict, baseline: dict) -> float:
    """Mean-total regret of the learner over a baseline's."""
    denom = baseline["total_mean"]
    if denom <= 0:
        return float("inf") if algo["total_mean"] > 0 else 0.0
    return float(algo["total_mean"] / denom)
