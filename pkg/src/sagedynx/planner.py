"""Finite-horizon trajectory optimization over sampled dynamics.

The policy class is open-loop action sequences. A cross-entropy loop ranks
candidates lexicographically (total constraint violation ascending, then
objective descending), so feasibility always dominates reward. Three
problems are built on top of it:

- exploration: from the current state, maximize -lambda nu + J_any subject to
  pessimistic constraints (all dynamics samples stay feasible and end in the
  safe set) where nu relaxes the requirement that some sample/step reaches
  width >= eps_d;
- optimistic: jointly choose a start state in the safe set, a dynamics
  sample, and actions maximizing J under eps-tightened constraints for that
  sample (an exists-f realization);
- pessimistic reward: choose a start state and actions maximizing the
  uncertainty-penalized J^p along the posterior-mean rollout, with
  eps'-tightened constraints enforced for every sample.

Sampled rollouts are noise-free; robustness to noise is carried by the
sample spread and the safe-set certificate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ._util import box_corners, rng_for
from .bounds import LipschitzConstants, Tolerances
from .envs import ConstraintSet, RewardSpec, reward
from .model import DynamicsModel, stack_samples
from .safeset import SafeSet

CEM_SMOOTHING = 0.5
_BAD_OBJ = -1e18
_BAD_PEN = 1e18


@dataclass(frozen=True)
class PlanConfig:
    """Knobs of one planning problem; horizon_total = horizon + delta_h is
    the exploration/combined horizon."""

    constraints: ConstraintSet
    tolerances: Tolerances
    horizon: int = 21
    delta_h: int = 10
    population: int = 64
    elite_fraction: float = 0.1
    iterations: int = 8
    init_action_std: float | None = None
    penalty_weight: float = 1e3  # lambda on the exploration slack
    sample_count: int = 15
    seed: int = 0
    margin: float = 0.0  # extra per-step tightening, default none
    noise_rollouts: int = 1

    def __post_init__(self):
        if not (self.horizon >= 1 and self.delta_h >= 0):
            raise ValueError("need horizon >= 1 and delta_h >= 0")
        if not (0.0 < self.elite_fraction < 1.0):
            raise ValueError("elite_fraction must be in (0, 1)")
        if self.penalty_weight <= 0:
            raise ValueError("penalty_weight must be > 0")
        if self.population < 4 or self.iterations < 1 or self.sample_count < 1:
            raise ValueError("degenerate population/iterations/sample_count")

    @property
    def horizon_total(self) -> int:
        return self.horizon + self.delta_h


@dataclass(frozen=True)
class Plan:
    """One solved open-loop plan with its per-sample predicted tube."""

    actions: np.ndarray  # (H, n_u)
    per_sample_states: np.ndarray  # (M, H+1, n_x)
    objective_value: float
    slack: float = 0.0
    feasible: bool = True
    info_step: int | None = None
    x0: np.ndarray | None = None
    sample_index: int | None = None
    raw: np.ndarray | None = None  # winning candidate vector (warm starts)

    def __post_init__(self):
        if self.per_sample_states.shape[1] != self.actions.shape[0] + 1:
            raise ValueError("per-sample states must be one longer than actions")

    def to_csv(self) -> str:
        """Actions and per-sample trajectories for tube plots."""
        width = max(self.actions.shape[1], self.per_sample_states.shape[2])
        head = ",".join(f"c{j}" for j in range(width))
        lines = [f"kind,sample,step,{head}"]
        for h, a in enumerate(self.actions):
            cells = ",".join(repr(float(v)) for v in a)
            lines.append(f"action,-1,{h},{cells}")
        for m in range(self.per_sample_states.shape[0]):
            for h, s in enumerate(self.per_sample_states[m]):
                cells = ",".join(repr(float(v)) for v in s)
                lines.append(f"state,{m},{h},{cells}")
        return "\n".join(lines) + "\n"


class InfeasiblePlanError(RuntimeError):
    """Raised when a solver that must produce a feasible plan cannot."""


# ------------------------------------------------------------------ rollouts


class TrueDynamics:
    """Adapter giving a batched true-step function the sampled-dynamics
    interface (used by the clairvoyant planner)."""

    def __init__(self, step_fn: Callable):
        self._step = step_fn

    def step_batch(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        return self._step(X, U)


def rollout(dyn, x0: np.ndarray, actions: np.ndarray, noise_sequence=None):
    """Forward-simulate one trajectory; dyn is anything with step_batch or a
    batched callable f(X, U). Returns (H+1, n_x)."""
    step = dyn.step_batch if hasattr(dyn, "step_batch") else dyn
    x = np.asarray(x0, dtype=float)
    actions = np.asarray(actions, dtype=float)
    if not np.all(np.isfinite(actions)):
        raise ValueError("actions must be finite")
    out = np.empty((actions.shape[0] + 1, x.size))
    out[0] = x
    for h, u in enumerate(actions):
        x = step(x[None, :], u[None, :])[0]
        if noise_sequence is not None:
            x = x + noise_sequence[h]
        out[h + 1] = x
    return out


def _rollout_samples(model: DynamicsModel, samples, X0: np.ndarray, A: np.ndarray):
    """Batched noise-free rollouts of every sample for every candidate.

    X0 (P, n_x), A (P, H, n_u) -> states (P, M, H+1, n_x) and the visited
    joint points Z (P, M, H, n_x + n_u).
    """
    basis, W = stack_samples(samples)
    P, H = A.shape[0], A.shape[1]
    M = W.shape[0]
    n_x = X0.shape[1]
    states = np.empty((P, M, H + 1, n_x))
    Z = np.empty((P, M, H, n_x + A.shape[2]))
    X = np.broadcast_to(X0[:, None, :], (P, M, n_x)).copy()
    states[:, :, 0] = X
    for h in range(H):
        U = np.broadcast_to(A[:, None, h, :], (P, M, A.shape[2]))
        Zh = np.concatenate([X, U], axis=-1)
        Z[:, :, h] = Zh
        X = np.einsum("pmd,mdn->pmn", basis(Zh), W)
        if model.delta_mode:
            X = X + Zh[..., :n_x]
        states[:, :, h + 1] = X
    return states, Z


def _rollout_mean(model: DynamicsModel, X0: np.ndarray, A: np.ndarray):
    """Posterior-mean rollouts: X0 (P, n_x), A (P, H, n_u) ->
    (states (P, H+1, n_x), Z (P, H, d_in))."""
    P, H = A.shape[0], A.shape[1]
    n_x = X0.shape[1]
    states = np.empty((P, H + 1, n_x))
    Z = np.empty((P, H, n_x + A.shape[2]))
    X = X0
    states[:, 0] = X
    for h in range(H):
        Zh = np.concatenate([X, A[:, h, :]], axis=-1)
        Z[:, h] = Zh
        mean, _ = model.posterior(Zh)
        X = mean
        states[:, h + 1] = X
    return states, Z


def _rollout_fn(step, X0: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Rollouts of a plain batched dynamics function."""
    P, H = A.shape[0], A.shape[1]
    states = np.empty((P, H + 1, X0.shape[1]))
    X = X0
    states[:, 0] = X
    for h in range(H):
        X = step(X, A[:, h, :])
        states[:, h + 1] = X
    return states


# ---------------------------------------------------------------- objectives


def _reward_sum(spec: RewardSpec, states, actions, start_index: int):
    """Sum of rewards along (..., H+1, n_x) states and (..., H, n_u) actions
    with the reference window starting at start_index."""
    H = actions.shape[-2]
    idx = start_index + np.arange(H)
    return reward(spec, states[..., :-1, :], actions, idx).sum(axis=-1)


def objective_J(states, actions, reward_spec: RewardSpec, start_index: int = 0):
    """Plain finite-horizon return J."""
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions, dtype=float)
    if actions.shape[-2] == 0:
        return 0.0
    out = _reward_sum(reward_spec, states, actions, start_index)
    return float(out) if out.ndim == 0 else out


def _jp_penalty_coef(lips: LipschitzConstants, H: int) -> np.ndarray:
    i = np.arange(H)
    return lips.L_r * lips.L**i * (H - i)


def objective_Jp(
    states_mean,
    actions,
    model: DynamicsModel,
    lips: LipschitzConstants,
    reward_spec: RewardSpec,
    start_index: int = 0,
):
    """Uncertainty-penalized lower bound along the posterior-mean rollout:
    J - L_r sum_{h<H} sum_{i<=h} L^i w(x_i, u_i)."""
    states_mean = np.asarray(states_mean, dtype=float)
    actions = np.asarray(actions, dtype=float)
    J = objective_J(states_mean, actions, reward_spec, start_index)
    Z = np.concatenate([states_mean[..., :-1, :], actions], axis=-1)
    w = model.widths_batch(Z)
    pen = (w * _jp_penalty_coef(lips, actions.shape[-2])).sum(axis=-1)
    out = J - pen
    return float(out) if np.ndim(out) == 0 else out


def objective_Jany(
    plan_states,
    optimistic_reference_states,
    model: DynamicsModel | None,
    mode: str,
    width_bonus: float = 0.0,
    actions=None,
    reward_spec: RewardSpec | None = None,
    start_index: int = 0,
):
    """Exploration objective; plan_states (M, H+1, n_x).

    Modes: "uncertainty" (width bonus alone, pure information seeking),
    "distance-to-optimistic" (negative mean infinity-distance of the
    sample-averaged plan to the optimistic trajectory, plus a width bonus),
    "first-optimistic-state" (negative closest approach to the optimistic
    start), "reward-plus-uncertainty" (mean per-sample return plus width
    bonus).
    """
    plan_states = np.asarray(plan_states, dtype=float)
    bonus = 0.0
    if width_bonus != 0.0 and model is not None and actions is not None:
        A = np.asarray(actions, dtype=float)
        M, Hp1, n_x = plan_states.shape
        Z = np.concatenate(
            [plan_states[:, :-1, :], np.broadcast_to(A, (M,) + A.shape)],
            axis=-1,
        )
        bonus = width_bonus * float(model.widths_batch(Z).max(axis=0).sum())
    if mode == "uncertainty":
        return float(bonus)
    if mode == "reward-plus-uncertainty":
        if reward_spec is None:
            raise ValueError("reward-plus-uncertainty needs a reward spec")
        J = _reward_sum(
            reward_spec, plan_states, np.asarray(actions, dtype=float),
            start_index,
        ).mean()
        return float(J + bonus)
    ref = np.asarray(optimistic_reference_states, dtype=float)
    mean_states = plan_states.mean(axis=0)  # (H+1, n_x)
    Hq = mean_states.shape[0]
    if ref.shape[0] < Hq:  # pad by holding the last reference state
        pad = np.repeat(ref[-1:], Hq - ref.shape[0], axis=0)
        ref = np.vstack([ref, pad])
    if mode == "distance-to-optimistic":
        dist = np.abs(mean_states - ref[:Hq]).max(axis=-1).mean()
        return float(-dist + bonus)
    if mode == "first-optimistic-state":
        dist = np.abs(mean_states - ref[0]).max(axis=-1).min()
        return float(-dist + bonus)
    raise ValueError(f"unknown J_any mode {mode!r}")


# ----------------------------------------------------------------------- CEM


def cem_optimize(
    evaluate: Callable,
    config: PlanConfig,
    init_mean: np.ndarray,
    lower: np.ndarray | float = -1.0,
    upper: np.ndarray | float = 1.0,
    init_std: np.ndarray | float | None = None,
    inject: Sequence[np.ndarray] = (),
    rng_label: str = "cem",
):
    """Cross-entropy search over box-bounded candidate vectors.

    evaluate(C (P, dim)) -> (penalty (P,), objective (P,)); candidates are
    ranked by (penalty ascending, objective descending), elites refit the
    Gaussian with smoothing 0.5, injected candidates join every population.
    Returns (best_vector, best_penalty, best_objective); deterministic given
    config.seed.
    """
    init_mean = np.asarray(init_mean, dtype=float)
    dim = init_mean.size
    lower = np.broadcast_to(np.asarray(lower, dtype=float), (dim,))
    upper = np.broadcast_to(np.asarray(upper, dtype=float), (dim,))
    rng = rng_for(config.seed, rng_label)
    mean = np.clip(init_mean, lower, upper)
    if init_std is None:
        std = (upper - lower) / 4.0
    else:
        std = np.broadcast_to(np.asarray(init_std, dtype=float), (dim,)).copy()
    inject = [np.clip(np.asarray(v, dtype=float), lower, upper) for v in inject]
    n_elite = max(1, int(round(config.elite_fraction * config.population)))
    best = None
    best_pen, best_obj = np.inf, -np.inf
    for _ in range(config.iterations):
        C = rng.normal(mean, std, size=(config.population, dim))
        C = np.clip(C, lower, upper)
        for j, v in enumerate(inject[: config.population // 2]):
            C[config.population - 1 - j] = v
        pen, obj = evaluate(C)
        pen = np.where(np.isfinite(pen), pen, _BAD_PEN)
        obj = np.where(np.isfinite(obj), obj, _BAD_OBJ)
        order = np.lexsort((-obj, pen))
        top = order[0]
        if (pen[top], -obj[top]) < (best_pen, -best_obj):
            best, best_pen, best_obj = C[top].copy(), pen[top], obj[top]
        elite = C[order[:n_elite]]
        mean = (1 - CEM_SMOOTHING) * mean + CEM_SMOOTHING * elite.mean(axis=0)
        std = (1 - CEM_SMOOTHING) * std + CEM_SMOOTHING * elite.std(axis=0)
        std = np.maximum(std, 1e-9)
    return best, float(best_pen), float(best_obj)


# ------------------------------------------------------ candidate structure


def _action_box(config: PlanConfig, H: int, shrink: float):
    box = config.constraints.input_box
    lo = np.tile(box[:, 0] + shrink, H)
    hi = np.tile(box[:, 1] - shrink, H)
    if np.any(lo >= hi):
        raise InfeasiblePlanError("input box empty after tightening")
    return lo, hi


def _x0_box(sset: SafeSet, state_box: np.ndarray):
    """Candidate bounds for the start-state block: subspace coordinates in
    the ellipsoid's bounding box, floating coordinates in the state box."""
    rad = sset.boundary_radius()
    floating = [j for j in range(state_box.shape[0]) if j not in sset.dims]
    lo = np.concatenate([-rad, state_box[floating, 0]])
    hi = np.concatenate([rad, state_box[floating, 1]])
    return lo, hi, floating


def _decode_x0(C0: np.ndarray, sset: SafeSet, floating, n_x: int):
    """Map candidate start-state blocks into the safe set: subspace offsets
    are radially projected into the ellipsoid, floating dims pass through."""
    d = sset.d
    e = C0[:, :d]
    q = np.einsum("pi,ij,pj->p", e, sset.P, e)
    scale = 1.0 / np.maximum(1.0, np.sqrt(q / sset.c))
    e = e * scale[:, None]
    X0 = np.tile(sset.center, (C0.shape[0], 1))
    X0[:, list(sset.dims)] += e
    if floating:
        X0[:, floating] = C0[:, d:]
    return X0


def _encode_x0(x0: np.ndarray, sset: SafeSet, floating) -> np.ndarray:
    e = x0[list(sset.dims)] - sset.center[list(sset.dims)]
    return np.concatenate([e, x0[floating]])


def _terminal_policy_actions(
    model: DynamicsModel, sset: SafeSet, x0: np.ndarray, H: int
) -> np.ndarray:
    """Unroll pi_f on the posterior mean: the always-feasible anchor plan."""
    x = np.asarray(x0, dtype=float)
    out = np.empty((H, sset.u_eq.size))
    for h in range(H):
        u = sset.feedback(x[None, :])[0]
        out[h] = u
        x = model.posterior_mean_step(x[None, :], u[None, :])[0]
    return out


def shift_plan_actions(plan: Plan, executed: int, u_tail: np.ndarray):
    """Drop the executed prefix and pad with u_tail (warm-start candidate)."""
    H = plan.actions.shape[0]
    executed = min(max(executed, 0), H)
    tail = np.tile(u_tail, (executed, 1))
    return np.vstack([plan.actions[executed:], tail])


def _violations(
    config: PlanConfig, states: np.ndarray, sset: SafeSet | None,
    shrink: float, terminal_shrink: float | None = None,
):
    """Per-rollout summed constraint violation: every state in the
    (tightened) constraint set plus the terminal safe-set condition.
    states (..., H+1, n_x) -> (...)."""
    cs = config.constraints
    v = cs.state_violation(states, shrink).sum(axis=-1)
    if sset is not None:
        ts = shrink if terminal_shrink is None else terminal_shrink
        xT = states[..., -1, :]
        q = sset.quad(xT)
        if ts > 0.0:
            corners = box_corners(ts, sset.d)
            e = sset.error(xT)[..., None, :] + corners
            q = np.einsum("...ki,ij,...kj->...k", e, sset.P, e).max(axis=-1)
        v = v + np.maximum(q / sset.c - 1.0, 0.0)
    return v


# ------------------------------------------------------------------- solvers


def solve_exploration(
    x0: np.ndarray,
    model: DynamicsModel,
    safe_set: SafeSet,
    config: PlanConfig,
    jany_context: dict,
) -> Plan:
    """Slack-relaxed informative planning from the current state.

    Maximizes -lambda nu + J_any where nu = max(0, eps_d - best width reached
    by any sample at any step); constraints (all samples in the constraint
    set, terminal states in the safe set) enter as lexicographic penalties.
    jany_context keys: mode, optimistic_states, reward_spec, start_index,
    width_bonus, hard, warm_actions, u_init.
    """
    x0 = np.asarray(x0, dtype=float)
    H = config.horizon_total
    n_u = config.constraints.input_box.shape[0]
    eps_d = config.tolerances.eps_d
    hard = bool(jany_context.get("hard", False))
    mode = jany_context.get("mode", "reward-plus-uncertainty")
    ref_states = jany_context.get("optimistic_states")
    rspec = jany_context.get("reward_spec")
    k0 = int(jany_context.get("start_index", 0))
    bonus = float(jany_context.get("width_bonus", 0.0))
    samples = model.sample_dynamics(config.sample_count, config.seed)
    lo, hi = _action_box(config, H, config.margin)
    M = len(samples)

    if mode == "distance-to-optimistic" and ref_states is not None:
        ref = np.asarray(ref_states, dtype=float)
        if ref.shape[0] < H + 1:
            ref = np.vstack(
                [ref, np.repeat(ref[-1:], H + 1 - ref.shape[0], axis=0)]
            )
        ref = ref[: H + 1]
    else:
        ref = None

    def evaluate(C):
        A = C.reshape(C.shape[0], H, n_u)
        X0 = np.tile(x0, (C.shape[0], 1))
        states, Z = _rollout_samples(model, samples, X0, A)
        w = model.widths_batch(Z)  # (P, M, H)
        wmax = w.reshape(w.shape[0], -1).max(axis=1)
        nu = np.maximum(0.0, eps_d - wmax)
        pen = _violations(config, states, safe_set, config.margin).sum(axis=1)
        if hard:
            pen = pen + nu
        if mode == "reward-plus-uncertainty":
            base = 0.0
            if rspec is not None:
                base = _reward_sum(rspec, states, A[:, None], k0).mean(axis=1)
            obj = base + bonus * w.max(axis=1).sum(axis=-1)
        elif mode == "distance-to-optimistic":
            dist = (
                np.abs(states.mean(axis=1) - ref).max(axis=-1).mean(axis=-1)
            )
            obj = -dist + bonus * w.max(axis=1).sum(axis=-1)
        elif mode == "first-optimistic-state":
            dist = (
                np.abs(states.mean(axis=1) - ref[0]).max(axis=-1).min(axis=-1)
            )
            obj = -dist + bonus * w.max(axis=1).sum(axis=-1)
        else:
            raise ValueError(f"unknown J_any mode {mode!r}")
        return pen, obj - config.penalty_weight * nu

    inject = []
    warm = jany_context.get("warm_actions")
    if warm is not None:
        inject.append(np.asarray(warm, dtype=float)[:H].reshape(-1))
    inject.append(_terminal_policy_actions(model, safe_set, x0, H).reshape(-1))
    u_init = jany_context.get("u_init")
    init_mean = (
        np.tile(np.asarray(u_init, dtype=float), H)
        if u_init is not None
        else (lo + hi) / 2.0
    )
    if warm is not None:
        init_mean = inject[0]
    std = jany_context.get("u_init_std")
    best, _, _ = cem_optimize(
        evaluate, config, init_mean, lo, hi, init_std=std, inject=inject,
        rng_label="cem-explore",
    )
    A = best.reshape(1, H, n_u)
    states, Z = _rollout_samples(model, samples, np.tile(x0, (1, 1)), A)
    w = model.widths_batch(Z)[0]  # (M, H)
    wmax = float(w.max())
    nu = max(0.0, eps_d - wmax)
    pen = float(
        _violations(config, states, safe_set, config.margin).sum()
    )
    feasible = pen == 0.0 and (not hard or nu == 0.0)
    _, h_star = np.unravel_index(int(w.argmax()), w.shape)
    obj = evaluate(best[None, :])[1][0]
    return Plan(
        actions=A[0],
        per_sample_states=states[0],
        objective_value=float(obj),
        slack=float(nu),
        feasible=bool(feasible),
        info_step=int(h_star),
        x0=x0,
        raw=best,
    )


def solve_optimistic(
    safe_set: SafeSet,
    model: DynamicsModel,
    config: PlanConfig,
    reward_spec: RewardSpec,
    start_index: int = 0,
    x0_hint: np.ndarray | None = None,
    warm: Plan | None = None,
):
    """Best-case reward over start state (in the safe set), dynamics sample,
    and actions, under eps-tightened constraints for the chosen sample.

    Returns (x_o, sample_index, Plan, J_o).
    """
    eps = config.tolerances.eps + config.margin
    H = config.horizon
    n_u = config.constraints.input_box.shape[0]
    n_x = safe_set.center.size
    samples = model.sample_dynamics(config.sample_count, config.seed)
    M = len(samples)
    lo_a, hi_a = _action_box(config, H, eps)
    lo_x, hi_x, floating = _x0_box(safe_set, config.constraints.state_box)
    d0 = lo_x.size
    lo = np.concatenate([lo_x, lo_a])
    hi = np.concatenate([hi_x, hi_a])

    def split(C):
        X0 = _decode_x0(C[:, :d0], safe_set, floating, n_x)
        A = C[:, d0:].reshape(C.shape[0], H, n_u)
        return X0, A

    def evaluate_full(C):
        X0, A = split(C)
        states, _ = _rollout_samples(model, samples, X0, A)
        pen = _violations(config, states, safe_set, eps)  # (P, M)
        J = _reward_sum(reward_spec, states, A[:, None], start_index)
        best_pen = pen[:, 0].copy()
        best_J = J[:, 0].copy()
        best_m = np.zeros(C.shape[0], dtype=int)
        for m in range(1, M):
            better = (pen[:, m] < best_pen) | (
                (pen[:, m] == best_pen) & (J[:, m] > best_J)
            )
            best_pen = np.where(better, pen[:, m], best_pen)
            best_J = np.where(better, J[:, m], best_J)
            best_m = np.where(better, m, best_m)
        return best_pen, best_J, best_m, states

    hint = safe_set.recenter(
        x0_hint if x0_hint is not None else safe_set.center
    )
    inject = []
    anchor_enc = _encode_x0(hint, safe_set, floating)
    inject.append(
        np.concatenate(
            [anchor_enc,
             _terminal_policy_actions(model, safe_set, hint, H).reshape(-1)]
        )
    )
    if warm is not None and warm.raw is not None and warm.raw.size == lo.size:
        inject.append(warm.raw)
    init_mean = inject[-1] if len(inject) > 1 else inject[0]
    best, _, _ = cem_optimize(
        lambda C: evaluate_full(C)[:2], config, init_mean, lo, hi,
        inject=inject, rng_label="cem-optimistic",
    )
    pen, J, m_idx, states = evaluate_full(best[None, :])
    X0, A = split(best[None, :])
    feasible = pen[0] == 0.0
    plan = Plan(
        actions=A[0],
        per_sample_states=states[0],
        objective_value=float(J[0]),
        feasible=bool(feasible),
        x0=X0[0],
        sample_index=int(m_idx[0]),
        raw=best,
    )
    return X0[0], int(m_idx[0]), plan, float(J[0])


def solve_pessimistic_reward(
    safe_set: SafeSet,
    model: DynamicsModel,
    config: PlanConfig,
    lips: LipschitzConstants,
    reward_spec: RewardSpec,
    start_index: int = 0,
    x0_hint: np.ndarray | None = None,
    x0_fixed: np.ndarray | None = None,
    warm: Plan | None = None,
):
    """Uncertainty-penalized reward J^p along the posterior-mean rollout,
    with eps'-tightened constraints enforced for every dynamics sample.

    Returns (x_p, Plan, J_p). With x0_fixed the start state is pinned
    (receding-horizon tracking mode).
    """
    epsp = config.tolerances.eps_prime + config.margin
    H = config.horizon
    n_u = config.constraints.input_box.shape[0]
    n_x = safe_set.center.size
    samples = model.sample_dynamics(config.sample_count, config.seed)
    lo_a, hi_a = _action_box(config, H, epsp)
    coef = _jp_penalty_coef(lips, H)
    fixed = x0_fixed is not None
    if fixed:
        x_pin = np.asarray(x0_fixed, dtype=float)
        lo, hi = lo_a, hi_a
        d0 = 0
        floating = []
    else:
        lo_x, hi_x, floating = _x0_box(safe_set, config.constraints.state_box)
        d0 = lo_x.size
        lo = np.concatenate([lo_x, lo_a])
        hi = np.concatenate([hi_x, hi_a])

    def split(C):
        if fixed:
            X0 = np.tile(x_pin, (C.shape[0], 1))
            A = C.reshape(C.shape[0], H, n_u)
        else:
            X0 = _decode_x0(C[:, :d0], safe_set, floating, n_x)
            A = C[:, d0:].reshape(C.shape[0], H, n_u)
        return X0, A

    def evaluate_full(C):
        X0, A = split(C)
        s_states, _ = _rollout_samples(model, samples, X0, A)
        m_states, Zm = _rollout_mean(model, X0, A)
        pen = _violations(config, s_states, safe_set, epsp).sum(axis=1)
        pen = pen + _violations(config, m_states, safe_set, epsp)
        w = model.widths_batch(Zm)  # (P, H)
        J = _reward_sum(reward_spec, m_states, A, start_index)
        Jp = J - (w * coef).sum(axis=-1)
        return pen, Jp, s_states, m_states

    hint = safe_set.recenter(
        x_pin if fixed else
        (x0_hint if x0_hint is not None else safe_set.center)
    )
    tp_x0 = x_pin if fixed else hint
    tp_actions = _terminal_policy_actions(model, safe_set, tp_x0, H)
    if fixed:
        inject = [tp_actions.reshape(-1)]
    else:
        inject = [
            np.concatenate(
                [_encode_x0(hint, safe_set, floating), tp_actions.reshape(-1)]
            )
        ]
    if warm is not None and warm.raw is not None and warm.raw.size == lo.size:
        inject.append(warm.raw)
    init_mean = inject[-1]
    best, _, _ = cem_optimize(
        lambda C: evaluate_full(C)[:2], config, init_mean, lo, hi,
        inject=inject, rng_label="cem-pessimistic",
    )
    pen, Jp, s_states, m_states = evaluate_full(best[None, :])
    X0, A = split(best[None, :])
    plan = Plan(
        actions=A[0],
        per_sample_states=s_states[0],
        objective_value=float(Jp[0]),
        feasible=bool(pen[0] == 0.0),
        x0=X0[0],
        raw=best,
    )
    return X0[0], plan, float(Jp[0])


def solve_tracking(
    dyn,
    x0: np.ndarray,
    config: PlanConfig,
    reward_spec: RewardSpec,
    start_index: int = 0,
    safe_set: SafeSet | None = None,
    warm: Plan | None = None,
) -> Plan:
    """Receding-horizon reward maximization under a single known dynamics
    (the clairvoyant planner; also post-termination tracking with M = 1)."""
    step = dyn.step_batch if hasattr(dyn, "step_batch") else dyn
    x0 = np.asarray(x0, dtype=float)
    H = config.horizon
    n_u = config.constraints.input_box.shape[0]
    lo, hi = _action_box(config, H, config.margin)

    def evaluate(C):
        A = C.reshape(C.shape[0], H, n_u)
        states = _rollout_fn(step, np.tile(x0, (C.shape[0], 1)), A)
        pen = _violations(config, states, safe_set, config.margin)
        J = _reward_sum(reward_spec, states, A, start_index)
        return pen, J

    inject = []
    if warm is not None and warm.raw is not None and warm.raw.size == lo.size:
        inject.append(warm.raw)
    init_mean = inject[0] if inject else (lo + hi) / 2.0
    best, _, _ = cem_optimize(
        evaluate, config, init_mean, lo, hi, inject=inject,
        rng_label="cem-tracking",
    )
    pen, J = evaluate(best[None, :])
    A = best.reshape(H, n_u)
    states = _rollout_fn(step, x0[None, :], A[None, :])[0]
    return Plan(
        actions=A,
        per_sample_states=states[None, :],
        objective_value=float(J[0]),
        feasible=bool(pen[0] == 0.0),
        x0=x0,
        raw=best,
    )
