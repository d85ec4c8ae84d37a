"""Non-episodic safe learning loops.

Two loops share one execution engine. The exploration loop repeatedly
solves the hard (zero-slack) informative planning problem, executes the
whole plan while collecting sufficiently uncertain transitions, and refits;
it terminates when no reachable point has width >= eps_d. The
reward-seeking loop interleaves a termination check (optimistic vs
pessimistic value) with slack-relaxed informative plans from the current
state; once the pessimistic value is provably near-optimistic it returns a
final policy (a steering prefix plus the pessimistic plan) and keeps
tracking with the frozen model so that full-horizon regret stays
comparable across runs.

All stochasticity flows through a per-step noise table keyed by the run
seed, so runs with different controllers but equal seeds see identical
disturbances at equal step indices.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ._util import rng_for
from .bounds import LipschitzConstants, termination_slack
from .envs import Environment, draw_noise, reward
from .model import DataPoint, DynamicsModel
from .planner import (
    Plan,
    PlanConfig,
    shift_plan_actions,
    solve_exploration,
    solve_optimistic,
    solve_pessimistic_reward,
)
from .safeset import SafeSet, build_safe_set, steer

RETURN_BUDGET_FACTOR = 3  # extra feedback steps allowed during the return leg


# ------------------------------------------------------------------ logging


@dataclass
class RunLog:
    """Per-step trajectory rows plus a structured event stream."""

    env_name: str
    seed: int
    rows: list = field(default_factory=list)
    events: list = field(default_factory=list)
    violations: int = 0
    collected: int = 0

    def add_row(self, k, x, u, constraints, width, collected):
        in_x = bool(constraints.state_ok(x, 0.0))
        in_u = bool(constraints.input_ok(u, 0.0))
        if not in_x:
            self.violations += 1
        if collected:
            self.collected += 1
        self.rows.append(
            (int(k), np.asarray(x, dtype=float).copy(),
             np.asarray(u, dtype=float).copy(), in_x, in_u,
             float(width), bool(collected))
        )

    def event(self, kind: str, step: int, **data):
        self.events.append({"kind": kind, "step": int(step), **data})

    def states(self) -> np.ndarray:
        return np.asarray([r[1] for r in self.rows])

    def to_trajectory_csv(self) -> str:
        if not self.rows:
            return "k\n"
        n_x = self.rows[0][1].size
        n_u = self.rows[0][2].size
        head = (
            ["k"]
            + [f"x{i}" for i in range(n_x)]
            + [f"u{i}" for i in range(n_u)]
            + ["in_X", "in_U", "width", "collected"]
        )
        lines = [",".join(head)]
        for k, x, u, in_x, in_u, w, coll in self.rows:
            cells = (
                [str(k)]
                + [repr(float(v)) for v in x]
                + [repr(float(v)) for v in u]
                + [str(int(in_x)), str(int(in_u)), repr(w), str(int(coll))]
            )
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class FinalPolicy:
    """Policy returned on termination: steer to the pessimistic start, then
    play the pessimistic plan."""

    steer_actions: np.ndarray  # (h, n_u), possibly empty
    plan: Plan
    x_p: np.ndarray
    J_p: float
    J_o: float
    slack: float  # termination slack at the declared horizon


@dataclass
class ExecutionResult:
    state: np.ndarray
    batch: list
    steps: int
    first_collect: int | None
    violated: bool


@dataclass
class ExploreResult:
    model: DynamicsModel
    safe_set: SafeSet
    log: RunLog
    terminated: bool
    updates: int
    steps: int
    state: np.ndarray | None = None


@dataclass
class RunResult:
    log: RunLog
    model: DynamicsModel | None
    safe_set: SafeSet | None
    final_policy: FinalPolicy | None
    terminated_step: int | None
    updates: int
    steps: int
    J_o: float | None = None
    J_p: float | None = None

    def summary(self) -> dict:
        out = {
            "env": self.log.env_name,
            "seed": self.log.seed,
            "steps": self.steps,
            "updates": self.updates,
            "collected": self.log.collected,
            "violations": self.log.violations,
            "terminated": self.terminated_step is not None,
            "terminated_step": self.terminated_step,
            "J_o": self.J_o,
            "J_p": self.J_p,
        }
        if self.model is not None:
            out["data_points"] = len(self.model.dataset.points)
            out["probe_mean_width_history"] = [
                float(v) for v in self.model.probe_mean_width_history
            ]
        return out


# ----------------------------------------------------------------- plumbing


def make_model(
    env: Environment,
    seed: int,
    beta_override: float | None = 4.0,
    rkhs_bound: float = 1.0,
    delta: float = 0.1,
    probe_count: int = 64,
) -> DynamicsModel:
    """Prior-conditioned dynamics model for an environment."""
    model = DynamicsModel(
        env.kernel,
        env.n_x,
        env.n_u,
        noise_std=env.noise_std,
        rkhs_bound=rkhs_bound,
        delta=delta,
        delta_mode=env.delta_mode,
        probe_grid=env.probe_grid(probe_count),
        beta_override=beta_override,
        seed=seed,
    )
    return model.fit(env.prior_batch(seed))


def noise_table(env: Environment, seed: int, steps: int) -> np.ndarray:
    """Pre-drawn per-step disturbances shared across compared runs."""
    rng = rng_for(seed, "noise", env.name)
    return draw_noise(rng, env.eta_bound, (steps, env.n_x))


def _plan_seed(seed: int, update: int, tag: str) -> int:
    return int(rng_for(seed, "plan-seed", str(update), tag).integers(2**31 - 1))


def termination_check(
    J_p: float,
    J_o: float,
    lips: LipschitzConstants,
    eps_d: float,
    horizon: int,
) -> bool:
    """Stop exploring once the pessimistic value is within the provable
    exploration gain of the optimistic one."""
    return J_p >= J_o - termination_slack(lips, eps_d, horizon)


# ---------------------------------------------------------------- execution


def execute_with_collection(
    env: Environment,
    plan: Plan,
    model: DynamicsModel,
    state: np.ndarray,
    k0: int,
    noise: np.ndarray,
    log: RunLog,
    eps_c: float,
    cadence: int,
    *,
    stop_at_first: bool = False,
    max_collect: int | None = None,
    max_steps: int | None = None,
) -> ExecutionResult:
    """Apply a plan to the real system, logging every step and collecting
    (z, x_next) pairs at cadence steps whose pre-update width is >= eps_c.

    stop_at_first halts right after the first collection (reward loop);
    otherwise the full plan runs (exploration loop). Collection keeps at
    most max_collect points, earliest first.
    """
    if max_collect is None:
        max_collect = plan.actions.shape[0]
    x = np.asarray(state, dtype=float)
    batch: list[DataPoint] = []
    first = None
    steps = 0
    violated = False
    for h, u in enumerate(plan.actions):
        k = k0 + h
        if max_steps is not None and k >= max_steps:
            break
        if k >= noise.shape[0]:
            break
        z = np.concatenate([x, u])
        w = model.width(z)[1]
        x_next = env.true_step(x[None, :], u[None, :])[0] + noise[k]
        collected = False
        if k % cadence == 0 and w >= eps_c and len(batch) < max_collect:
            batch.append(DataPoint(z, x_next))
            collected = True
            if first is None:
                first = h
        log.add_row(k, x, u, env.constraints, w, collected)
        if not env.constraints.state_ok(x, 0.0):
            violated = True
        x = x_next
        steps += 1
        if stop_at_first and collected:
            break
    return ExecutionResult(x, batch, steps, first, violated)


def _feedback_leg(
    env, sset, model, x, k0, noise, log, budget, max_steps
):
    """Drive toward the safe set with the terminal controller (no plan)."""
    steps = 0
    while (
        not sset.contains(x)
        and steps < budget
        and k0 + steps < max_steps
        and k0 + steps < noise.shape[0]
    ):
        u = sset.feedback(x[None, :])[0]
        z = np.concatenate([x, u])
        log.add_row(k0 + steps, x, u, env.constraints, model.width(z)[1], False)
        x = env.true_step(x[None, :], u[None, :])[0] + noise[k0 + steps]
        steps += 1
    return x, steps


# ------------------------------------------------------------- exploration


def explore_run(
    env: Environment,
    plan_config: PlanConfig,
    lips: LipschitzConstants,
    *,
    seed: int = 0,
    model: DynamicsModel | None = None,
    safe_set: SafeSet | None = None,
    max_steps: int = 2000,
    max_updates: int = 200,
    jany_mode: str = "reward-plus-uncertainty",
    width_bonus: float = 1.0,
    log: RunLog | None = None,
    start_state: np.ndarray | None = None,
    start_step: int = 0,
    noise: np.ndarray | None = None,
) -> ExploreResult:
    """Pure exploration until no reachable point is informative.

    Each round solves the hard informative problem from the current state,
    executes the entire plan collecting uncertain transitions on the cadence
    grid, then refits the model and re-certifies the safe set. Slack in the
    hard problem signals that uncertainty is exhausted and the loop stops.
    """
    tol = plan_config.tolerances
    if model is None:
        model = make_model(env, seed)
    if safe_set is None:
        safe_set = build_safe_set(
            env, model, plan_config.sample_count, seed=seed
        )
    if log is None:
        log = RunLog(env.name, seed)
    if noise is None:
        noise = noise_table(env, seed, max_steps + plan_config.horizon_total)
    x = np.asarray(env.x0 if start_state is None else start_state, dtype=float)
    k = start_step
    n = 0
    warm = None
    terminated = False
    while k < max_steps and n < max_updates:
        cfg = replace(plan_config, seed=_plan_seed(seed, n, "explore"))
        ctx = {
            "mode": jany_mode,
            "reward_spec": env.reward_spec,
            "start_index": k,
            "width_bonus": width_bonus,
            "hard": True,
            "warm_actions": warm,
            "u_init": env.u_init,
            "u_init_std": env.u_init_std,
        }
        plan = solve_exploration(x, model, safe_set, cfg, ctx)
        if plan.slack > 0.0:
            log.event(
                "exploration-complete", k, update=n, slack=plan.slack,
                feasible=plan.feasible,
            )
            terminated = True
            break
        if not plan.feasible:
            log.event("plan-infeasible", k, update=n)
            x, moved = _feedback_leg(
                env, safe_set, model, x, k, noise, log, 1, max_steps
            )
            k += moved
            if moved == 0:
                break
            continue
        res = execute_with_collection(
            env, plan, model, x, k, noise, log, tol.eps_c, env.collect_every,
            stop_at_first=False, max_collect=plan_config.horizon_total,
            max_steps=max_steps,
        )
        x = res.state
        k += res.steps
        if res.violated:
            log.event("safety-violation", k, update=n)
        batch = res.batch
        if not batch:
            # liveness guard: keep the single most informative visited point
            tail = log.rows[-res.steps :]
            best = max(range(len(tail)), key=lambda i: tail[i][5])
            kb, xb, ub, _, _, wb, _ = tail[best]
            nxt = tail[best + 1][1] if best + 1 < len(tail) else x
            batch = [DataPoint(np.concatenate([xb, ub]), nxt)]
            log.event("fallback-collect", kb, update=n, width=wb)
        model = model.fit(batch)
        safe_set = build_safe_set(
            env, model, plan_config.sample_count, seed=seed, prev=safe_set
        )
        warm = shift_plan_actions(plan, res.steps, safe_set.u_eq)
        log.event(
            "update", k, update=n, batch=len(batch),
            width_slack=plan.slack, objective=plan.objective_value,
        )
        n += 1
    if not terminated and (k >= max_steps or n >= max_updates):
        log.event("step-cap", k, update=n)
    return ExploreResult(model, safe_set, log, terminated, n, k, state=x)


# ------------------------------------------------------------- reward loop


def _tracking_leg(
    env,
    model,
    safe_set,
    plan_config,
    lips,
    log,
    x,
    k,
    noise,
    *,
    seed,
    max_steps,
    replan_every=5,
    warm=None,
):
    """Receding-horizon pessimistic tracking with a frozen model."""
    while k < max_steps and k < noise.shape[0]:
        cfg = replace(plan_config, seed=_plan_seed(seed, k, "track"))
        _, plan, _ = solve_pessimistic_reward(
            safe_set, model, cfg, lips, env.reward_spec,
            start_index=k, x0_fixed=x, warm=warm,
        )
        warm = plan
        take = min(replan_every, plan.actions.shape[0], max_steps - k)
        for h in range(take):
            if k >= noise.shape[0]:
                break
            u = plan.actions[h]
            z = np.concatenate([x, u])
            log.add_row(k, x, u, env.constraints, model.width(z)[1], False)
            x = env.true_step(x[None, :], u[None, :])[0] + noise[k]
            k += 1
    return x, k


def sagedynx_run(
    env: Environment,
    plan_config: PlanConfig,
    lips: LipschitzConstants,
    *,
    seed: int = 0,
    model: DynamicsModel | None = None,
    max_steps: int = 600,
    learn: bool = True,
    jany_mode: str = "distance-to-optimistic",
    width_bonus: float = 0.1,
    check_every: int | None = None,
    replan_every: int = 5,
    max_updates: int = 400,
) -> RunResult:
    """Reward-seeking safe learning loop.

    Per model update: run the optimistic/pessimistic termination check on
    its cadence; if passed, physically return to the safe set, steer to the
    pessimistic start, hand over to the pessimistic plan (the returned
    policy), and keep tracking with the frozen model. Otherwise re-solve
    the slack-relaxed informative problem from the current state: zero
    slack executes until the first informative transition is collected;
    positive slack first drains the previous plan back to the safe set and
    then enforces the hard problem.

    learn=False freezes the prior model and skips the learning loop
    entirely (the no-learning baseline).
    """
    tol = plan_config.tolerances
    if check_every is None:
        check_every = env.check_every
    if model is None:
        model = make_model(env, seed)
    log = RunLog(env.name, seed)
    noise = noise_table(env, seed, max_steps + 4 * plan_config.horizon_total)
    safe_set = build_safe_set(env, model, plan_config.sample_count, seed=seed)
    x = env.x0.copy()
    k = 0

    if not learn:
        x, k = _tracking_leg(
            env, model, safe_set, plan_config, lips, log, x, k, noise,
            seed=seed, max_steps=max_steps, replan_every=replan_every,
        )
        return RunResult(log, model, safe_set, None, None, 0, k)

    n = 0
    warm_explore = None
    prev_plan: Plan | None = None
    prev_done = 0
    opt_cache = None  # (x_o, plan_o, J_o) at the last check
    pess_cache = None  # (x_p, plan_p, J_p)
    final_policy = None
    terminated_step = None

    while k < max_steps and n < max_updates and final_policy is None:
        cfg = replace(plan_config, seed=_plan_seed(seed, n, "update"))
        if n % check_every == 0 or opt_cache is None:
            x_o, _, plan_o, J_o = solve_optimistic(
                safe_set, model, cfg, env.reward_spec, start_index=k,
                x0_hint=x, warm=opt_cache[1] if opt_cache else None,
            )
            opt_cache = (x_o, plan_o, J_o)
            x_p, plan_p, J_p = solve_pessimistic_reward(
                safe_set, model, cfg, lips, env.reward_spec, start_index=k,
                x0_hint=x, warm=pess_cache[1] if pess_cache else None,
            )
            pess_cache = (x_p, plan_p, J_p)
            log.event(
                "check", k, update=n, J_o=J_o, J_p=J_p,
                optimistic_feasible=plan_o.feasible,
                pessimistic_feasible=plan_p.feasible,
            )
            if (
                plan_o.feasible
                and plan_p.feasible
                and termination_check(J_p, J_o, lips, tol.eps_d, cfg.horizon)
            ):
                terminated_step = k
                log.event("terminated", k, update=n, J_o=J_o, J_p=J_p)
                break

        opt_states = opt_cache[1].per_sample_states[
            opt_cache[1].sample_index or 0
        ]
        ctx = {
            "mode": jany_mode,
            "optimistic_states": opt_states,
            "reward_spec": env.reward_spec,
            "start_index": k,
            "width_bonus": width_bonus,
            "hard": False,
            "warm_actions": warm_explore,
            "u_init": env.u_init,
            "u_init_std": env.u_init_std,
        }
        eplan = solve_exploration(x, model, safe_set, cfg, ctx)
        if not eplan.feasible:
            log.event("plan-infeasible", k, update=n)
            x, moved = _feedback_leg(
                env, safe_set, model, x, k, noise, log, 1, max_steps
            )
            k += moved
            if moved == 0:
                break
            continue
        if eplan.slack > 0.0:
            log.event("slack-branch", k, update=n, slack=eplan.slack)
            # drain the previous plan back into the safe set, then go hard
            while (
                prev_plan is not None
                and prev_done < prev_plan.actions.shape[0]
                and not safe_set.contains(x)
                and k < max_steps
                and k < noise.shape[0]
            ):
                u = prev_plan.actions[prev_done]
                z = np.concatenate([x, u])
                log.add_row(
                    k, x, u, env.constraints, model.width(z)[1], False
                )
                x = env.true_step(x[None, :], u[None, :])[0] + noise[k]
                k += 1
                prev_done += 1
            x, moved = _feedback_leg(
                env, safe_set, model, x, k, noise, log,
                RETURN_BUDGET_FACTOR * plan_config.delta_h, max_steps,
            )
            k += moved
            hard_cfg = replace(cfg, seed=_plan_seed(seed, n, "hard"))
            ctx_hard = dict(ctx, hard=True, start_index=k, warm_actions=None)
            eplan = solve_exploration(x, model, safe_set, hard_cfg, ctx_hard)
            if eplan.slack > 0.0 or not eplan.feasible:
                log.event(
                    "uncertainty-exhausted", k, update=n, slack=eplan.slack
                )
                terminated_step = k
                break
        res = execute_with_collection(
            env, eplan, model, x, k, noise, log, tol.eps_c, env.collect_every,
            stop_at_first=True, max_collect=plan_config.horizon_total,
            max_steps=max_steps,
        )
        x = res.state
        k += res.steps
        prev_plan = eplan
        prev_done = res.steps
        if res.violated:
            log.event("safety-violation", k, update=n)
        if not res.batch and res.steps > 0:
            # zero-slack plans promise an informative point; if the cadence
            # grid missed it, keep the most informative visited one
            tail = log.rows[-res.steps :]
            best = max(range(len(tail)), key=lambda i: tail[i][5])
            if tail[best][5] >= tol.eps_c:
                kb, xb, ub, _, _, wb, _ = tail[best]
                nxt = tail[best + 1][1] if best + 1 < len(tail) else x
                res.batch = [DataPoint(np.concatenate([xb, ub]), nxt)]
                log.event("fallback-collect", kb, update=n, width=wb)
        if res.batch:
            model = model.fit(res.batch)
            safe_set = build_safe_set(
                env, model, plan_config.sample_count, seed=seed,
                prev=safe_set,
            )
            log.event("update", k, update=n, batch=len(res.batch))
            n += 1
            warm_explore = shift_plan_actions(eplan, res.steps, safe_set.u_eq)
        else:
            warm_explore = shift_plan_actions(eplan, res.steps, safe_set.u_eq)
            if res.steps == 0:
                break

    J_o = opt_cache[2] if opt_cache else None
    J_p = pess_cache[2] if pess_cache else None

    if terminated_step is not None and pess_cache is not None:
        x_p, plan_p, J_p = pess_cache
        # physical return: drain the previous plan, then feedback to X_n
        while (
            prev_plan is not None
            and prev_done < prev_plan.actions.shape[0]
            and not safe_set.contains(x)
            and k < max_steps
            and k < noise.shape[0]
        ):
            u = prev_plan.actions[prev_done]
            z = np.concatenate([x, u])
            log.add_row(k, x, u, env.constraints, model.width(z)[1], False)
            x = env.true_step(x[None, :], u[None, :])[0] + noise[k]
            k += 1
            prev_done += 1
        x, moved = _feedback_leg(
            env, safe_set, model, x, k, noise, log,
            RETURN_BUDGET_FACTOR * plan_config.horizon_total, max_steps,
        )
        k += moved
        steer_actions = steer(safe_set, model, x, x_p)
        if steer_actions is None:
            log.event("steer-failed", k)
            cfg = replace(plan_config, seed=_plan_seed(seed, k, "anchor"))
            x_p, plan_p, J_p = solve_pessimistic_reward(
                safe_set, model, cfg, lips, env.reward_spec,
                start_index=k, x0_fixed=x,
            )
            steer_actions = np.zeros((0, env.n_u))
        final_policy = FinalPolicy(
            steer_actions, plan_p, x_p, J_p, J_o if J_o is not None else J_p,
            termination_slack(lips, tol.eps_d, plan_config.horizon),
        )
        for u in steer_actions:  # steer leg
            if k >= max_steps or k >= noise.shape[0]:
                break
            z = np.concatenate([x, u])
            log.add_row(k, x, u, env.constraints, model.width(z)[1], False)
            x = env.true_step(x[None, :], u[None, :])[0] + noise[k]
            k += 1
        for u in plan_p.actions:  # committed pessimistic plan
            if k >= max_steps or k >= noise.shape[0]:
                break
            z = np.concatenate([x, u])
            log.add_row(k, x, u, env.constraints, model.width(z)[1], False)
            x = env.true_step(x[None, :], u[None, :])[0] + noise[k]
            k += 1

    if k < max_steps:  # frozen-model tracking keeps the horizon comparable
        x, k = _tracking_leg(
            env, model, safe_set, plan_config, lips, log, x, k, noise,
            seed=seed, max_steps=max_steps, replan_every=replan_every,
        )

    return RunResult(
        log, model, safe_set, final_policy, terminated_step, n, k,
        J_o=J_o, J_p=J_p,
    )


def replay_policy(
    env: Environment,
    policy: FinalPolicy,
    model: DynamicsModel,
    safe_set: SafeSet,
    seed: int,
    *,
    x0: np.ndarray | None = None,
    start_index: int = 0,
) -> dict:
    """One fresh-noise execution of a returned policy from the start state.

    The steering prefix is recomputed from the actual start under the frozen
    model (falling back to the stored prefix if steering fails); the
    committed pessimistic plan is then replayed verbatim. Reward is summed
    over the plan leg only, so it is comparable to the policy's J_p.
    """
    x = np.asarray(env.x0 if x0 is None else x0, dtype=float).copy()
    prefix = steer(safe_set, model, x, policy.x_p)
    if prefix is None:
        prefix = policy.steer_actions
    total = prefix.shape[0] + policy.plan.actions.shape[0]
    table = draw_noise(
        rng_for(seed, "replay-noise", env.name), env.eta_bound,
        (total, env.n_x),
    )
    k = 0
    violations = 0
    for u in prefix:
        if not env.constraints.state_ok(x, 0.0):
            violations += 1
        x = env.true_step(x[None, :], u[None, :])[0] + table[k]
        k += 1
    J = 0.0
    for h, u in enumerate(policy.plan.actions):
        if not env.constraints.state_ok(x, 0.0):
            violations += 1
        J += float(reward(env.reward_spec, x, u, start_index + h))
        x = env.true_step(x[None, :], u[None, :])[0] + table[k]
        k += 1
    return {
        "J": J,
        "violations": violations,
        "terminal_in_set": bool(np.all(safe_set.contains(x[None, :]))),
        "steer_len": int(prefix.shape[0]),
    }
