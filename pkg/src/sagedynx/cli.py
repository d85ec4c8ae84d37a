"""Command-line runner.

Subcommands: explore (pure exploration loop), run (reward-seeking loop),
baseline (no-learning / two-stage references), clairvoyant (true-dynamics
regret reference), report (regret + comparison over finished runs), bounds
(derived tolerance/complexity constants for a config).

Configuration is a JSON file merged over built-in defaults, then over
command-line flags; unknown keys are rejected and the effective config is
echoed to stdout. Artifacts (trajectory.csv, events.jsonl, summary.json,
regret.csv, comparison.json) are byte-stable: no timestamps, floats via
repr. Exit codes: 0 success, 1 safety violation or non-termination,
2 configuration error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .algorithms import explore_run, sagedynx_run
from .bounds import (
    LipschitzConstants,
    Tolerances,
    constant_K_eps,
    derive_eps_d,
    derive_eps_prime,
    sample_complexity_C1,
    termination_slack,
)
from .envs import make_env
from .harness import (
    BASELINE_KINDS,
    RegretSeries,
    aggregate_seeds,
    compute_regret,
    regret_ratio,
    run_baseline,
    run_clairvoyant,
)
from .planner import PlanConfig

# eps_c sits below the post-prior widths so exploration has informative
# targets; eps_d is derive_eps_d at the default Lipschitz constants; the
# tightenings are practical values (the derived eps' is vacuous at desk
# scale, see the bounds subcommand)
_TOL_DEFAULTS = {
    "pendulum": {"eps_c": 0.004, "eps_d": 0.0083, "eps_prime": 0.02, "eps": 0.03},
    "car": {"eps_c": 0.05, "eps_d": 0.0939, "eps_prime": 0.02, "eps": 0.05},
    "drone": {"eps_c": 0.002, "eps_d": 0.0046, "eps_prime": 0.01, "eps": 0.015},
}

_STEP_DEFAULTS = {"pendulum": 600, "car": 300, "drone": 300}

DEFAULTS = {
    "env": "pendulum",
    "seed": 0,
    "seeds": None,  # list of seeds; overrides "seed" when given
    "out": "runs",
    "max_steps": None,  # env default when None
    "max_updates": 200,
    "check_every": None,  # env default
    "collect_every": None,  # env default
    "replan_every": 5,
    "explore_steps": 100,  # two-stage baseline exploration budget
    "kind": "no-learning",
    "beta": 4.0,
    "rkhs_bound": 1.0,
    "confidence_delta": 0.1,
    "noise_std": None,  # env default
    "probe_count": 64,
    "jany_mode": "distance-to-optimistic",
    "explore_jany_mode": "reward-plus-uncertainty",
    "width_bonus": 0.1,
    "tolerances": None,  # env default when None
    "lipschitz": {"L": 1.0, "L_w": 0.03, "L_r": 10.0, "L_pi": 0.0},
    "planner": {
        "horizon": 21,
        "delta_h": 10,
        "population": 48,
        "elite_fraction": 0.1,
        "iterations": 4,
        "init_action_std": None,
        "penalty_weight": 1000.0,
        "sample_count": None,  # env default
        "margin": 0.0,
        "noise_rollouts": 1,
    },
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, where)
        else:
            out[key] = copy.deepcopy(val)
    return out


def parse_config(path: str | None, overrides: dict | None = None) -> dict:
    """Defaults <- JSON file <- explicit overrides, with env-dependent
    fallbacks resolved last."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
        cfg = _merge(cfg, doc)
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in cfg:
            raise ConfigError(f"unknown config key: {key}")
        if isinstance(cfg[key], dict) and isinstance(val, dict):
            cfg[key] = _merge(cfg[key], val, key)
        else:
            cfg[key] = val
    if cfg["env"] not in _TOL_DEFAULTS:
        raise ConfigError(f"unknown env {cfg['env']!r}")
    tol = dict(_TOL_DEFAULTS[cfg["env"]])
    if cfg["tolerances"]:
        for key, val in cfg["tolerances"].items():
            if key not in tol:
                raise ConfigError(f"unknown config key: tolerances.{key}")
            tol[key] = val
    cfg["tolerances"] = tol
    if cfg["max_steps"] is None:
        cfg["max_steps"] = _STEP_DEFAULTS[cfg["env"]]
    if cfg["seeds"] is None:
        cfg["seeds"] = [cfg["seed"]]
    return cfg


def _build(cfg: dict, seed: int):
    over = {}
    for key in ("collect_every", "check_every"):
        if cfg[key] is not None:
            over[key] = cfg[key]
    if cfg["noise_std"] is not None:
        over["noise_std"] = cfg["noise_std"]
    env = make_env(cfg["env"], **over)
    tol = Tolerances(**cfg["tolerances"])
    lips = LipschitzConstants(**cfg["lipschitz"])
    p = dict(cfg["planner"])
    if p["sample_count"] is None:
        p["sample_count"] = env.n_samples
    if p["init_action_std"] is None and env.u_init_std is not None:
        p["init_action_std"] = env.u_init_std
    pcfg = PlanConfig(
        constraints=env.constraints, tolerances=tol, seed=seed, **p
    )
    return env, tol, lips, pcfg


# ---------------------------------------------------------------- artifacts


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _emit_run(out: Path, log, summary: dict, extra: dict | None = None):
    _write(out / "trajectory.csv", log.to_trajectory_csv())
    _write(
        out / "events.jsonl",
        "".join(json.dumps(e, sort_keys=True) + "\n" for e in log.events),
    )
    _write(
        out / "summary.json",
        json.dumps(summary, indent=2, sort_keys=True) + "\n",
    )
    for name, doc in (extra or {}).items():
        _write(out / name, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_states(path: Path) -> np.ndarray:
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols = [c for c in rows[0] if c.startswith("x")]
    cols.sort(key=lambda c: int(c[1:]))
    return np.asarray([[float(r[c]) for c in cols] for r in rows])


class _LoggedStates:
    """Adapter so saved trajectories feed compute_regret."""

    def __init__(self, env_name, seed, states):
        self.env_name = env_name
        self.seed = seed
        self._states = states

    def states(self):
        return self._states


# --------------------------------------------------------------- subcommands


def _cmd_explore(cfg: dict) -> int:
    code = 0
    for seed in cfg["seeds"]:
        env, tol, lips, pcfg = _build(cfg, seed)
        res = explore_run(
            env, pcfg, lips, seed=seed, max_steps=cfg["max_steps"],
            max_updates=cfg["max_updates"],
            jany_mode=cfg["explore_jany_mode"],
            width_bonus=cfg["width_bonus"],
        )
        out = Path(cfg["out"]) / env.name / "explore" / f"seed{seed}"
        summary = {
            "env": env.name,
            "seed": seed,
            "steps": res.steps,
            "updates": res.updates,
            "terminated": res.terminated,
            "collected": res.log.collected,
            "violations": res.log.violations,
            "data_points": len(res.model.dataset.points),
            "probe_mean_width_history": [
                float(v) for v in res.model.probe_mean_width_history
            ],
        }
        _emit_run(
            out, res.log, summary,
            extra={
                "model.json": res.model.to_json(),
                "safeset.json": res.safe_set.to_json(),
            },
        )
        if not res.terminated or res.log.violations:
            code = 1
    return code


def _cmd_run(cfg: dict) -> int:
    code = 0
    for seed in cfg["seeds"]:
        env, tol, lips, pcfg = _build(cfg, seed)
        res = sagedynx_run(
            env, pcfg, lips, seed=seed, max_steps=cfg["max_steps"],
            jany_mode=cfg["jany_mode"], width_bonus=cfg["width_bonus"],
            replan_every=cfg["replan_every"], max_updates=cfg["max_updates"],
        )
        out = Path(cfg["out"]) / env.name / "run" / f"seed{seed}"
        extra = {
            "model.json": res.model.to_json(),
            "safeset.json": res.safe_set.to_json(),
        }
        if res.final_policy is not None:
            fp = res.final_policy
            extra["policy.json"] = {
                "steer_actions": fp.steer_actions.tolist(),
                "actions": fp.plan.actions.tolist(),
                "x_p": fp.x_p.tolist(),
                "J_p": fp.J_p,
                "J_o": fp.J_o,
                "slack": fp.slack,
            }
        _emit_run(out, res.log, res.summary(), extra=extra)
        if res.log.violations or res.final_policy is None:
            code = 1
    return code


def _cmd_baseline(cfg: dict) -> int:
    if cfg["kind"] not in BASELINE_KINDS:
        raise ConfigError(f"unknown baseline kind {cfg['kind']!r}")
    code = 0
    for seed in cfg["seeds"]:
        env, tol, lips, pcfg = _build(cfg, seed)
        res = run_baseline(
            env, pcfg, lips, cfg["kind"], seed=seed,
            max_steps=cfg["max_steps"], explore_steps=cfg["explore_steps"],
            replan_every=cfg["replan_every"],
        )
        out = (
            Path(cfg["out"]) / env.name / f"baseline-{cfg['kind']}"
            / f"seed{seed}"
        )
        _emit_run(out, res.log, res.summary())
        if res.log.violations:
            code = 1
    return code


def _cmd_clairvoyant(cfg: dict) -> int:
    code = 0
    for seed in cfg["seeds"]:
        env, tol, lips, pcfg = _build(cfg, seed)
        res = run_clairvoyant(
            env, pcfg, seed=seed, max_steps=cfg["max_steps"],
            replan_every=cfg["replan_every"],
        )
        out = Path(cfg["out"]) / env.name / "clairvoyant" / f"seed{seed}"
        _emit_run(out, res.log, res.summary())
        if res.log.violations:
            code = 1
    return code


def _cmd_report(cfg: dict) -> int:
    env = make_env(cfg["env"])
    root = Path(cfg["out"]) / env.name
    refs = {}
    for seed in cfg["seeds"]:
        path = root / "clairvoyant" / f"seed{seed}" / "trajectory.csv"
        if not path.exists():
            raise ConfigError(f"missing clairvoyant run: {path}")
        refs[seed] = _LoggedStates(env.name, seed, _read_states(path))
    aggregates = {}
    for label in ("run",) + tuple(f"baseline-{k}" for k in BASELINE_KINDS):
        series = []
        for seed in cfg["seeds"]:
            path = root / label / f"seed{seed}" / "trajectory.csv"
            if not path.exists():
                continue
            states = _LoggedStates(env.name, seed, _read_states(path))
            reg = compute_regret(states, refs[seed], env.pos_idx, label=label)
            series.append(reg)
            _write(
                root / "report" / f"regret-{label}-seed{seed}.csv",
                reg.to_csv(),
            )
        if series:
            aggregates[label] = aggregate_seeds(series)
    if "run" not in aggregates:
        raise ConfigError("no finished learner runs to report on")
    comparison = {
        "env": env.name,
        "seeds": list(cfg["seeds"]),
        "aggregates": aggregates,
        "ratios": {
            label: regret_ratio(aggregates["run"], agg)
            for label, agg in aggregates.items()
            if label != "run"
        },
    }
    _write(
        root / "report" / "comparison.json",
        json.dumps(comparison, indent=2, sort_keys=True) + "\n",
    )
    return 0


def _cmd_bounds(cfg: dict) -> int:
    env, tol, lips, pcfg = _build(cfg, cfg["seeds"][0])
    eta = env.eta_bound
    doc = {
        "env": env.name,
        "tolerances": cfg["tolerances"],
        "derived_eps_d": derive_eps_d(tol.eps_c, eta, lips, pcfg.horizon_total),
        "derived_eps_prime": derive_eps_prime(
            tol.eps_c, eta, lips, pcfg.horizon, pcfg.delta_h
        ),
        "termination_slack": termination_slack(lips, tol.eps_d, pcfg.horizon),
        "regret_constant": constant_K_eps(
            lips, tol.eps_c, tol.eps_d, eta, pcfg.horizon, pcfg.delta_h
        ),
        "sample_complexity_C1": sample_complexity_C1(
            pcfg.horizon_total, env.noise_std
        ),
    }
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


_COMMANDS = {
    "explore": _cmd_explore,
    "run": _cmd_run,
    "baseline": _cmd_baseline,
    "clairvoyant": _cmd_clairvoyant,
    "report": _cmd_report,
    "bounds": _cmd_bounds,
}


def _parse_seeds(text: str) -> list[int]:
    if ".." in text:
        a, b = text.split("..", 1)
        return list(range(int(a), int(b)))
    return [int(text)]


def _make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sagedynx",
        description="safe exploration and control of unknown dynamics",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--env", choices=sorted(_TOL_DEFAULTS))
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument(
            "--seeds", type=_parse_seeds, default=None,
            help="range a..b (end-exclusive) or a single seed",
        )
        p.add_argument("--out", default=None)
        p.add_argument("--check-every", dest="check_every", type=int)
        p.add_argument("--max-steps", dest="max_steps", type=int)
        p.add_argument("--replan-every", dest="replan_every", type=int)
        if name == "baseline":
            p.add_argument("--kind", choices=BASELINE_KINDS)
    return parser


def main(argv=None) -> int:
    parser = _make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return 2 if err.code not in (0, None) else 0
    overrides = {
        key: getattr(args, key, None)
        for key in (
            "env", "seed", "seeds", "out", "check_every", "max_steps",
            "replan_every", "kind",
        )
    }
    try:
        cfg = parse_config(args.config, overrides)
        print(json.dumps({"config": cfg}, sort_keys=True))
        return _COMMANDS[args.command](cfg)
    except (ConfigError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
