import time

import numpy as np

from sagedynx.cli import parse_config, _build
from sagedynx.algorithms import explore_run

for seed in range(3):
    cfg = parse_config(None, {"seed": seed})
    env, tol, lips, pcfg = _build(cfg, seed=seed)
    t0 = time.time()
    res = explore_run(
        env,
        pcfg,
        lips,
        seed=seed,
        max_steps=cfg["max_steps"] or 600,
        max_updates=cfg["max_updates"],
        jany_mode=cfg["explore_jany_mode"],
        width_bonus=cfg["width_bonus"],
    )
    dt = time.time() - t0
    log = res.log
    n_coll = sum(1 for r in log.rows if r[6])
    widths = [r[5] for r in log.rows if r[6]]
    hist = res.model.probe_mean_width_history
    print(
        f"seed={seed} steps={res.steps} updates={res.updates} "
        f"collected={n_coll} viol={log.violations} term={res.terminated} "
        f"{dt:.1f}s"
    )
    print(
        f"   probe hist ({len(hist)}): "
        + np.array2string(np.array(hist[:8]), precision=4)
    )
    if widths:
        print(f"   collect widths min={min(widths):.4f} max={max(widths):.4f}")
