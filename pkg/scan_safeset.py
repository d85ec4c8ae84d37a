import time

import numpy as np

from sagedynx.algorithms import make_model
from sagedynx.envs import make_pendulum
from sagedynx.safeset import build_safe_set

env = make_pendulum()
for seed in range(4):
    model = make_model(env, seed)
    t0 = time.time()
    sset = build_safe_set(env, model, env.n_samples, seed=seed)
    dt = time.time() - t0
    Pinv = np.linalg.inv(sset.P)
    ext = np.sqrt(sset.c * np.diag(Pinv))
    ufb = np.sqrt(sset.c * np.diag(sset.K_f @ Pinv @ sset.K_f.T))
    cert = sset.certificate
    print(
        f"seed={seed} c={sset.c:.3f} ext=({ext[0]:.3f},{ext[1]:.3f}) "
        f"|u|fb={ufb[0]:.3f} rounds={cert.shrink_rounds} {dt:.1f}s"
    )
    qs = np.array(
        [
            [0.0, 0.0, 0.0],
            [0.35, 0.0, 2.0],
            [0.65, 0.0, 4.0],
            [0.9, 0.0, 3.0],
            [1.1, 0.5, 6.0],
        ]
    )
    w = model.widths_batch(qs)
    print("   widths:", np.array2string(w, precision=4))
