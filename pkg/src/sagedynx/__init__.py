"""Safe online learning and control of unknown nonlinear dynamics.

Calibrated probabilistic dynamics models with running-intersection confidence
bounds, pessimistically-safe / optimistically-informative finite-horizon
planning over sampled dynamics, a guaranteed safe-exploration loop, and the
SageDynX reward-maximization loop, benchmarked on pendulum / car / drone
systems.
"""

from . import (  # noqa: F401
    algorithms,
    bounds,
    cli,
    envs,
    harness,
    model,
    planner,
    safeset,
)

__version__ = "0.1.0"
