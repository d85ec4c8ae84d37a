"""Invariant terminal safe sets.

The set is a sublevel set of a quadratic form on a subspace of the state
(velocity-like dimensions; remaining dimensions float and are recentered on
demand): X_n = {x : (x_d - center_d)^T P (x_d - center_d) <= c}. The shape P
and terminal feedback K_f come from a Riccati solve on the posterior-mean
linearization; the level c starts from the analytic box bound and shrinks
geometrically until a seeded Monte-Carlo certificate holds over sampled
dynamics, boundary/interior states, and noise corners.

Rebuilding after a model update keeps the shape fixed and never shrinks the
certified level (safe-set monotonicity).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cholesky, solve_discrete_are, solve_triangular

from ._util import box_corners, in_box, rng_for

C_SHRINK = 0.8
C_MIN_FRACTION = 1e-8
TOL_STEER = 0.02


class SafeSetBuildError(RuntimeError):
    """No certifiable level found; carries the worst violator diagnostic."""


@dataclass(frozen=True)
class CertificateStats:
    transitions: int
    violations: int
    c_initial: float
    shrink_rounds: int
    seed: int


@dataclass(frozen=True)
class SafeSet:
    dims: tuple  # state dimensions entering the quadratic form
    center: np.ndarray  # full anchor state
    P: np.ndarray  # (d, d) SPD shape on the subspace
    c: float
    K_f: np.ndarray  # (n_u, d) terminal feedback on the subspace error
    u_eq: np.ndarray
    state_box: np.ndarray
    input_box: np.ndarray
    steer_horizon: int
    certificate: CertificateStats | None = None

    def __post_init__(self):
        for name in ("center", "P", "K_f", "u_eq", "state_box", "input_box"):
            object.__setattr__(
                self, name, np.asarray(getattr(self, name), dtype=float)
            )
        if self.c <= 0:
            raise ValueError("level c must be > 0")

    @property
    def d(self) -> int:
        return len(self.dims)

    def error(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return X[..., list(self.dims)] - self.center[list(self.dims)]

    def quad(self, X: np.ndarray) -> np.ndarray:
        e = self.error(X)
        return np.einsum("...i,ij,...j->...", e, self.P, e)

    def contains(self, X: np.ndarray, shrink: float = 0.0) -> np.ndarray:
        """Membership of x (and, for shrink > 0, of the whole infinity-ball
        x + shrink B). Exact: the quadratic's maximum over the ball is
        attained at a ball corner (convexity)."""
        if shrink < 0:
            raise ValueError("shrink must be >= 0")
        if shrink == 0.0:
            return self.quad(X) <= self.c
        e = self.error(X)
        corners = box_corners(shrink, self.d)  # (2^d, d)
        ec = e[..., None, :] + corners
        q = np.einsum("...ki,ij,...kj->...k", ec, self.P, ec)
        return q.max(axis=-1) <= self.c

    def feedback(self, X: np.ndarray) -> np.ndarray:
        """Terminal policy pi_f: clipped linear feedback on the subspace."""
        u = self.u_eq + self.error(X) @ self.K_f.T
        return np.clip(u, self.input_box[:, 0], self.input_box[:, 1])

    def recenter(self, x: np.ndarray) -> np.ndarray:
        """Anchor with floating dimensions copied from x (the canonical safe
        state near x, e.g. same position with velocities at equilibrium)."""
        target = np.asarray(x, dtype=float).copy()
        target[list(self.dims)] = self.center[list(self.dims)]
        return target

    def boundary_radius(self) -> np.ndarray:
        """Per-subspace-dimension half extent sqrt(c (P^-1)_jj)."""
        Pinv = np.linalg.inv(self.P)
        return np.sqrt(self.c * np.diag(Pinv))

    def to_json(self) -> dict:
        cert = self.certificate
        return {
            "dims": list(self.dims),
            "center": self.center.tolist(),
            "P": self.P.tolist(),
            "c": self.c,
            "K_f": self.K_f.tolist(),
            "u_eq": self.u_eq.tolist(),
            "steer_horizon": self.steer_horizon,
            "certificate": None
            if cert is None
            else {
                "transitions": cert.transitions,
                "violations": cert.violations,
                "c_initial": cert.c_initial,
                "shrink_rounds": cert.shrink_rounds,
                "seed": cert.seed,
            },
        }


def contains(sset: SafeSet, x: np.ndarray, shrink: float = 0.0):
    return sset.contains(x, shrink)


# ------------------------------------------------------------- construction


def linearize_mean(model, x0: np.ndarray, u0: np.ndarray, rel: float = 1e-5):
    """Central finite differences of the posterior-mean dynamics."""
    x0 = np.asarray(x0, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    n_x, n_u = x0.size, u0.size
    hx = rel * (1.0 + np.abs(x0))
    hu = rel * (1.0 + np.abs(u0))
    X = np.tile(x0, (2 * (n_x + n_u), 1))
    U = np.tile(u0, (2 * (n_x + n_u), 1))
    for j in range(n_x):
        X[2 * j, j] += hx[j]
        X[2 * j + 1, j] -= hx[j]
    for j in range(n_u):
        r = 2 * n_x + 2 * j
        U[r, j] += hu[j]
        U[r + 1, j] -= hu[j]
    F = model.posterior_mean_step(X, U)
    A = np.stack(
        [(F[2 * j] - F[2 * j + 1]) / (2.0 * hx[j]) for j in range(n_x)], axis=1
    )
    B = np.stack(
        [
            (F[2 * n_x + 2 * j] - F[2 * n_x + 2 * j + 1]) / (2.0 * hu[j])
            for j in range(n_u)
        ],
        axis=1,
    )
    return A, B


def _solve_hover(model, env, max_iter: int = 25, tol: float = 1e-11):
    """Gauss-Newton for the drone hover pair (phi, symmetric thrust) on the
    posterior mean: zero next-step velocities from a resting state."""
    phi, u_s = 0.0, float(env.safe_spec.u_eq[0])

    def residual(p):
        x = np.zeros(env.n_x)
        x[2] = p[0]
        u = np.array([p[1], p[1]])
        nxt = model.posterior_mean_step(x[None, :], u[None, :])[0]
        return nxt[3:6]

    p = np.array([phi, u_s])
    for _ in range(max_iter):
        r = residual(p)
        if np.abs(r).max() < tol:
            break
        J = np.zeros((3, 2))
        h = 1e-6
        for j in range(2):
            dp = p.copy()
            dp[j] += h
            J[:, j] = (residual(dp) - r) / h
        step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        p = p + step
    return p[0], np.array([p[1], p[1]])


def _analytic_level(sset: SafeSet) -> float:
    """Largest c keeping the ellipsoid inside the state box margins and the
    feedback inside the input box: per-axis extent sqrt(c (P^-1)_jj) and
    input extent sqrt(c (K P^-1 K^T)_ii)."""
    Pinv = np.linalg.inv(sset.P)
    dims = list(sset.dims)
    lo = sset.state_box[dims, 0]
    hi = sset.state_box[dims, 1]
    margin = np.minimum(hi - sset.center[dims], sset.center[dims] - lo)
    if np.any(margin <= 0):
        raise SafeSetBuildError("anchor outside the state box")
    c = float(np.min(margin**2 / np.diag(Pinv)))
    gain_cov = sset.K_f @ Pinv @ sset.K_f.T
    mu = np.minimum(
        sset.input_box[:, 1] - sset.u_eq, sset.u_eq - sset.input_box[:, 0]
    )
    if np.any(mu <= 0):
        raise SafeSetBuildError("equilibrium input outside the input box")
    g = np.diag(gain_cov)
    active = g > 1e-12
    if np.any(active):
        c = min(c, float(np.min(mu[active] ** 2 / g[active])))
    return c


def _certificate_states(
    sset: SafeSet, rng: np.random.Generator, n_boundary: int, n_interior: int
) -> np.ndarray:
    """Boundary and interior states of the sublevel set; floating dims drawn
    uniformly in their box so the certificate covers the recentered family."""
    d = sset.d
    L = cholesky(sset.P, lower=True)
    S = rng.standard_normal((n_boundary + n_interior, d))
    S /= np.linalg.norm(S, axis=1, keepdims=True)
    radius = np.ones(n_boundary + n_interior)
    radius[n_boundary:] = rng.uniform(0, 1, n_interior) ** (1.0 / d)
    E = solve_triangular(L, S.T, lower=True, trans="T").T
    E *= (np.sqrt(sset.c) * radius)[:, None]
    X = np.tile(sset.center, (E.shape[0], 1))
    X[:, list(sset.dims)] += E
    floating = [j for j in range(X.shape[1]) if j not in sset.dims]
    if floating:
        lo = sset.state_box[floating, 0]
        hi = sset.state_box[floating, 1]
        X[:, floating] = rng.uniform(lo, hi, size=(X.shape[0], len(floating)))
    return X


def _certify(
    sset: SafeSet,
    samples,
    eta_bound: float,
    rng: np.random.Generator,
    n_boundary: int,
    n_interior: int,
    eps: float,
) -> tuple[int, int, float]:
    """(transitions, violations, worst quad ratio) for one-step closed-loop
    invariance under pi_f across dynamics samples x states x noise points."""
    X = _certificate_states(sset, rng, n_boundary, n_interior)
    U = sset.feedback(X)
    dims = list(sset.dims)
    sub_box = sset.state_box[dims]
    ok_here = in_box(X[:, dims], sub_box, eps) & in_box(
        U, sset.input_box, eps
    )
    noise = np.vstack(
        [
            box_corners(eta_bound, X.shape[1]),
            rng.uniform(-eta_bound, eta_bound, size=(64, X.shape[1])),
        ]
    )
    worst = 0.0
    transitions = 0
    violations = int(np.sum(~ok_here)) * len(samples) * noise.shape[0]
    for dyn in samples:
        nxt = dyn.step_batch(X, U)  # (N, n_x)
        pert = nxt[:, None, :] + noise[None, :, :]
        inside = sset.contains(pert, shrink=eps) & in_box(
            pert[..., dims], sub_box, eps
        )
        transitions += inside.size
        violations += int(np.sum(~inside))
        worst = max(worst, float(sset.quad(pert).max() / sset.c))
    return transitions, violations, worst


def build_safe_set(
    env,
    model,
    samples: int,
    seed: int,
    steer_horizon: int = 60,
    eps: float = 0.0,
    n_boundary: int = 192,
    n_interior: int = 64,
    prev: SafeSet | None = None,
) -> SafeSet:
    """Construct (or re-certify) the terminal safe set for env under model.

    With prev given, the shape (P, K_f, center) is reused and only the level
    is re-certified; the result's c is never below prev.c.
    """
    spec = env.safe_spec
    dyn_samples = model.sample_dynamics(samples, seed)
    if prev is None:
        center = spec.anchor.copy()
        u_eq = spec.u_eq.copy()
        if spec.solve_hover:
            phi_eq, u_eq = _solve_hover(model, env)
            center[2] = phi_eq
        A, B = linearize_mean(model, spec.lin_state, u_eq)
        dims = list(spec.dims)
        A_sub = A[np.ix_(dims, dims)]
        B_sub = B[dims, :]
        R = spec.dare_r * np.eye(env.n_u)
        Q = np.eye(len(dims))
        if spec.dare_q is not None:
            Q = np.diag(np.asarray(spec.dare_q, dtype=float))
        P = solve_discrete_are(A_sub, B_sub, Q, R)
        gain = np.linalg.solve(
            R + B_sub.T @ P @ B_sub, B_sub.T @ P @ A_sub
        )
        K_f = -gain
    else:
        center, u_eq, P, K_f = prev.center, prev.u_eq, prev.P, prev.K_f

    base = SafeSet(
        dims=tuple(spec.dims),
        center=center,
        P=P,
        c=1.0,
        K_f=K_f,
        u_eq=u_eq,
        state_box=env.constraints.state_box,
        input_box=env.constraints.input_box,
        steer_horizon=steer_horizon,
    )
    c0 = _analytic_level(base)
    if spec.c_cap is not None:
        c0 = min(c0, spec.c_cap)
    c = c0
    rounds = 0
    while True:
        cand = replace(base, c=c)
        transitions, violations, worst = _certify(
            cand,
            dyn_samples,
            env.eta_bound,
            rng_for(seed, "safe-cert", env.name, rounds),
            n_boundary,
            n_interior,
            eps,
        )
        if violations == 0:
            break
        c *= C_SHRINK
        rounds += 1
        if c < C_MIN_FRACTION * c0:
            raise SafeSetBuildError(
                f"no certifiable level above {C_MIN_FRACTION * c0:.3e} "
                f"(worst quad ratio {worst:.3f} at c={c / C_SHRINK:.3e})"
            )
    if prev is not None and prev.c > c:
        c = prev.c  # monotonicity: never shrink a certified set
    stats = CertificateStats(
        transitions=transitions,
        violations=0,
        c_initial=c0,
        shrink_rounds=rounds,
        seed=seed,
    )
    return replace(base, c=c, certificate=stats)


# ------------------------------------------------------------------ steering


def steer(
    sset: SafeSet,
    model,
    from_state: np.ndarray,
    to_state: np.ndarray,
    tol: float = TOL_STEER,
    input_weight: float = 1e-4,
    iters: int = 10,
) -> np.ndarray | None:
    """Action sequence (<= steer_horizon) driving the posterior-mean dynamics
    from from_state to within tol (infinity norm) of to_state, staying inside
    the set with admissible inputs. None when unreachable under the mean.

    Sequential linear-quadratic tracking: roll the mean model, linearize
    around the rolled path, take one stacked least-squares step on the action
    sequence, repeat. The objective weights the last few steps heavily so the
    transient is free to swing while the tail settles on the target.
    Truncates at the first step within tolerance.
    """
    from_state = np.asarray(from_state, dtype=float)
    to_state = np.asarray(to_state, dtype=float)
    n_u = sset.u_eq.size
    n_x = from_state.size
    if np.abs(from_state - to_state).max() <= tol:
        return np.zeros((0, n_u))
    H = sset.steer_horizon
    lo, hi = sset.input_box[:, 0], sset.input_box[:, 1]
    tail = min(10, H)
    w = np.repeat(
        np.concatenate([np.full(H - tail, 0.05), np.ones(tail)]), n_x
    )
    U = np.tile(sset.u_eq, (H, 1))
    for _ in range(iters):
        X = np.empty((H + 1, n_x))
        X[0] = from_state
        for h in range(H):
            X[h + 1] = model.posterior_mean_step(
                X[h][None, :], U[h][None, :]
            )[0]
        miss = np.abs(X[1:] - to_state).max(axis=1)
        hit = np.nonzero(miss <= tol)[0]
        if hit.size:
            stop = int(hit[0]) + 1
            if np.all(sset.contains(X[: stop + 1])):
                return U[:stop]
        # e_{h+1} = A_h e_h + B_h du_h with e_0 = 0; ask the correction to
        # cancel the remaining tracking error along the path
        A = np.empty((H, n_x, n_x))
        B = np.empty((H, n_x, n_u))
        for h in range(H):
            A[h], B[h] = linearize_mean(model, X[h], U[h])
        G = np.zeros((H * n_x, H * n_u))
        for i in range(H):
            prop = B[i]
            for h in range(i, H):
                if h > i:
                    prop = A[h] @ prop
                G[h * n_x : (h + 1) * n_x, i * n_u : (i + 1) * n_u] = prop
        rhs = (to_state - X[1:]).reshape(-1)
        reg = np.sqrt(input_weight) * np.eye(H * n_u)
        dU, *_ = np.linalg.lstsq(
            np.vstack([G * w[:, None], reg]),
            np.concatenate([rhs * w, np.zeros(H * n_u)]),
            rcond=None,
        )
        U = np.clip(U + dU.reshape(H, n_u), lo, hi)
    return None
