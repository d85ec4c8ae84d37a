"""Tolerance chain, sample-complexity constants, information measures, and
Lipschitz estimation.

Everything here is a pure function of its arguments. Conventions:

- geometric tables: L_h = sum_{i=0}^{h-1} L^i and L_{w,h} = sum_{k=0}^{h-1}
  (L + L_w)^k, both defined as 0 for h <= 0;
- the tolerance ladder eps_c <= eps_d < eps' < eps quantifies, in order, the
  width below which a visited point stops being informative, the width the
  exploration constraint demands, the start-state transfer margin used by the
  pessimistic reward problem, and the constraint margin of the optimistic
  problem.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from ._util import rng_for


def geom_sum(ratio: float, h: int) -> float:
    """sum_{i=0}^{h-1} ratio^i, 0 for h <= 0 (and h exactly at 0)."""
    h = int(h)
    if h <= 0:
        return 0.0
    if abs(ratio - 1.0) < 1e-12:
        return float(h)
    return float((ratio**h - 1.0) / (ratio - 1.0))


@dataclass(frozen=True)
class LipschitzConstants:
    """Constants of the closed-loop system used by every derived tolerance.

    L: one-step closed-loop dynamics, L_w: confidence width as a function of
    (x, u), L_r: reward, L_pi: policy (0 for open-loop action sequences),
    L_f: open-loop dynamics (equals L when L_pi = 0, the default).
    """

    L: float
    L_w: float
    L_r: float
    L_pi: float = 0.0
    L_f: float | None = None

    def __post_init__(self):
        if self.L_f is None:
            object.__setattr__(self, "L_f", self.L)
        for name in ("L", "L_w", "L_r", "L_pi", "L_f"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def L_h(self, h: int) -> float:
        return geom_sum(self.L, h)

    def L_w_h(self, h: int) -> float:
        return geom_sum(self.L + self.L_w, h)


@dataclass(frozen=True)
class Tolerances:
    """The tolerance ladder plus a trace of which formula produced each value."""

    eps_c: float
    eps_d: float
    eps_prime: float
    eps: float
    trace: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = (self.eps_c, self.eps_d, self.eps_prime, self.eps)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("tolerances must be finite")
        if self.eps_d < self.eps_c:
            raise ValueError("eps_d must be >= eps_c")
        if self.eps_prime > self.eps or (self.eps == self.eps_prime and self.eps > 0):
            raise ValueError("need eps > eps_prime (or both zero, noise-free case)")


def derive_eps_d(
    eps_c: float, eta_bound: float, lips: LipschitzConstants, H_c: int
) -> float:
    """Width threshold for the exploration constraint.

    eps_d = eps_c + L_w * L_{w,H_c} * (eps_c + eta). A plan whose predicted
    width reaches eps_d somewhere guarantees, despite model mismatch and noise
    accumulated over at most H_c steps, that the executed trajectory visits at
    least one point of width >= eps_c.
    """
    if eps_c < 0 or eta_bound < 0 or H_c < 1:
        raise ValueError("need eps_c >= 0, eta_bound >= 0, H_c >= 1")
    return eps_c + lips.L_w * lips.L_w_h(int(H_c)) * (eps_c + eta_bound)


def derive_eps_prime(
    eps_c: float,
    eta_bound: float,
    lips: LipschitzConstants,
    H: int,
    delta_H: int,
) -> float:
    """Start-state transfer margin for the pessimistic reward problem.

    Two sufficient lower bounds are evaluated and the larger returned:
    the controllability bound

        max{1, L_pi} * max{L^H, 1} * L_{DeltaH} * (eps_c + eta)

    and the shrinkage bound

        max{1, L_pi} * (max{(L + L_w)^H, 1} * L_{DeltaH} * (eps_c + eta)
                        + 2 * L_{w,H} * (eps_d + eta))

    with eps_d derived at the combined horizon H + DeltaH.
    """
    H = int(H)
    delta_H = int(delta_H)
    mpi = max(1.0, lips.L_pi)
    b1 = mpi * max(lips.L**H, 1.0) * lips.L_h(delta_H) * (eps_c + eta_bound)
    eps_d = derive_eps_d(eps_c, eta_bound, lips, H + delta_H)
    b2 = mpi * (
        max((lips.L + lips.L_w) ** H, 1.0) * lips.L_h(delta_H) * (eps_c + eta_bound)
        + 2.0 * lips.L_w_h(H) * (eps_d + eta_bound)
    )
    return max(b1, b2)


def eps_gap(
    eps_d: float, eta_bound: float, lips: LipschitzConstants, H: int
) -> float:
    """Required excess of eps over eps_prime:

    eps - eps' > max{1, L_pi} * 2 * sum_{j=0}^{H-1} (L_w + L)^j
                 * (eps_d + L_w * L_{H-j-1} * eta).
    """
    H = int(H)
    mpi = max(1.0, lips.L_pi)
    ratio = lips.L_w + lips.L
    total = 0.0
    for j in range(H):
        total += ratio**j * (eps_d + lips.L_w * lips.L_h(H - j - 1) * eta_bound)
    return mpi * 2.0 * total


def derive_tolerances(
    eps_c: float,
    eta_bound: float,
    lips: LipschitzConstants,
    H: int,
    delta_H: int,
    slack_factor: float = 1.001,
) -> Tolerances:
    """Full certified ladder from eps_c. The strict inequalities of the chain
    are realized by multiplying the lower bounds with slack_factor."""
    H_c = int(H) + int(delta_H)
    eps_d = derive_eps_d(eps_c, eta_bound, lips, H_c)
    eps_prime = derive_eps_prime(eps_c, eta_bound, lips, H, delta_H) * slack_factor
    eps = eps_prime + eps_gap(eps_d, eta_bound, lips, H) * slack_factor
    trace = {
        "eps_c": "input",
        "eps_d": "eps_c + L_w * L_w_h(H_c) * (eps_c + eta)",
        "eps_prime": "max(controllability bound, shrinkage bound)",
        "eps": "eps_prime + transfer gap",
    }
    return Tolerances(eps_c, eps_d, eps_prime, eps, trace)


def termination_slack(lips: LipschitzConstants, eps_d: float, H: int) -> float:
    """Slack of the termination inequality: 3 * L_r * sum_{h=0}^{H-1} L_h * eps_d."""
    total = sum(lips.L_h(h) for h in range(int(H)))
    return 3.0 * lips.L_r * total * eps_d


def constant_K_eps(
    lips: LipschitzConstants,
    eps_c: float,
    eps_d: float,
    eta_bound: float,
    H: int,
    delta_H: int,
) -> float:
    """Suboptimality constant of the returned policy (the product K * eps):

    K eps = 3 L_r sum_{h=0}^{H-1} L_h eps_d + L_r L_H L_{DeltaH} (eps_c + eta).

    The steering-length table uses DeltaH (the worst case) rather than the
    realized steering length.
    """
    return termination_slack(lips, eps_d, H) + lips.L_r * lips.L_h(
        int(H)
    ) * lips.L_h(int(delta_H)) * (eps_c + eta_bound)


def sample_complexity_C1(H_c: int, sigma: float) -> float:
    """C1 = 8 H_c / log(1 + H_c / sigma^2)."""
    if H_c < 1 or sigma <= 0:
        raise ValueError("need H_c >= 1 and sigma > 0")
    return 8.0 * H_c / np.log(1.0 + H_c / sigma**2)


def n_star_check(
    history, C1: float, eps_c: float
) -> dict:
    """Advisory sample-complexity diagnostic.

    history: iterable of (n, beta_n, info_gain_n) rows with the empirical
    information gain standing in for the capacity gamma_n. Reports, per row,
    the ratio n / (beta_n * info_gain_n) against C1 / eps_c^2 and whether the
    worst-case bound would already certify termination. Never gates a run.
    """
    threshold = C1 / eps_c**2
    rows = []
    certified = False
    for n, beta_n, gain in history:
        if n <= 0 or beta_n <= 0 or gain <= 0:
            ratio = 0.0
        else:
            ratio = n / (beta_n * gain)
        cert = bool(ratio >= threshold)
        certified = certified or cert
        rows.append({"n": int(n), "ratio": float(ratio), "certified": cert})
    return {"threshold": float(threshold), "rows": rows, "certified": certified}


def mutual_information(model) -> float:
    """Information content of the collected batches.

    Per update batch d_n, the eigenvalues lambda_{d,n} of the posterior kernel
    matrix of the batch (conditioned on all earlier data) contribute
    sum_d 0.5 * log(1 + lambda_d / sigma^2), summed over batches and output
    dimensions. By additivity this equals mutual_information_direct.
    """
    Z, marks = model.data_z, model.update_marks
    if Z.shape[0] == 0 or not marks:
        return 0.0
    sigma2 = model.noise_std**2
    total = 0.0
    prev = 0
    for mark in marks:
        batch = slice(prev, mark)
        if mark > prev:
            K_bb = model.kernel_matrix(Z[batch], Z[batch])
            if prev > 0:
                K_pp = model.kernel_matrix(Z[:prev], Z[:prev])
                K_pb = model.kernel_matrix(Z[:prev], Z[batch])
                sol = np.linalg.solve(K_pp + sigma2 * np.eye(prev), K_pb)
                K_bb = K_bb - K_pb.T @ sol
            lam = scipy.linalg.eigvalsh(K_bb)
            lam = np.maximum(lam, 0.0)
            total += 0.5 * np.log1p(lam / sigma2).sum()
        prev = mark
    return float(total * model.n_x)


def mutual_information_direct(model) -> float:
    """0.5 * sum over output dims of log det(I + sigma^-2 K) on the whole set."""
    Z = model.data_z
    if Z.shape[0] == 0:
        return 0.0
    sigma2 = model.noise_std**2
    K = model.kernel_matrix(Z, Z)
    sign, logdet = np.linalg.slogdet(np.eye(Z.shape[0]) + K / sigma2)
    if sign <= 0:
        raise np.linalg.LinAlgError("information matrix not positive definite")
    return float(0.5 * logdet * model.n_x)


def estimate_lipschitz(
    fn,
    domain_box,
    n_samples: int = 2000,
    seed: int = 0,
    safety: float = 1.2,
    perturb_radius: float = 1e-3,
) -> float:
    """Empirical Lipschitz constant of fn over a box, inf-norm over inf-norm.

    Pairs are drawn both uniformly over the box and as small perturbations of
    uniform points (radius perturb_radius); the max ratio is reported with a
    multiplicative safety factor.
    """
    box = np.asarray(domain_box, dtype=float)
    rng = rng_for(seed, "lipschitz")
    lo, hi = box[:, 0], box[:, 1]
    d = box.shape[0]

    def batch_ratio(A, B):
        fa = np.asarray([np.atleast_1d(fn(a)) for a in A], dtype=float)
        fb = np.asarray([np.atleast_1d(fn(b)) for b in B], dtype=float)
        num = np.abs(fa - fb).max(axis=1)
        den = np.abs(A - B).max(axis=1)
        ok = den > 1e-12
        return (num[ok] / den[ok]).max(initial=0.0)

    half = n_samples // 2
    A = rng.uniform(lo, hi, size=(half, d))
    B = rng.uniform(lo, hi, size=(half, d))
    r1 = batch_ratio(A, B)
    C = rng.uniform(lo, hi, size=(n_samples - half, d))
    D = np.clip(
        C + rng.uniform(-perturb_radius, perturb_radius, size=C.shape), lo, hi
    )
    r2 = batch_ratio(C, D)
    return float(safety * max(r1, r2))
