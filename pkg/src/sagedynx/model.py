"""Probabilistic dynamics models with calibrated confidence sets.

Per output dimension i the regressor keeps an exact Bayesian posterior:

- "se" kernel: exact Gaussian-process regression with a squared-exponential
  kernel (Cholesky of K + sigma^2 I);
- "features" kernel: Bayesian linear regression over a named finite feature
  basis (exact weight-space posterior, equivalent to the degenerate-kernel GP).

Calibration multiplies the posterior deviation by sqrt(beta_n) with

    sqrt(beta_{n,i}) = B_i + sqrt(log det(I + sigma^-2 K) + 2 log(n_x / delta)),

and the confidence width is w_{n,i}(z) = 2 sqrt(beta_{n,i}) sigma_n(z),
w_n(z) = max_i w_{n,i}(z). On a fixed probe grid the model additionally keeps
the running intersection of all past confidence tubes, so probe widths never
increase across updates.

All kernels are shared across output dimensions (one Gram factorization);
RKHS norm bounds B_i stay per-dimension. Fitted models are immutable values:
``fit`` returns a new model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cholesky, solve_triangular

from . import _backend
from ._util import rng_for

JITTER_START = 1e-10
JITTER_MAX = 1e-6

_FEATURE_MAPS: dict[str, tuple[Callable[[np.ndarray], np.ndarray], int]] = {}


def register_feature_map(name: str, fn: Callable[[np.ndarray], np.ndarray], dim: int):
    """Register a named feature basis phi: (..., d_in) -> (..., dim).

    Bases must be normalized so that sum_j phi_j(z)^2 <= 1 on the domain of
    interest, keeping k(z, z) <= signal_variance.
    """
    _FEATURE_MAPS[name] = (fn, int(dim))


def feature_map(name: str) -> tuple[Callable[[np.ndarray], np.ndarray], int]:
    if name not in _FEATURE_MAPS:
        raise KeyError(f"unknown feature map {name!r}")
    return _FEATURE_MAPS[name]


class IllConditionedError(RuntimeError):
    """Kernel matrix stayed numerically singular after jitter escalation."""

    def __init__(self, update_index: int):
        super().__init__(
            f"kernel matrix ill-conditioned after jitter escalation "
            f"(update index {update_index})"
        )
        self.update_index = update_index


@dataclass(frozen=True)
class DataPoint:
    """One transition: z = (x, u) joint vector, y = observed next state."""

    z: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "z", np.asarray(self.z, dtype=float))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))
        if not np.all(np.isfinite(self.y)) or not np.all(np.isfinite(self.z)):
            raise ValueError("data point must be finite")


@dataclass(frozen=True)
class Dataset:
    """Ordered data with the indices at which model updates occurred."""

    points: tuple
    update_marks: tuple

    def __post_init__(self):
        marks = self.update_marks
        if any(marks[i] >= marks[i + 1] for i in range(len(marks) - 1)):
            raise ValueError("update marks must be strictly increasing")

    @property
    def batches(self):
        prev = 0
        out = []
        for m in self.update_marks:
            out.append(self.points[prev:m])
            prev = m
        return out


@dataclass(frozen=True)
class KernelSpec:
    """kind "se": squared-exponential with per-input lengthscales (sampling
    uses a random-feature approximation of feature_count cosines).
    kind "features": named finite basis from the registry."""

    kind: str
    lengthscales: tuple = ()
    signal_variance: float = 1.0
    feature_count: int = 256
    feature_name: str = ""

    def __post_init__(self):
        if self.kind not in ("se", "features"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if not (0.0 < self.signal_variance <= 1.0):
            raise ValueError("signal_variance must be in (0, 1]")
        if self.kind == "se":
            ls = tuple(float(v) for v in self.lengthscales)
            if not ls or any(v <= 0 for v in ls):
                raise ValueError("lengthscales must be positive")
            object.__setattr__(self, "lengthscales", ls)
            if self.feature_count < 1:
                raise ValueError("feature_count must be >= 1")
        else:
            feature_map(self.feature_name)


@dataclass(frozen=True)
class FeatureBasis:
    """Evaluable finite basis shared by all samples of one model."""

    kind: str  # "named" or "rff"
    name: str = ""
    omega: np.ndarray | None = None  # (d_in, D) for rff
    phase: np.ndarray | None = None  # (D,)
    scale: float = 1.0

    def __call__(self, Z: np.ndarray) -> np.ndarray:
        Z = np.asarray(Z, dtype=float)
        if self.kind == "named":
            return feature_map(self.name)[0](Z)
        return self.scale * np.cos(Z @ self.omega + self.phase)

    @property
    def dim(self) -> int:
        if self.kind == "named":
            return feature_map(self.name)[1]
        return self.omega.shape[1]


@dataclass(frozen=True)
class SampledDynamics:
    """A single dynamics function drawn from the posterior (weight vector per
    output dimension over a finite basis). Identical seed => identical
    function."""

    weights: np.ndarray  # (D, n_x)
    basis: FeatureBasis
    n_x: int
    n_u: int
    delta_mode: bool
    seed: int

    def step_batch(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        Z = np.concatenate([X, U], axis=-1)
        out = self.basis(Z) @ self.weights
        if self.delta_mode:
            out = out + X
        return out

    def __call__(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.step_batch(
            np.asarray(x, dtype=float), np.asarray(u, dtype=float)
        )


def stack_samples(samples: Sequence[SampledDynamics]):
    """(basis, weights (M, D, n_x)) for batched rollouts over many samples."""
    basis = samples[0].basis
    W = np.stack([s.weights for s in samples])
    return basis, W


class DynamicsModel:
    """Immutable fitted model; ``fit`` returns a new instance."""

    def __init__(
        self,
        kernel: KernelSpec,
        n_x: int,
        n_u: int,
        noise_std: float,
        rkhs_bound=1.0,
        delta: float = 0.1,
        delta_mode: bool = False,
        probe_grid: np.ndarray | None = None,
        beta_override: float | None = None,
        seed: int = 0,
        _state: dict | None = None,
    ):
        if noise_std <= 0:
            raise ValueError("noise_std must be > 0")
        if not (0.0 < delta < 1.0):
            raise ValueError("delta must be in (0, 1)")
        self.kernel = kernel
        self.n_x = int(n_x)
        self.n_u = int(n_u)
        self.d_in = self.n_x + self.n_u
        self.noise_std = float(noise_std)
        self.rkhs_bound = np.broadcast_to(
            np.asarray(rkhs_bound, dtype=float), (self.n_x,)
        ).copy()
        self.delta = float(delta)
        self.delta_mode = bool(delta_mode)
        self.beta_override = None if beta_override is None else float(beta_override)
        self.seed = int(seed)

        if kernel.kind == "se":
            self._inv_ls = 1.0 / np.asarray(kernel.lengthscales, dtype=float)
            if len(kernel.lengthscales) != self.d_in:
                raise ValueError("lengthscales must have n_x + n_u entries")
            rng = rng_for(self.seed, "rff")
            D = kernel.feature_count
            omega = rng.standard_normal((self.d_in, D)) * self._inv_ls[:, None]
            phase = rng.uniform(0.0, 2.0 * np.pi, size=D)
            scale = np.sqrt(2.0 * kernel.signal_variance / D)
            self.basis = FeatureBasis("rff", omega=omega, phase=phase, scale=scale)
            self._prior_w_var = 1.0  # sv folded into the rff scale
        else:
            self.basis = FeatureBasis("named", name=kernel.feature_name)
            self._prior_w_var = kernel.signal_variance

        if probe_grid is not None:
            probe_grid = np.ascontiguousarray(probe_grid, dtype=float)
            if probe_grid.ndim != 2 or probe_grid.shape[1] != self.d_in:
                raise ValueError("probe_grid must be (P, n_x + n_u)")
        self.probe_grid = probe_grid

        if _state is None:
            _state = self._fit_state(
                np.zeros((0, self.d_in)), np.zeros((0, self.n_x)), marks=()
            )
            _state = self._with_envelopes(_state, fresh=True)
        self._s = _state

    # ------------------------------------------------------------------ data

    @property
    def data_z(self) -> np.ndarray:
        return self._s["Z"]

    @property
    def data_y(self) -> np.ndarray:
        return self._s["Y"]

    @property
    def update_marks(self) -> tuple:
        return self._s["marks"]

    @property
    def n_updates(self) -> int:
        return len(self._s["marks"])

    @property
    def dataset(self) -> Dataset:
        pts = tuple(
            DataPoint(z, y) for z, y in zip(self._s["Z"], self._s["Y"])
        )
        return Dataset(pts, self._s["marks"])

    # ------------------------------------------------------------------- fit

    def _targets(self, Z: np.ndarray, Y: np.ndarray) -> np.ndarray:
        return Y - Z[:, : self.n_x] if self.delta_mode else Y

    def kernel_matrix(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        if self.kernel.kind == "se":
            return _backend.se_kernel(
                A, B, self._inv_ls, self.kernel.signal_variance
            )
        return self._prior_w_var * (self.basis(A) @ self.basis(B).T)

    def kernel_diag(self, A: np.ndarray) -> np.ndarray:
        if self.kernel.kind == "se":
            return _backend.se_kernel_diag(A, self.kernel.signal_variance)
        Phi = self.basis(A)
        return self._prior_w_var * (Phi * Phi).sum(axis=-1)

    def _chol_with_jitter(self, K: np.ndarray, update_index: int) -> np.ndarray:
        jitter = JITTER_START
        base = K + self.noise_std**2 * np.eye(K.shape[0])
        while jitter <= JITTER_MAX:
            try:
                return cholesky(base + jitter * np.eye(K.shape[0]), lower=True)
            except np.linalg.LinAlgError:
                jitter *= 10.0
        raise IllConditionedError(update_index)

    def _fit_state(self, Z: np.ndarray, Y: np.ndarray, marks: tuple) -> dict:
        T = self._targets(Z, Y)
        n = Z.shape[0]
        s: dict = {"Z": Z, "Y": Y, "marks": marks}
        sigma2 = self.noise_std**2
        if self.kernel.kind == "se":
            if n:
                K = self.kernel_matrix(Z, Z)
                L = self._chol_with_jitter(K, len(marks))
                s["chol"] = L
                s["alpha"] = solve_triangular(
                    L.T, solve_triangular(L, T, lower=True), lower=False
                )
            else:
                s["chol"] = None
                s["alpha"] = None
        # weight-space posterior: for "features" it is the exact model, for
        # "se" it conditions the rff basis used by sample_dynamics.
        Phi = self.basis(Z) if n else np.zeros((0, self.basis.dim))
        D = self.basis.dim
        A_inf = Phi.T @ Phi / sigma2 + np.eye(D) / self._prior_w_var
        La = cholesky(A_inf, lower=True)
        s["w_chol"] = La
        rhs = Phi.T @ T / sigma2 if n else np.zeros((D, self.n_x))
        s["w_mean"] = solve_triangular(
            La.T, solve_triangular(La, rhs, lower=True), lower=False
        )
        s["logdets"] = self._logdets_for(Z, marks)
        return s

    def _logdets_for(self, Z: np.ndarray, marks: tuple) -> tuple:
        """log det(I + sigma^-2 K) for each data prefix ending at an update
        mark (index 0 = no data)."""
        sigma2 = self.noise_std**2
        out = [0.0]
        for m in marks:
            P = Z[:m]
            if self.kernel.kind == "se":
                M = np.eye(m) + self.kernel_matrix(P, P) / sigma2
            else:
                Phi = self.basis(P)
                D = self.basis.dim
                M = np.eye(D) + self._prior_w_var * (Phi.T @ Phi) / sigma2
            sign, logdet = np.linalg.slogdet(M)
            out.append(max(float(logdet), out[-1]))  # monotone by theory
        return tuple(out)

    def fit(self, batch) -> "DynamicsModel":
        """Condition on a new batch, append an update mark, and refresh the
        probe-grid envelopes. Returns a new model value."""
        Zb, Yb = _coerce_batch(batch, self.d_in, self.n_x)
        if Zb.shape[0] == 0:
            raise ValueError("batch must be non-empty")
        Z = np.vstack([self._s["Z"], Zb])
        Y = np.vstack([self._s["Y"], Yb])
        marks = self._s["marks"] + (Z.shape[0],)
        state = self._fit_state(Z, Y, marks)
        state["env_lo"] = self._s.get("env_lo")
        state["env_hi"] = self._s.get("env_hi")
        state["probe_mean_history"] = self._s.get("probe_mean_history", ())
        new = DynamicsModel(
            self.kernel,
            self.n_x,
            self.n_u,
            self.noise_std,
            self.rkhs_bound,
            self.delta,
            self.delta_mode,
            self.probe_grid,
            self.beta_override,
            self.seed,
            _state=state,
        )
        new._s = new._with_envelopes(new._s, fresh=False)
        return new

    # ------------------------------------------------------------- posterior

    def posterior(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Exact posterior (mean, std) per output dimension at z (..., d_in).

        The posterior std is shared across dimensions (common kernel); it is
        broadcast to (..., n_x) for the per-dimension view.
        """
        z = np.asarray(z, dtype=float)
        if not np.all(np.isfinite(z)):
            raise ValueError("query must be finite")
        single = z.ndim == 1
        Q = z.reshape(-1, self.d_in)
        mean, var = self._posterior_flat(Q)
        if self.delta_mode:
            mean = mean + Q[:, : self.n_x]
        std = np.sqrt(np.maximum(var, 0.0))[:, None].repeat(self.n_x, axis=1)
        if single:
            return mean[0], std[0]
        shape = z.shape[:-1] + (self.n_x,)
        return mean.reshape(shape), std.reshape(shape)

    def _posterior_flat(self, Q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        s = self._s
        if self.kernel.kind == "se":
            if s["chol"] is None:
                return (
                    np.zeros((Q.shape[0], self.n_x)),
                    self.kernel_diag(Q).copy(),
                )
            Kq = self.kernel_matrix(s["Z"], Q)
            mean = Kq.T @ s["alpha"]
            v = solve_triangular(s["chol"], Kq, lower=True)
            var = self.kernel_diag(Q) - (v * v).sum(axis=0)
            return mean, np.maximum(var, 0.0)
        Phi = self.basis(Q)
        mean = Phi @ s["w_mean"]
        v = solve_triangular(s["w_chol"], Phi.T, lower=True)
        var = (v * v).sum(axis=0)
        return mean, np.maximum(var, 0.0)

    def posterior_mean_step(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        """Posterior-mean dynamics: next state under mu_n, batched."""
        Z = np.concatenate([X, U], axis=-1)
        mean, _ = self.posterior(Z)
        return mean

    # ------------------------------------------------------------ calibration

    def beta(self, n: int | None = None) -> np.ndarray:
        """beta_{n,i} per output dimension, non-decreasing in n."""
        if n is None:
            n = self.n_updates
        n = int(n)
        if not (0 <= n <= self.n_updates):
            raise ValueError(f"update index {n} out of range")
        if self.beta_override is not None:
            return np.full(self.n_x, self.beta_override)
        logdet = self._s["logdets"][n]
        sqrt_beta = self.rkhs_bound + np.sqrt(
            logdet + 2.0 * np.log(self.n_x / self.delta)
        )
        return sqrt_beta**2

    def width(self, z: np.ndarray) -> tuple[np.ndarray, float]:
        """(per-dimension widths (n_x,), max over dimensions) at a single z.

        Probe-grid points use the running-intersection envelope, so their
        widths never increase across updates; elsewhere the latest posterior
        bound 2 sqrt(beta_n) sigma_n(z) applies.
        """
        z = np.ascontiguousarray(z, dtype=float)
        idx = self._probe_index(z)
        if idx is not None:
            w = self.probe_widths_per_dim()[idx]
            return w, float(w.max())
        _, var = self._posterior_flat(z[None, :])
        per_dim = 2.0 * np.sqrt(self.beta() * var[0])
        return per_dim, float(per_dim.max())

    def widths_batch(self, Z: np.ndarray) -> np.ndarray:
        """max-dimension width w_n at each row of Z (..., d_in); latest
        posterior (no envelope lookup) — the planner's hot path."""
        Z = np.asarray(Z, dtype=float)
        flat = Z.reshape(-1, self.d_in)
        _, var = self._posterior_flat(flat)
        std = np.sqrt(var)
        w = 2.0 * np.sqrt(self.beta().max()) * std
        return w.reshape(Z.shape[:-1])

    def collect_rule(self, z: np.ndarray, eps_c: float) -> bool:
        """True iff the max-dimension width at z is >= eps_c (inclusive)."""
        if eps_c <= 0:
            raise ValueError("eps_c must be > 0")
        return bool(self.width(z)[1] >= eps_c)

    # -------------------------------------------------------------- sampling

    def sample_dynamics(self, count: int, seed: int) -> list[SampledDynamics]:
        """Draw dynamics functions from the weight-space posterior.

        Finite-feature kernels use the exact Gaussian weight posterior; the
        squared-exponential kernel uses its random-feature approximation
        conditioned on the data. Deterministic given seed.
        """
        if count < 1:
            raise ValueError("count must be >= 1")
        rng = rng_for(seed, "dyn-samples")
        La = self._s["w_chol"]
        Wm = self._s["w_mean"]
        D = self.basis.dim
        E = rng.standard_normal((count, D, self.n_x))
        out = []
        for m in range(count):
            dev = solve_triangular(La.T, E[m], lower=False)
            out.append(
                SampledDynamics(
                    Wm + dev, self.basis, self.n_x, self.n_u, self.delta_mode, seed
                )
            )
        return out

    # ------------------------------------------------------------- envelopes

    def _probe_index(self, z: np.ndarray) -> int | None:
        lut = self._s.get("probe_lut")
        if lut is None:
            return None
        return lut.get(z.tobytes())

    def _with_envelopes(self, state: dict, fresh: bool) -> dict:
        if self.probe_grid is None:
            return state
        mean, var = self._posterior_flat_with(state, self.probe_grid)
        if self.delta_mode:
            mean = mean + self.probe_grid[:, : self.n_x]
        std = np.sqrt(np.maximum(var, 0.0))
        rad = std[:, None] * np.sqrt(self._beta_with(state))[None, :]
        lo = mean - rad
        hi = mean + rad
        if not fresh and state.get("env_lo") is not None:
            lo = np.maximum(lo, state["env_lo"])
            hi = np.minimum(hi, state["env_hi"])
        state["env_lo"], state["env_hi"] = lo, hi
        widths = np.maximum(hi - lo, 0.0).max(axis=1)
        state["probe_mean_history"] = state.get("probe_mean_history", ()) + (
            float(widths.mean()),
        )
        state["probe_lut"] = {
            row.tobytes(): i for i, row in enumerate(self.probe_grid)
        }
        return state

    def _posterior_flat_with(self, state, Q):
        saved = self._s if hasattr(self, "_s") else None
        self._s = state
        try:
            return self._posterior_flat(Q)
        finally:
            if saved is not None:
                self._s = saved

    def _beta_with(self, state) -> np.ndarray:
        if self.beta_override is not None:
            return np.full(self.n_x, self.beta_override)
        logdet = state["logdets"][len(state["marks"])]
        sqrt_beta = self.rkhs_bound + np.sqrt(
            logdet + 2.0 * np.log(self.n_x / self.delta)
        )
        return sqrt_beta**2

    def probe_widths_per_dim(self) -> np.ndarray:
        if self.probe_grid is None:
            raise ValueError("model has no probe grid")
        return np.maximum(self._s["env_hi"] - self._s["env_lo"], 0.0)

    def probe_widths(self) -> np.ndarray:
        """Envelope width (max over dimensions) at every probe point."""
        return self.probe_widths_per_dim().max(axis=1)

    @property
    def probe_mean_width_history(self) -> tuple:
        """Mean probe width after construction and after each update."""
        return self._s.get("probe_mean_history", ())

    # ---------------------------------------------------------- serialization

    def to_json(self) -> dict:
        return {
            "kernel": {
                "kind": self.kernel.kind,
                "lengthscales": list(self.kernel.lengthscales),
                "signal_variance": self.kernel.signal_variance,
                "feature_count": self.kernel.feature_count,
                "feature_name": self.kernel.feature_name,
            },
            "n_x": self.n_x,
            "n_u": self.n_u,
            "noise_std": self.noise_std,
            "rkhs_bound": self.rkhs_bound.tolist(),
            "delta": self.delta,
            "delta_mode": self.delta_mode,
            "beta_override": self.beta_override,
            "seed": self.seed,
            "probe_grid": None
            if self.probe_grid is None
            else self.probe_grid.tolist(),
            "data_z": self._s["Z"].tolist(),
            "data_y": self._s["Y"].tolist(),
            "update_marks": list(self._s["marks"]),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DynamicsModel":
        k = doc["kernel"]
        kernel = KernelSpec(
            kind=k["kind"],
            lengthscales=tuple(k["lengthscales"]),
            signal_variance=k["signal_variance"],
            feature_count=k["feature_count"],
            feature_name=k["feature_name"],
        )
        model = cls(
            kernel,
            doc["n_x"],
            doc["n_u"],
            doc["noise_std"],
            np.asarray(doc["rkhs_bound"]),
            doc["delta"],
            doc["delta_mode"],
            None if doc["probe_grid"] is None else np.asarray(doc["probe_grid"]),
            doc["beta_override"],
            doc["seed"],
        )
        Z = np.asarray(doc["data_z"], dtype=float).reshape(-1, model.d_in)
        Y = np.asarray(doc["data_y"], dtype=float).reshape(-1, model.n_x)
        prev = 0
        for mark in doc["update_marks"]:
            model = model.fit((Z[prev:mark], Y[prev:mark]))
            prev = mark
        return model


def _coerce_batch(batch, d_in: int, n_x: int) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, tuple) and len(batch) == 2:
        Z = np.asarray(batch[0], dtype=float).reshape(-1, d_in)
        Y = np.asarray(batch[1], dtype=float).reshape(-1, n_x)
    else:
        pts = list(batch)
        Z = np.asarray([p.z for p in pts], dtype=float).reshape(-1, d_in)
        Y = np.asarray([p.y for p in pts], dtype=float).reshape(-1, n_x)
    if Z.shape[0] != Y.shape[0]:
        raise ValueError("z / y count mismatch")
    if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(Y))):
        raise ValueError("batch must be finite")
    return Z, Y
