"""Model quantities: time scale, data containers, parameters and hazards.

All array-valued functions accept either numpy or jax arrays and return the
same kind, so the same formulas serve the per-subject reference path and the
vectorized likelihood kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

TRANSITIONS = ("01", "02", "12")
ASSOCIATIONS = ("value", "slope", "sigma", "kappa")
LOG_TIME_FLOOR = 1e-12


def _xp(*arrays):
    for a in arrays:
        if type(a).__module__.startswith("jax"):
            import jax.numpy as jnp

            return jnp
    return np


@dataclass(frozen=True)
class TimeScale:
    """Affine map from age in years to model time."""

    origin: float = 65.0
    divisor: float = 10.0

    def __post_init__(self):
        if not self.divisor > 0:
            raise ValueError("divisor must be positive")

    def transform(self, age):
        return (np.asarray(age, dtype=float) - self.origin) / self.divisor

    def inverse(self, t):
        return np.asarray(t, dtype=float) * self.divisor + self.origin


@dataclass(frozen=True)
class VisitBlock:
    time: float
    measurements: np.ndarray
    fixed_design: np.ndarray
    random_design: np.ndarray

    def __post_init__(self):
        if np.asarray(self.measurements).size < 1:
            raise ValueError("a visit needs at least one measurement")


@dataclass(frozen=True)
class EventRecord:
    """Observed multistate history on the model time scale.

    ``diagnosis`` is None when no diagnosis was made. ``covariates`` maps a
    transition label to its baseline covariate row.
    """

    entry: float
    last_healthy: float
    diagnosis: float | None
    dem: bool
    terminal: float
    death: bool
    covariates: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        tol = 1e-12
        if not (self.entry <= self.last_healthy + tol and self.last_healthy <= self.terminal + tol):
            raise ValueError(
                f"need entry <= last_healthy <= terminal, got "
                f"{self.entry}, {self.last_healthy}, {self.terminal}"
            )
        if self.dem:
            if self.diagnosis is None:
                raise ValueError("diagnosed record without diagnosis time")
            if not (self.last_healthy <= self.diagnosis + tol and self.diagnosis <= self.terminal + tol):
                raise ValueError("need last_healthy <= diagnosis <= terminal")
        elif self.diagnosis is not None:
            raise ValueError("diagnosis time given without diagnosis flag")

    def covariate_row(self, kl: str) -> np.ndarray:
        return np.asarray(self.covariates.get(kl, ()), dtype=float)


@dataclass(frozen=True)
class SubjectData:
    id: str
    visits: tuple[VisitBlock, ...]
    event: EventRecord
    long_covariates: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        times = [v.time for v in self.visits]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError(f"subject {self.id}: visit times must be strictly increasing")
        if times and times[-1] > self.event.terminal + 1e-9:
            raise ValueError(f"subject {self.id}: visit after terminal time")


@dataclass(frozen=True)
class TransitionSpec:
    baseline: str = "weibull"
    n_covariates: int = 0
    associations: tuple[bool, bool, bool, bool] = (True, True, True, True)

    def __post_init__(self):
        if self.baseline not in ("weibull", "exponential"):
            raise ValueError(f"unknown baseline family {self.baseline!r}")


@dataclass(frozen=True)
class TransitionParams:
    gamma: np.ndarray
    alpha: np.ndarray  # (value, slope, sigma, kappa); zeros where not associated
    zeta: float
    sqrt_eta: float | None = None


@dataclass(frozen=True)
class ParameterSet:
    beta: np.ndarray
    mu_sigma: float
    mu_kappa: float
    chol: np.ndarray
    transitions: Mapping[str, TransitionParams]

    @property
    def q(self) -> int:
        return self.chol.shape[0] - 2


@dataclass(frozen=True)
class RandomEffects:
    """Random-effect draw(s); arrays may carry a leading draw axis."""

    b: np.ndarray
    tau_sigma: np.ndarray | float
    tau_kappa: np.ndarray | float

    @classmethod
    def from_vector(cls, u, q: int) -> "RandomEffects":
        return cls(u[..., :q], u[..., q], u[..., q + 1])

    @classmethod
    def zeros(cls, q: int) -> "RandomEffects":
        return cls(np.zeros(q), 0.0, 0.0)


def independence_mask(q: int) -> np.ndarray:
    """Free-entry mask of the Cholesky factor with b independent of tau."""
    d = q + 2
    mask = np.tril(np.ones((d, d), dtype=bool))
    mask[q:, :q] = False
    return mask


@dataclass(frozen=True)
class ModelSpec:
    """Structure of the joint model: designs, transitions and free parameters.

    Designs are polynomial in time: ``fixed_powers`` and ``random_powers``
    give the exponents of t in X(t) and Z(t). Time-constant subject
    covariates for the marker mean are appended to X. ``random_scales=False``
    removes the subject-specific variance effects (tau rows of the Cholesky
    factor are structurally zero).
    """

    fixed_powers: tuple[int, ...] = (0, 1)
    random_powers: tuple[int, ...] = (0, 1)
    n_long_covariates: int = 0
    transitions: Mapping[str, TransitionSpec] = field(
        default_factory=lambda: {kl: TransitionSpec() for kl in TRANSITIONS}
    )
    independent_b_tau: bool = False
    random_scales: bool = True
    time_scale: TimeScale = TimeScale()

    def __hash__(self):
        return hash((
            self.fixed_powers, self.random_powers, self.n_long_covariates,
            tuple(sorted(self.transitions.items())), self.independent_b_tau,
            self.random_scales, self.time_scale,
        ))

    @property
    def q(self) -> int:
        return len(self.random_powers)

    @property
    def n_beta(self) -> int:
        return len(self.fixed_powers) + self.n_long_covariates

    @property
    def chol_mask(self) -> np.ndarray:
        d = self.q + 2
        mask = independence_mask(self.q) if self.independent_b_tau else np.tril(np.ones((d, d), dtype=bool))
        if not self.random_scales:
            mask[self.q:, :] = False
        return mask

    @property
    def n_longitudinal_params(self) -> int:
        """Leading entries of the parameter vector that belong to the marker model."""
        return self.n_beta + 2 + len(self.chol_index())

    def chol_index(self) -> list[tuple[int, int]]:
        mask = self.chol_mask
        return [(i, j) for i in range(mask.shape[0]) for j in range(i + 1) if mask[i, j]]

    def param_names(self) -> list[str]:
        names = [f"beta{k}" for k in range(self.n_beta)]
        names += ["mu_sigma", "mu_kappa"]
        names += [f"chol_{i}{j}" for i, j in self.chol_index()]
        for kl in TRANSITIONS:
            ts = self.transitions[kl]
            names += [f"gamma{k}_{kl}" for k in range(ts.n_covariates)]
            names += [f"alpha_{a}_{kl}" for a, on in zip(ASSOCIATIONS, ts.associations) if on]
            if ts.baseline == "weibull":
                names.append(f"sqrt_eta_{kl}")
            names.append(f"zeta_{kl}")
        return names

    @property
    def n_params(self) -> int:
        return len(self.param_names())

    def fixed_design(self, t, covariates=()):
        xp = _xp(t)
        t = xp.asarray(t)
        cols = [t**p if p else xp.ones_like(t) for p in self.fixed_powers]
        cov = np.asarray(covariates, dtype=float)
        cols += [xp.full_like(t, c) for c in cov]
        return xp.stack(cols, axis=-1)

    def fixed_design_slope(self, t, covariates=()):
        xp = _xp(t)
        t = xp.asarray(t)
        cols = [p * t ** (p - 1) if p else xp.zeros_like(t) for p in self.fixed_powers]
        cols += [xp.zeros_like(t)] * len(np.atleast_1d(np.asarray(covariates, dtype=float)))
        return xp.stack(cols, axis=-1)

    def random_design(self, t):
        xp = _xp(t)
        t = xp.asarray(t)
        return xp.stack([t**p if p else xp.ones_like(t) for p in self.random_powers], axis=-1)

    def random_design_slope(self, t):
        xp = _xp(t)
        t = xp.asarray(t)
        return xp.stack(
            [p * t ** (p - 1) if p else xp.zeros_like(t) for p in self.random_powers], axis=-1
        )

    def make_visit(self, time: float, measurements: Sequence[float], covariates=()) -> VisitBlock:
        return VisitBlock(
            float(time),
            np.asarray(measurements, dtype=float),
            np.asarray(self.fixed_design(np.asarray(float(time)), covariates)),
            np.asarray(self.random_design(np.asarray(float(time)))),
        )

    # -- parameter vector <-> ParameterSet -----------------------------------

    def pack(self, params: ParameterSet) -> np.ndarray:
        out = list(np.asarray(params.beta, dtype=float))
        out += [params.mu_sigma, params.mu_kappa]
        out += [params.chol[i, j] for i, j in self.chol_index()]
        for kl in TRANSITIONS:
            ts, tp = self.transitions[kl], params.transitions[kl]
            out += list(np.asarray(tp.gamma, dtype=float))
            out += [a for a, on in zip(tp.alpha, ts.associations) if on]
            if ts.baseline == "weibull":
                out.append(tp.sqrt_eta)
            out.append(tp.zeta)
        return np.asarray(out, dtype=float)

    def unpack(self, theta) -> ParameterSet:
        """Inverse of :meth:`pack`; traceable under jax."""
        xp = _xp(theta)
        if theta.shape[0] != self.n_params:
            raise ValueError(f"parameter vector has length {theta.shape[0]}, expected {self.n_params}")
        pos = 0

        def take(n):
            nonlocal pos
            out = theta[pos : pos + n]
            pos += n
            return out

        beta = take(self.n_beta)
        mu_sigma, mu_kappa = theta[pos], theta[pos + 1]
        pos += 2
        idx = self.chol_index()
        d = self.q + 2
        scatter = np.zeros((d * d, len(idx)))
        for k, (i, j) in enumerate(idx):
            scatter[i * d + j, k] = 1.0
        chol = (xp.asarray(scatter) @ take(len(idx))).reshape(d, d)
        transitions = {}
        for kl in TRANSITIONS:
            ts = self.transitions[kl]
            gamma = take(ts.n_covariates)
            on = [k for k, flag in enumerate(ts.associations) if flag]
            sel = np.zeros((4, len(on)))
            for col, k in enumerate(on):
                sel[k, col] = 1.0
            alpha = xp.asarray(sel) @ take(len(on))
            sqrt_eta = take(1)[0] if ts.baseline == "weibull" else None
            zeta = take(1)[0]
            transitions[kl] = TransitionParams(gamma, alpha, zeta, sqrt_eta)
        return ParameterSet(beta, mu_sigma, mu_kappa, chol, transitions)


# -- model functions ----------------------------------------------------------


def trajectory(t, beta, b, spec: ModelSpec | None = None, covariates=()):
    """Current value and slope (per model-time unit) of the marker trajectory.

    ``t`` may be a scalar or a 1-d grid; ``b`` may be one draw ``(q,)`` or a
    stack of draws ``(S, q)``, giving results of shape ``(S, len(t))``.
    """
    spec = spec or ModelSpec()
    xp = _xp(t, beta, b)
    beta = xp.asarray(beta)
    b = xp.asarray(b)
    if beta.shape[-1] != spec.n_beta or b.shape[-1] != spec.q:
        raise ValueError(
            f"dimension mismatch: beta has {beta.shape[-1]} (expected {spec.n_beta}), "
            f"b has {b.shape[-1]} (expected {spec.q})"
        )
    t = xp.asarray(t, dtype=float)

    def random_part(z):
        return b @ (z.T if z.ndim == 2 else z)

    value = spec.fixed_design(t, covariates) @ beta + random_part(spec.random_design(t))
    slope = spec.fixed_design_slope(t, covariates) @ beta + random_part(spec.random_design_slope(t))
    return value, slope


def residual_scales(mu_sigma, mu_kappa, tau_sigma, tau_kappa):
    xp = _xp(mu_sigma, mu_kappa, tau_sigma, tau_kappa)
    return xp.exp(mu_sigma + tau_sigma), xp.exp(mu_kappa + tau_kappa)


def log_baseline_hazard(spec: TransitionSpec, tp: TransitionParams, t):
    xp = _xp(t, tp.zeta, tp.sqrt_eta)
    if spec.baseline == "exponential":
        return xp.zeros_like(xp.asarray(t, dtype=float)) + tp.zeta
    eta = tp.sqrt_eta**2
    logt = xp.log(xp.maximum(xp.asarray(t, dtype=float), LOG_TIME_FLOOR))
    return xp.log(eta) + (eta - 1.0) * logt + tp.zeta


def baseline_hazard(spec: TransitionSpec, tp: TransitionParams, t):
    """Weibull ``eta t^(eta-1) exp(zeta)`` with eta = sqrt_eta**2, or ``exp(zeta)``."""
    if spec.baseline == "weibull" and tp.sqrt_eta**2 < 1 and np.any(np.asarray(t) <= 0):
        raise ValueError("Weibull baseline with eta < 1 is singular at t <= 0")
    xp = _xp(t, tp.zeta, tp.sqrt_eta)
    if spec.baseline == "weibull":
        eta = tp.sqrt_eta**2
        return eta * xp.asarray(t, dtype=float) ** (eta - 1.0) * xp.exp(tp.zeta)
    return xp.exp(tp.zeta) + 0.0 * xp.asarray(t, dtype=float)


def log_linear_predictor(tp: TransitionParams, covariates, value, slope, sigma, kappa):
    xp = _xp(value, slope, sigma, tp.alpha)
    gamma = xp.asarray(tp.gamma)
    cov = xp.asarray(covariates, dtype=float)
    wg = cov @ gamma if gamma.shape[0] else 0.0
    a = tp.alpha
    return wg + a[0] * value + a[1] * slope + a[2] * sigma + a[3] * kappa


def transition_hazard(spec: TransitionSpec, tp: TransitionParams, t, covariates, value, slope, sigma, kappa):
    """Proportional-hazards intensity for one transition given the trajectory."""
    xp = _xp(t, value, slope, sigma)
    lp = log_linear_predictor(tp, covariates, value, slope, sigma, kappa)
    return baseline_hazard(spec, tp, t) * xp.exp(lp)


def log_transition_hazard(spec, tp, t, covariates, value, slope, sigma, kappa):
    return log_baseline_hazard(spec, tp, t) + log_linear_predictor(
        tp, covariates, value, slope, sigma, kappa
    )


def assemble_covariance(chol, mask=None):
    xp = _xp(chol)
    if mask is not None:
        chol = xp.where(xp.asarray(mask), chol, 0.0)
    return chol @ chol.T


@dataclass(frozen=True)
class RandomEffectsDistribution:
    chol: np.ndarray
    mask: np.ndarray | None = None

    @property
    def covariance(self) -> np.ndarray:
        return assemble_covariance(self.chol, self.mask)

    def blocks(self, q: int):
        cov = self.covariance
        return cov[:q, :q], cov[:q, q:], cov[q:, q:]
