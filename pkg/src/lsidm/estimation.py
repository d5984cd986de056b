"""Maximum likelihood fitting: naive comparator, three-step pipeline, standard errors."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .kernel import JointLikelihood, _ordered_sum
from .likelihood import EvaluationError
from .model import TRANSITIONS, ModelSpec, ParameterSet, SubjectData, assemble_covariance
from .optim import (
    OptimizerConfig,
    OptimResult,
    delta_method_re_covariance,
    marquardt_levenberg,
    numeric_hessian,
    relative_distance_to_maximum,
    standard_errors,
)
from .qmc import QmcConfig

log = logging.getLogger(__name__)

START_SQRT_ETA = 1.3


@dataclass(frozen=True)
class PipelineConfig:
    S1: int = 500
    S2: int = 1000
    run_step1: bool = True
    run_step2: bool = True
    run_step3: bool = True
    longitudinal_only: bool = False
    se_h_rel: float = 1e-3
    curvature: str = "hybrid"  # "bhhh", "fd" or "hybrid"; see derivatives_for
    chunk: int = 32
    max_visits: int | None = None

    def __post_init__(self):
        if not self.S2 >= self.S1 >= 1:
            raise ValueError("need S2 >= S1 >= 1")
        if self.curvature not in ("bhhh", "fd", "hybrid"):
            raise ValueError("curvature must be 'bhhh', 'fd' or 'hybrid'")


@dataclass
class FitResult:
    spec: ModelSpec
    theta: np.ndarray
    loglik: float
    converged: bool
    criteria: dict[str, float]
    iterations: int
    S_used: int
    trace: list[float] = field(default_factory=list)
    std_errors: np.ndarray | None = None
    covariance_of_estimates: np.ndarray | None = None
    hessian_pd: bool | None = None
    re_covariance: np.ndarray | None = None
    re_covariance_se: np.ndarray | None = None
    step: str = ""
    message: str = ""

    @property
    def names(self) -> list[str]:
        names = self.spec.param_names()
        return names[: self.theta.size]

    @property
    def theta_hat(self) -> ParameterSet:
        return self.spec.unpack(self.theta)

    def to_dict(self) -> dict:
        def arr(x):
            return None if x is None else np.asarray(x).tolist()

        return {
            "step": self.step,
            "names": self.names,
            "theta": arr(self.theta),
            "loglik": self.loglik,
            "converged": self.converged,
            "criteria": self.criteria,
            "iterations": self.iterations,
            "S_used": self.S_used,
            "std_errors": arr(self.std_errors),
            "covariance_of_estimates": arr(self.covariance_of_estimates),
            "hessian_pd": self.hessian_pd,
            "re_covariance": arr(self.re_covariance),
            "re_covariance_se": arr(self.re_covariance_se),
            "message": self.message,
        }


class PipelineError(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"step {step} failed: {cause}")
        self.step = step


def naive_dataset_transform(dataset: Sequence[SubjectData]) -> list[SubjectData]:
    """Midpoint onset for diagnosed subjects; undiagnosed deaths become direct 0->2 deaths."""
    out = []
    for s in dataset:
        ev = s.event
        if ev.dem:
            mid = 0.5 * (ev.last_healthy + ev.diagnosis)
            ev = replace(ev, last_healthy=mid, diagnosis=mid)
        elif ev.death:
            ev = replace(ev, last_healthy=ev.terminal)
        out.append(replace(s, event=ev))
    return out


def derivatives_for(lik: JointLikelihood, curvature: str = "hybrid", h_rel: float = 1e-4,
                    switch_rdm: float = 1e-2):
    """(value, gradient, Hessian approximation) callable for the optimizer.

    "bhhh" uses minus the sum of outer products of subject scores, "fd"
    differences the exact gradient, and "hybrid" starts with the former and
    moves to the latter once the relative distance to the maximum under the
    cheap curvature drops below ``switch_rdm``.
    """
    state = {"fd": curvature == "fd"}

    def derivatives(theta):
        vals, G = lik.scores(theta)
        g = _ordered_sum(G)
        H = -(G.T @ G)
        if curvature == "hybrid" and not state["fd"]:
            state["fd"] = relative_distance_to_maximum(g, H) < switch_rdm
        if state["fd"]:
            H = numeric_hessian(None, theta, h_rel, gradient=lik.gradient)
        return math.fsum(vals), g, H

    return derivatives


def maximize(lik: JointLikelihood, theta0, opt: OptimizerConfig, curvature: str = "hybrid") -> OptimResult:
    return marquardt_levenberg(lik, theta0, opt, derivatives_for(lik, curvature, opt.h_rel))


def attach_standard_errors(fit: FitResult, lik: JointLikelihood, h_rel: float = 1e-3) -> FitResult:
    """Finite-difference Hessian of the exact QMC-likelihood gradient at the estimate."""
    try:
        H = numeric_hessian(None, fit.theta, h_rel, gradient=lik.gradient)
    except EvaluationError as exc:
        fit.message = f"Hessian evaluation failed: {exc}"
        fit.hessian_pd = False
        return fit
    se = standard_errors(H)
    fit.hessian_pd = se.positive_definite
    if se.positive_definite:
        fit.std_errors = se.se
        fit.covariance_of_estimates = se.covariance
        spec = fit.spec
        index = spec.chol_index()
        start = spec.n_beta + 2
        chol_cov = se.covariance[start : start + len(index), start : start + len(index)]
        fit.re_covariance_se = delta_method_re_covariance(fit.theta_hat.chol, chol_cov, index)
    return fit


def _to_fit(res: OptimResult, spec: ModelSpec, S: int, step: str) -> FitResult:
    fit = FitResult(spec, res.theta, res.value, res.converged, res.criteria, res.iterations, S,
                    res.trace, step=step, message=res.message)
    n_long = spec.n_longitudinal_params
    if res.theta.size >= n_long:
        full = np.concatenate([res.theta, np.ones(spec.n_params - res.theta.size)])
        fit.re_covariance = np.asarray(assemble_covariance(spec.unpack(full).chol))
    return fit


def fit_model(dataset, spec: ModelSpec, theta0, S: int, opt: OptimizerConfig = OptimizerConfig(),
              curvature: str = "hybrid", longitudinal_only: bool = False, with_se: bool = False,
              se_h_rel: float = 1e-3, chunk: int = 32, max_visits: int | None = None,
              step: str = "") -> FitResult:
    lik = JointLikelihood(dataset, spec, QmcConfig(S, spec.q + 2), chunk=chunk,
                          max_visits=max_visits, longitudinal_only=longitudinal_only)
    res = maximize(lik, theta0, opt, curvature)
    fit = _to_fit(res, spec, S, step)
    if with_se:
        attach_standard_errors(fit, lik, se_h_rel)
    return fit


# -- starting values ------------------------------------------------------------


def longitudinal_start(dataset: Sequence[SubjectData], spec: ModelSpec) -> np.ndarray:
    """Crude moment-based start for (beta, mu_sigma, mu_kappa, chol)."""
    X, y, ss, dof = [], [], 0.0, 0
    for s in dataset:
        for v in s.visits:
            m = np.asarray(v.measurements, dtype=float)
            x = np.asarray(spec.fixed_design(np.asarray(v.time), s.long_covariates))
            X.append(np.repeat(x[None], m.size, axis=0))
            y.append(m)
            ss += float(np.sum((m - m.mean()) ** 2))
            dof += m.size - 1
    X, y = np.concatenate(X), np.concatenate(y)
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid_var = float(np.var(y - X @ beta))
    kappa2 = ss / dof if dof > 0 else 0.25 * resid_var
    sigma2 = max(0.25 * (resid_var - kappa2), 0.05 * resid_var, 1e-6)
    d = spec.q + 2
    chol = np.zeros((d, d))
    chol[0, 0] = math.sqrt(max(0.5 * resid_var, 1e-2))
    for k in range(1, spec.q):
        chol[k, k] = 0.5
    if spec.random_scales:
        chol[spec.q, spec.q] = chol[spec.q + 1, spec.q + 1] = 0.2
    theta = list(beta) + [0.5 * math.log(sigma2), 0.5 * math.log(max(kappa2, 1e-6))]
    theta += [chol[i, j] for i, j in spec.chol_index()]
    return np.asarray(theta)


def survival_start(dataset: Sequence[SubjectData], spec: ModelSpec) -> dict[str, tuple[float, float]]:
    """(sqrt_eta, zeta) per transition matching event counts on the naive data.

    With the shape fixed, the cumulative baseline is exp(zeta) * t**eta, so the
    count-matching scale is events / sum(exit**eta - entry**eta).
    """
    out = {}
    naive = naive_dataset_transform(dataset)
    for kl in TRANSITIONS:
        weibull = spec.transitions[kl].baseline == "weibull"
        eta = START_SQRT_ETA**2 if weibull else 1.0
        events, exposure = 0.0, 0.0
        for s in naive:
            ev = s.event
            exit0 = ev.last_healthy if ev.dem else ev.terminal
            if kl == "12":
                if not ev.dem:
                    continue
                lo, hi, hit = exit0, ev.terminal, ev.death
            else:
                lo, hi = ev.entry, exit0
                hit = ev.dem if kl == "01" else (ev.death and not ev.dem)
            exposure += max(hi, 0.0) ** eta - max(lo, 0.0) ** eta
            events += hit
        rate = max(events, 0.5) / max(exposure, 1e-8)
        out[kl] = (START_SQRT_ETA if weibull else None, math.log(rate))
    return out


def joint_start(dataset, spec: ModelSpec, long_theta) -> np.ndarray:
    """Full parameter vector from marker estimates and count-matched baselines."""
    base = survival_start(dataset, spec)
    theta = list(np.asarray(long_theta, dtype=float))
    for kl in TRANSITIONS:
        ts = spec.transitions[kl]
        theta += [0.0] * (ts.n_covariates + sum(ts.associations))
        sqrt_eta, zeta = base[kl]
        if ts.baseline == "weibull":
            theta.append(sqrt_eta)
        theta.append(zeta)
    return np.asarray(theta)


# -- three-step procedure ------------------------------------------------------


@dataclass
class PipelineResult:
    final: FitResult
    steps: dict[str, FitResult]
    failed_step: int | None = None
    error: str = ""


def fit_pipeline(dataset: Sequence[SubjectData], spec: ModelSpec, cfg: PipelineConfig = PipelineConfig(),
                 opt: OptimizerConfig = OptimizerConfig(), theta0=None) -> PipelineResult:
    """Initialisation (marker model, then naive joint model), estimation with S1
    draws, precision improvement with S2 draws and standard errors there."""
    if not dataset:
        raise ValueError("empty dataset")
    steps: dict[str, FitResult] = {}
    common = dict(curvature=cfg.curvature, chunk=cfg.chunk, max_visits=cfg.max_visits)
    theta = None if theta0 is None else np.asarray(theta0, dtype=float)
    step = 1
    try:
        if cfg.run_step1 or theta is None:
            long0 = longitudinal_start(dataset, spec) if theta is None else theta[: spec.n_longitudinal_params]
            fit = fit_model(dataset, spec, long0, cfg.S1, opt, longitudinal_only=True,
                            with_se=cfg.longitudinal_only, se_h_rel=cfg.se_h_rel, step="longitudinal", **common)
            steps["longitudinal"] = fit
            if cfg.longitudinal_only:
                return PipelineResult(fit, steps)
            naive = naive_dataset_transform(dataset)
            fit = fit_model(naive, spec, joint_start(dataset, spec, fit.theta), cfg.S1, opt, step="naive", **common)
            steps["naive"] = fit
            theta = fit.theta
        step = 2
        if cfg.run_step2:
            fit = fit_model(dataset, spec, theta, cfg.S1, opt, with_se=not cfg.run_step3,
                            se_h_rel=cfg.se_h_rel, step="estimation", **common)
            steps["estimation"] = fit
            theta = fit.theta
        step = 3
        if cfg.run_step3:
            fit = fit_model(dataset, spec, theta, cfg.S2, opt, with_se=True, se_h_rel=cfg.se_h_rel,
                            step="precision", **common)
            steps["precision"] = fit
    except (EvaluationError, np.linalg.LinAlgError, ValueError) as exc:
        log.warning("pipeline step %d failed: %s", step, exc)
        last = steps[list(steps)[-1]] if steps else None
        return PipelineResult(last, steps, failed_step=step, error=str(exc))
    return PipelineResult(steps[list(steps)[-1]], steps)


def fit_naive(dataset, spec: ModelSpec, cfg: PipelineConfig = PipelineConfig(),
              opt: OptimizerConfig = OptimizerConfig(), start=None) -> FitResult:
    """Naive comparator: midpoint onsets, undiagnosed deaths as direct deaths,
    refined with S2 draws and standard errors like the main estimator."""
    naive = naive_dataset_transform(dataset)
    common = dict(curvature=cfg.curvature, chunk=cfg.chunk, max_visits=cfg.max_visits)
    if start is None:
        long0 = longitudinal_start(dataset, spec)
        lf = fit_model(dataset, spec, long0, cfg.S1, opt, longitudinal_only=True, **common)
        start = fit_model(naive, spec, joint_start(dataset, spec, lf.theta), cfg.S1, opt, **common).theta
    return fit_model(naive, spec, start, cfg.S2, opt, with_se=True, se_h_rel=cfg.se_h_rel,
                     step="naive", **common)
