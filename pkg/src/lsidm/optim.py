"""Marquardt-Levenberg maximization and Hessian-based standard errors."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .likelihood import EvaluationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    max_iterations: int = 100
    tol_param: float = 1e-5
    tol_fn: float = 1e-5
    tol_rdm: float = 1e-4
    damping: float = 1e-3
    growth: float = 10.0
    shrink: float = 0.1
    h_rel: float = 1e-4
    max_rejections: int = 30

    def __post_init__(self):
        if min(self.tol_param, self.tol_fn, self.tol_rdm, self.damping, self.h_rel) <= 0:
            raise ValueError("tolerances, damping and step must be positive")
        if not self.growth > 1.0 > self.shrink > 0.0:
            raise ValueError("need growth > 1 > shrink > 0")


@dataclass
class OptimResult:
    theta: np.ndarray
    value: float
    converged: bool
    iterations: int
    criteria: dict[str, float]
    trace: list[float] = field(default_factory=list)
    message: str = ""


def _steps(theta, h_rel):
    return h_rel * np.maximum(np.abs(theta), 1.0)


def numeric_gradient(objective: Callable, theta, h_rel: float = 1e-4) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    h = _steps(theta, h_rel)
    g = np.empty_like(theta)
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = h[k]
        g[k] = (objective(theta + e) - objective(theta - e)) / (2 * h[k])
    return g


def numeric_hessian(objective: Callable, theta, h_rel: float = 1e-4, gradient: Callable | None = None) -> np.ndarray:
    """Central finite-difference Hessian, symmetrized.

    With ``gradient`` the Hessian columns are central differences of the
    gradient; otherwise second differences of the objective are used.
    """
    theta = np.asarray(theta, dtype=float)
    p = theta.size
    h = _steps(theta, h_rel)
    H = np.empty((p, p))
    if gradient is not None:
        for k in range(p):
            e = np.zeros(p)
            e[k] = h[k]
            H[:, k] = (np.asarray(gradient(theta + e)) - np.asarray(gradient(theta - e))) / (2 * h[k])
        return 0.5 * (H + H.T)
    f0 = objective(theta)
    for k in range(p):
        ek = np.zeros(p)
        ek[k] = h[k]
        H[k, k] = (objective(theta + ek) - 2 * f0 + objective(theta - ek)) / h[k] ** 2
        for m in range(k):
            em = np.zeros(p)
            em[m] = h[m]
            H[k, m] = (
                objective(theta + ek + em) - objective(theta + ek - em)
                - objective(theta - ek + em) + objective(theta - ek - em)
            ) / (4 * h[k] * h[m])
            H[m, k] = H[k, m]
    return 0.5 * (H + H.T)


def _fd_derivatives(objective, h_rel):
    def derivatives(theta):
        return objective(theta), numeric_gradient(objective, theta, h_rel), numeric_hessian(objective, theta, h_rel)

    return derivatives


def _safe(objective, theta):
    try:
        value = float(objective(theta))
    except (EvaluationError, FloatingPointError, OverflowError):
        return -math.inf
    return value if math.isfinite(value) else -math.inf


def relative_distance_to_maximum(g, H) -> float:
    """g' (-H)^{-1} g / p, or inf when -H is not positive definite."""
    try:
        c = np.linalg.cholesky(-np.asarray(H))
    except np.linalg.LinAlgError:
        return math.inf
    y = np.linalg.solve(c, g)
    return float(y @ y) / len(g)


def marquardt_levenberg(objective: Callable, theta0, cfg: OptimizerConfig = OptimizerConfig(),
                        derivatives: Callable | None = None, callback: Callable | None = None) -> OptimResult:
    """Maximize ``objective`` with damped Newton steps.

    ``derivatives(theta)`` returns (value, gradient, hessian) of the objective;
    by default both derivatives are central finite differences. A step is
    accepted only if it does not decrease the objective, so the accepted
    values in ``trace`` are nondecreasing. Convergence requires the parameter
    change, the function change and the relative distance to the maximum to
    all fall below their tolerances.
    """
    derivatives = derivatives or _fd_derivatives(objective, cfg.h_rel)
    theta = np.asarray(theta0, dtype=float).copy()
    f = _safe(objective, theta)
    if f == -math.inf:
        raise EvaluationError("objective is not finite at the starting point")
    trace = [f]
    lam = cfg.damping
    crit = {"param": math.inf, "fn": math.inf, "rdm": math.inf}
    message = "maximum number of iterations reached"
    converged = False
    it = 0
    for it in range(cfg.max_iterations + 1):
        _, g, H = derivatives(theta)
        g, H = np.asarray(g, dtype=float), np.asarray(H, dtype=float)
        crit["rdm"] = relative_distance_to_maximum(g, H)
        if callback is not None:
            callback(it, theta, f, crit)
        if crit["param"] < cfg.tol_param and crit["fn"] < cfg.tol_fn and crit["rdm"] < cfg.tol_rdm:
            converged, message = True, "convergence criteria satisfied"
            break
        if it == cfg.max_iterations:
            break
        A = -H
        scale = np.maximum(np.abs(np.diag(A)), 1e-8 * max(np.abs(A).max(), 1.0))
        accepted = False
        for _ in range(cfg.max_rejections):
            try:
                c = np.linalg.cholesky(A + lam * np.diag(scale))
            except np.linalg.LinAlgError:
                lam *= cfg.growth
                continue
            step = np.linalg.solve(c.T, np.linalg.solve(c, g))
            f_new = _safe(objective, theta + step)
            if f_new >= f:
                accepted = True
                break
            lam *= cfg.growth
        if not accepted:
            message = "no ascent step found"
            converged = crit["rdm"] < cfg.tol_rdm
            break
        lam = max(lam * cfg.shrink, 1e-12)
        crit["param"] = float(np.max(np.abs(step) / np.maximum(np.abs(theta), 1.0)))
        crit["fn"] = abs(f_new - f)
        theta = theta + step
        f = f_new
        trace.append(f)
        log.debug("iteration %d: loglik %.6f, rdm %.3g", it, f, crit["rdm"])
    return OptimResult(theta, f, converged, it, dict(crit), trace, message)


@dataclass
class StandardErrors:
    se: np.ndarray | None
    covariance: np.ndarray | None
    positive_definite: bool


def standard_errors(H) -> StandardErrors:
    """Inverse of minus the Hessian; withheld when it is not positive definite."""
    A = -np.asarray(H, dtype=float)
    try:
        c = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return StandardErrors(None, None, False)
    cinv = np.linalg.inv(c)
    cov = cinv.T @ cinv
    return StandardErrors(np.sqrt(np.diag(cov)), cov, True)


def covariance_jacobian(chol, index: Sequence[tuple[int, int]]) -> np.ndarray:
    """d vec(L L') / d (free entries of L); rows are row-major (a, b) pairs."""
    L = np.asarray(chol, dtype=float)
    d = L.shape[0]
    J = np.zeros((d * d, len(index)))
    for k, (i, j) in enumerate(index):
        for a in range(d):
            for b in range(d):
                J[a * d + b, k] = (L[b, j] if a == i else 0.0) + (L[a, j] if b == i else 0.0)
    return J


def delta_method_re_covariance(chol, cov_chol_params, index: Sequence[tuple[int, int]]) -> np.ndarray:
    """Standard errors of each entry of L L' from the covariance of L's free entries."""
    J = covariance_jacobian(chol, index)
    V = np.asarray(cov_chol_params, dtype=float)
    var = np.einsum("ij,jk,ik->i", J, V, J)
    d = np.asarray(chol).shape[0]
    return np.sqrt(np.maximum(var, 0.0)).reshape(d, d)
