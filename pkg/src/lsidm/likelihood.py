"""Per-subject marginal likelihood, evaluated draw-vectorized with numpy.

This is the readable reference path. :mod:`lsidm.kernel` evaluates the same
quantities for whole datasets under jax and is checked against it.
"""

from __future__ import annotations

import enum
import math
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .model import (
    ModelSpec,
    ParameterSet,
    RandomEffects,
    RandomEffectsDistribution,
    SubjectData,
    EventRecord,
    log_transition_hazard,
    residual_scales,
    trajectory,
)
from .qmc import QmcConfig, sobol_normal_draws
from .quadrature import GK15

LOG_2PI = math.log(2.0 * math.pi)
TIME_EPS = 1e-8


class EvaluationError(ArithmeticError):
    """The likelihood could not be evaluated to a finite number."""


class CaseTag(enum.Enum):
    INTERVAL_DEMENTIA = "interval_dementia"  # cases 1-2
    HEALTHY_AT_T = "healthy_at_t"  # cases 3-4
    HEALTHY_LAST_VISIT_BEFORE_T = "healthy_last_visit_before_t"  # cases 5-6
    EXACT_DEMENTIA = "exact_dementia"  # cases 7-8


def classify_case(event: EventRecord, eps: float = TIME_EPS) -> CaseTag:
    if event.dem:
        if event.diagnosis - event.last_healthy > eps:
            return CaseTag.INTERVAL_DEMENTIA
        return CaseTag.EXACT_DEMENTIA
    if event.terminal - event.last_healthy > eps:
        return CaseTag.HEALTHY_LAST_VISIT_BEFORE_T
    return CaseTag.HEALTHY_AT_T


def visit_block_logdensity(measurements, mean, sigma, kappa):
    """Log-density of one visit's repeated measurements.

    The covariance is sigma^2 * 11' + kappa^2 * I, evaluated in closed form
    through the mean and within-visit sum of squares of the residuals.
    ``mean``, ``sigma`` and ``kappa`` broadcast (e.g. over draws).
    """
    y = np.asarray(measurements, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    if np.any(sigma <= 0) or np.any(kappa <= 0):
        raise ValueError("sigma and kappa must be positive")
    n = y.size
    ybar = y.mean()
    ss = float(np.sum((y - ybar) ** 2))
    rbar = ybar - np.asarray(mean, dtype=float)
    k2 = kappa**2
    tot = k2 + n * sigma**2
    return -0.5 * (n * LOG_2PI + (n - 1) * np.log(k2) + np.log(tot) + ss / k2 + n * rbar**2 / tot)


def longitudinal_loglik(subject: SubjectData, params: ParameterSet, draw: RandomEffects, spec: ModelSpec):
    sigma, kappa = residual_scales(params.mu_sigma, params.mu_kappa, draw.tau_sigma, draw.tau_kappa)
    total = np.zeros(np.shape(sigma))
    if not subject.visits:
        return total
    times = np.array([v.time for v in subject.visits])
    means, _ = trajectory(times, params.beta, draw.b, spec, subject.long_covariates)
    means = np.asarray(means)
    for j, visit in enumerate(subject.visits):
        total = total + visit_block_logdensity(visit.measurements, means[..., j], sigma, kappa)
    return total


def log_hazard(kl: str, t, subject: SubjectData, params: ParameterSet, draw: RandomEffects, spec: ModelSpec):
    """Log intensity of transition ``kl`` at times ``t`` (any shape).

    With stacked draws the result has shape ``(S,) + t.shape``.
    """
    t = np.asarray(t, dtype=float)
    flat = t.reshape(-1)
    value, slope = trajectory(flat, params.beta, draw.b, spec, subject.long_covariates)
    sigma, kappa = residual_scales(params.mu_sigma, params.mu_kappa, draw.tau_sigma, draw.tau_kappa)
    sigma = np.asarray(sigma)[..., None]
    kappa = np.asarray(kappa)[..., None]
    out = log_transition_hazard(
        spec.transitions[kl], params.transitions[kl], flat,
        subject.event.covariate_row(kl), value, slope, sigma, kappa,
    )
    return np.asarray(out).reshape(np.shape(out)[:-1] + t.shape)


def cumulative_hazard(kl, a, b, subject, params, draw, spec: ModelSpec):
    """One 15-point Gauss-Kronrod application of the intensity over [a, b].

    ``b`` may be an array of upper limits; the result gains its shape.
    """
    a_arr, b_arr = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if np.any(a_arr > b_arr):
        raise ValueError(f"lower limit {a} exceeds upper limit {b}")
    x, w = GK15.map_to(a_arr, b_arr)
    lam = np.exp(log_hazard(kl, x, subject, params, draw, spec))
    return np.sum(w * lam, axis=-1)


def _log_onset_integrand(u, subject, params, draw, spec, base01, base02, lower):
    """log of exp(-L01(u)-L02(u)) * l01(u) * exp(-(L12(T)-L12(u))) * l12(T)^d."""
    ev = subject.event
    cum0 = base01[..., None] + base02[..., None]
    cum0 = cum0 + cumulative_hazard("01", lower, u, subject, params, draw, spec)
    cum0 = cum0 + cumulative_hazard("02", lower, u, subject, params, draw, spec)
    cum12 = cumulative_hazard("12", u, ev.terminal, subject, params, draw, spec)
    out = -cum0 - cum12 + log_hazard("01", u, subject, params, draw, spec)
    if ev.death:
        out = out + log_hazard("12", ev.terminal, subject, params, draw, spec)[..., None]
    return out


def log_event_contribution(subject: SubjectData, params: ParameterSet, draw: RandomEffects, spec: ModelSpec):
    ev = subject.event
    case = classify_case(ev)
    zero = np.zeros(np.shape(draw.tau_sigma))
    terms = []
    if case in (CaseTag.HEALTHY_AT_T, CaseTag.HEALTHY_LAST_VISIT_BEFORE_T):
        direct = -cumulative_hazard("01", 0.0, ev.terminal, subject, params, draw, spec)
        direct = direct - cumulative_hazard("02", 0.0, ev.terminal, subject, params, draw, spec)
        if ev.death:
            direct = direct + log_hazard("02", ev.terminal, subject, params, draw, spec)
        terms.append(direct + zero)
    if case in (CaseTag.INTERVAL_DEMENTIA, CaseTag.HEALTHY_LAST_VISIT_BEFORE_T):
        upper = ev.diagnosis if case is CaseTag.INTERVAL_DEMENTIA else ev.terminal
        base01 = cumulative_hazard("01", 0.0, ev.last_healthy, subject, params, draw, spec)
        base02 = cumulative_hazard("02", 0.0, ev.last_healthy, subject, params, draw, spec)
        u, w = GK15.map_to(ev.last_healthy, upper)
        logg = _log_onset_integrand(u, subject, params, draw, spec, base01, base02, ev.last_healthy)
        terms.append(logsumexp(logg + np.log(w), axis=-1) + zero)
    if case is CaseTag.EXACT_DEMENTIA:
        L = ev.last_healthy
        out = -cumulative_hazard("01", 0.0, L, subject, params, draw, spec)
        out = out - cumulative_hazard("02", 0.0, L, subject, params, draw, spec)
        out = out - cumulative_hazard("12", L, ev.terminal, subject, params, draw, spec)
        out = out + log_hazard("01", L, subject, params, draw, spec)
        if ev.death:
            out = out + log_hazard("12", ev.terminal, subject, params, draw, spec)
        terms.append(out + zero)
    return terms[0] if len(terms) == 1 else np.logaddexp(*terms)


def event_contribution(subject, params, draw, spec: ModelSpec):
    """f(D | b, tau) for the subject's observation pattern."""
    with np.errstate(over="raise", invalid="raise"):
        try:
            out = np.exp(log_event_contribution(subject, params, draw, spec))
        except FloatingPointError as exc:
            raise EvaluationError(f"subject {subject.id}: nonfinite event term") from exc
    if not np.all(np.isfinite(out)):
        raise EvaluationError(f"subject {subject.id}: nonfinite event term")
    return out


def draws_for(params: ParameterSet, cfg: QmcConfig, spec: ModelSpec) -> RandomEffects:
    return sobol_normal_draws(cfg, RandomEffectsDistribution(params.chol, spec.chol_mask))


def subject_marginal_loglik(subject, params, cfg: QmcConfig, spec: ModelSpec, draws=None) -> float:
    """QMC log-likelihood contribution with the delayed-entry correction."""
    draws = draws if draws is not None else draws_for(params, cfg, spec)
    num = longitudinal_loglik(subject, params, draws, spec) + log_event_contribution(
        subject, params, draws, spec
    )
    t0 = subject.event.entry
    den = -cumulative_hazard("01", 0.0, t0, subject, params, draws, spec)
    den = den - cumulative_hazard("02", 0.0, t0, subject, params, draws, spec)
    if not np.any(np.isfinite(num)) or np.max(num) == -np.inf:
        raise EvaluationError(f"subject {subject.id}: every draw underflows")
    value = float(logsumexp(num) - logsumexp(den))
    if not math.isfinite(value):
        raise EvaluationError(f"subject {subject.id}: nonfinite contribution")
    return value


def total_loglik(dataset: Sequence[SubjectData], params, cfg: QmcConfig, spec: ModelSpec) -> float:
    if not dataset:
        raise ValueError("empty dataset")
    draws = draws_for(params, cfg, spec)
    parts = []
    for subject in dataset:
        try:
            parts.append(subject_marginal_loglik(subject, params, cfg, spec, draws))
        except EvaluationError as exc:
            raise EvaluationError(f"subject {subject.id}: {exc}") from exc
    return math.fsum(parts)
