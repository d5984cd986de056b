"""Goodness-of-fit and reporting: empirical Bayes effects, marker and hazard
curves, hazard-ratio tables, variability histograms."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial
from typing import Sequence

import jax
import jax.numpy as jnp
import numpy as np
from scipy.stats import norm

from .kernel import _columns, _subject_loglik
from .likelihood import CaseTag, classify_case
from .model import TRANSITIONS, ModelSpec, ParameterSet, RandomEffects, SubjectData, trajectory
from .estimation import FitResult, naive_dataset_transform
from .likelihood import cumulative_hazard

Z95 = 1.959963984540054


@dataclass
class EmpiricalBayesEstimate:
    id: str
    b: np.ndarray
    tau_sigma: float
    tau_kappa: float
    sigma: float
    kappa: float
    converged: bool
    grad_norm: float
    objective: float

    @property
    def draw(self) -> RandomEffects:
        return RandomEffects(self.b, self.tau_sigma, self.tau_kappa)


# -- empirical Bayes --------------------------------------------------------------


def _packed_row(subject: SubjectData, spec: ModelSpec):
    cols = _columns([subject], spec, max(len(subject.visits), 1))
    case = classify_case(subject.event)
    needs = case in (CaseTag.INTERVAL_DEMENTIA, CaseTag.HEALTHY_LAST_VISIT_BEFORE_T)
    return {k: jnp.asarray(v[0]) for k, v in cols.items()}, needs


@partial(jax.jit, static_argnums=(3, 4, 5))
def _posterior(z, theta, row, spec, with_integral, longitudinal_only):
    """Log joint density of data and whitened effects z, u = chol z."""
    cond = _subject_loglik(theta, z[None], row, spec, with_integral, longitudinal_only, conditional=True)[0]
    return cond - 0.5 * z @ z


_posterior_grad = jax.jit(jax.grad(_posterior), static_argnums=(3, 4, 5))
_posterior_hess = jax.jit(jax.hessian(_posterior), static_argnums=(3, 4, 5))


def empirical_bayes(subject: SubjectData, theta, spec: ModelSpec, longitudinal_only: bool = False,
                    tol: float = 1e-6, max_iterations: int = 200) -> EmpiricalBayesEstimate:
    """Posterior mode of (b, tau) by damped Newton from the prior mode.

    The search runs on whitened effects z with (b, tau) = chol z, so directions
    with zero prior variance stay pinned at zero.
    """
    theta = jnp.asarray(theta, dtype=float)
    if longitudinal_only and theta.shape[0] == spec.n_longitudinal_params:
        theta = jnp.concatenate([theta, jnp.ones(spec.n_params - theta.shape[0])])
    row, needs = _packed_row(subject, spec)
    with_integral = needs and not longitudinal_only
    args = (theta, row, spec, with_integral, longitudinal_only)
    d = spec.q + 2
    z = jnp.zeros(d)
    f = float(_posterior(z, *args))
    lam = 1e-3
    converged = False
    g = np.asarray(_posterior_grad(z, *args))
    for _ in range(max_iterations):
        if np.linalg.norm(g) < tol:
            converged = True
            break
        A = -np.asarray(_posterior_hess(z, *args))
        for _ in range(40):
            try:
                c = np.linalg.cholesky(A + lam * np.eye(d))
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            step = np.linalg.solve(c.T, np.linalg.solve(c, g))
            f_new = float(_posterior(z + step, *args))
            if math.isfinite(f_new) and f_new >= f:
                break
            lam *= 10.0
        else:
            break
        z, f = z + step, f_new
        lam = max(lam * 0.1, 1e-12)
        g = np.asarray(_posterior_grad(z, *args))
    converged = converged or np.linalg.norm(g) < tol
    params = spec.unpack(np.asarray(theta))
    u = np.asarray(params.chol) @ np.asarray(z)
    q = spec.q
    return EmpiricalBayesEstimate(
        subject.id, u[:q], float(u[q]), float(u[q + 1]),
        float(np.exp(params.mu_sigma + u[q])), float(np.exp(params.mu_kappa + u[q + 1])),
        bool(converged), float(np.linalg.norm(g)), f,
    )


def empirical_bayes_all(dataset: Sequence[SubjectData], theta, spec: ModelSpec, longitudinal_only=False):
    return [empirical_bayes(s, theta, spec, longitudinal_only) for s in dataset]


# -- curves -------------------------------------------------------------------------


@dataclass
class MarkerBin:
    lo: float  # age, years
    hi: float
    n: int
    observed_mean: float
    ci_low: float
    ci_high: float
    predicted_mean: float

    @property
    def covered(self) -> bool:
        return self.ci_low <= self.predicted_mean <= self.ci_high


def marker_fit_curve(dataset: Sequence[SubjectData], eb: Sequence[EmpiricalBayesEstimate], params: ParameterSet,
                     spec: ModelSpec, bin_width: float = 3.0) -> list[MarkerBin]:
    """Observed marker means (normal 95% CI) against subject-specific
    predictions at the same visits, by age bins of ``bin_width`` years."""
    if not dataset:
        raise ValueError("empty dataset")
    ages, obs, pred = [], [], []
    for s, e in zip(dataset, eb):
        if not s.visits:
            continue
        times = np.array([v.time for v in s.visits])
        value, _ = trajectory(times, np.asarray(params.beta), e.b, spec, s.long_covariates)
        for v, m in zip(s.visits, np.atleast_1d(value)):
            y = np.asarray(v.measurements, dtype=float)
            ages.append(np.full(y.size, float(spec.time_scale.inverse(v.time))))
            obs.append(y)
            pred.append(np.full(y.size, float(m)))
    ages, obs, pred = np.concatenate(ages), np.concatenate(obs), np.concatenate(pred)
    lo, hi = ages.min(), ages.max()
    n_bins = max(1, int(math.ceil((hi - lo) / bin_width - 1e-12)))
    idx = np.minimum(((ages - lo) // bin_width).astype(int), n_bins - 1)
    out = []
    for k in range(n_bins):
        sel = idx == k
        n = int(sel.sum())
        if n == 0:
            continue
        m = float(obs[sel].mean())
        half = Z95 * float(obs[sel].std(ddof=1)) / math.sqrt(n) if n > 1 else math.nan
        out.append(MarkerBin(lo + k * bin_width, min(lo + (k + 1) * bin_width, hi), n, m, m - half, m + half,
                             float(pred[sel].mean())))
    return out


def cumulative_hazard_curves(dataset: Sequence[SubjectData], draws: Sequence[RandomEffects], params: ParameterSet,
                             spec: ModelSpec, grid) -> dict[str, np.ndarray]:
    """Mean over subjects of each transition's cumulative intensity from 0,
    given per-subject effects (empirical Bayes or true).

    The integral is accumulated piece by piece over the grid, so each curve
    is nondecreasing by construction.
    """
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) <= 0) or grid[0] < 0:
        raise ValueError("grid must be increasing and nonnegative")
    knots = np.concatenate([[0.0], grid])
    out = {}
    for kl in TRANSITIONS:
        total = np.zeros(grid.size)
        for s, d in zip(dataset, draws):
            d = RandomEffects(np.asarray(d.b)[None], np.atleast_1d(d.tau_sigma), np.atleast_1d(d.tau_kappa))
            pieces = cumulative_hazard(kl, knots[:-1], knots[1:], s, params, d, spec)[0]
            total += np.cumsum(pieces)
        out[kl] = total / len(dataset)
    return out


def nelson_aalen(dataset: Sequence[SubjectData], kl: str, grid) -> np.ndarray:
    """Naive cumulative-hazard comparator with midpoint onsets and delayed entry.

    Undiagnosed deaths count as direct 0->2 transitions, as in the naive model.
    """
    grid = np.asarray(grid, dtype=float)
    spells = []  # (start, stop, event) in the origin state of ``kl``
    for s in naive_dataset_transform(dataset):
        ev = s.event
        onset = ev.last_healthy if ev.dem else None
        if kl in ("01", "02"):
            stop = onset if ev.dem else ev.terminal
            hit = ev.dem if kl == "01" else (ev.death and not ev.dem)
            spells.append((ev.entry, stop, hit))
        elif ev.dem:
            spells.append((onset, ev.terminal, ev.death))
    if not spells:
        return np.zeros(grid.size)
    start, stop, hit = (np.array(x, dtype=float) for x in zip(*spells))
    times = np.unique(stop[hit > 0])
    increments = np.array([np.sum((stop == t) & (hit > 0)) / max(np.sum((start < t) & (stop >= t)), 1)
                           for t in times])
    cum = np.cumsum(increments)
    pos = np.searchsorted(times, grid, side="right")
    return np.where(pos > 0, cum[np.maximum(pos - 1, 0)], 0.0)


# -- tables ------------------------------------------------------------------------


@dataclass
class HazardRatio:
    name: str
    estimate: float
    se: float
    hr: float
    ci_low: float
    ci_high: float
    p_value: float


def hazard_ratios(names: Sequence[str], estimates, ses) -> list[HazardRatio]:
    out = []
    for name, b, se in zip(names, estimates, ses):
        z = b / se
        out.append(HazardRatio(name, float(b), float(se), math.exp(b), math.exp(b - Z95 * se),
                               math.exp(b + Z95 * se), float(2 * norm.sf(abs(z)))))
    return out


def hazard_ratio_table(fit: FitResult) -> list[HazardRatio]:
    """HR, 95% CI and Wald p for every log-hazard regression coefficient."""
    if fit.std_errors is None:
        raise ValueError("standard errors unavailable; hazard-ratio table withheld")
    keep = [k for k, n in enumerate(fit.names) if n.startswith(("alpha_", "gamma"))]
    return hazard_ratios([fit.names[k] for k in keep], fit.theta[keep], fit.std_errors[keep])


def variability_histograms(eb: Sequence[EmpiricalBayesEstimate], bins: int = 20):
    """Histogram data (edges, counts) of predicted sigma_i and kappa_i."""
    out = {}
    for key in ("sigma", "kappa"):
        values = np.array([getattr(e, key) for e in eb])
        counts, edges = np.histogram(values, bins=bins)
        out[key] = (edges, counts)
    return out
