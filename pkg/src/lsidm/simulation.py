"""Data generation for the illness-death simulation studies.

Event times come from inverting subject-specific cumulative intensities with
Brent's method; the visit process then decides what is observed (interval
censored diagnosis, undiagnosed dementia before death, right censoring).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from .model import (
    TRANSITIONS,
    EventRecord,
    ModelSpec,
    ParameterSet,
    RandomEffects,
    SubjectData,
    TimeScale,
    TransitionParams,
    residual_scales,
    trajectory,
    transition_hazard,
)
from .quadrature import GK15

# Random-effects covariance used for simulation truth: b = (intercept, slope)
# independent of tau = (tau_sigma, tau_kappa), taken from a cohort application fit.
APPLICATION_COV_B = np.array([[4.57, -1.86], [-1.86, 1.22]])
APPLICATION_COV_TAU = np.array([[0.07, 0.01], [0.01, 0.07]])


def application_chol() -> np.ndarray:
    cov = np.zeros((4, 4))
    cov[:2, :2] = APPLICATION_COV_B
    cov[2:, 2:] = APPLICATION_COV_TAU
    return np.linalg.cholesky(cov)


@dataclass(frozen=True)
class ScenarioPreset:
    name: str
    params: ParameterSet
    schedule: tuple[float, ...]  # follow-up visits, years after inclusion
    entry_window: tuple[float, float] = (65.0, 85.0)
    horizon: float = 20.0
    n_subjects: int = 1000
    n_measurements: int = 2
    spec: ModelSpec = field(default_factory=lambda: ModelSpec(independent_b_tau=True))

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.schedule, self.schedule[1:])):
            raise ValueError("visit schedule must be strictly increasing")


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    entry_beta: tuple[float, float] = (2.0, 5.0)
    jitter: float = 1.0 / 12.0  # years
    brent_xtol: float = 1e-12
    bracket_cap: float = 10.0  # model time, far beyond any follow-up

    def check(self, preset: ScenarioPreset):
        gaps = np.diff((0.0,) + tuple(preset.schedule))
        if self.jitter >= 0.5 * gaps.min():
            raise ValueError("jitter must be below half the smallest visit gap")


def _transitions(alphas, sqrt_etas, zetas):
    return {
        kl: TransitionParams(np.zeros(0), np.asarray(a, dtype=float), float(z), float(se))
        for kl, a, se, z in zip(TRANSITIONS, alphas, sqrt_etas, zetas)
    }


SCHEDULE_COHORT = (2.0, 4.0, 7.0, 10.0, 12.0, 14.0, 17.0)
SCHEDULE_4Y = (4.0, 8.0, 12.0, 16.0)


def scenario_preset(name: str, chol: np.ndarray | None = None) -> ScenarioPreset:
    """True parameters and design of simulation scenarios A, B and C."""
    chol = application_chol() if chol is None else np.asarray(chol, dtype=float)
    beta = np.array([14.0, 0.17])
    sqrt_etas = (2.00, 1.70, 1.70)
    if name in ("A", "B"):
        alphas = ((-0.06, 0.0, 0.50, 0.01), (-0.10, -0.40, 0.46, 0.21), (0.04, 0.02, -0.12, -0.18))
        zetas = (-4.00, -2.50, -2.20)
    elif name == "C":
        alphas = ((0.20, 0.0, 0.80, 0.01), (0.30, 0.10, 0.20, 0.20), (0.15, 0.10, 0.80, 0.10))
        zetas = (-7.00, -8.00, -4.50)
    else:
        raise ValueError(f"unknown scenario {name!r}; expected A, B or C")
    params = ParameterSet(beta, 0.30, -0.23, chol, _transitions(alphas, sqrt_etas, zetas))
    schedule = SCHEDULE_4Y if name == "B" else SCHEDULE_COHORT
    return ScenarioPreset(name, params, schedule)


def subject_rng(seed: int, *key: int) -> np.random.Generator:
    """Counter-based stream addressed by (seed, *key), e.g. (replicate, subject)."""
    ss = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def generate_subject_schedule(cfg: GeneratorConfig, preset: ScenarioPreset, rng: np.random.Generator):
    """Entry age and visit ages (inclusion visit first), in years."""
    lo, hi = preset.entry_window
    entry = lo + (hi - lo) * rng.beta(*cfg.entry_beta)
    offsets = np.asarray(preset.schedule, dtype=float)
    jit = rng.uniform(-cfg.jitter, cfg.jitter, size=offsets.size) if cfg.jitter > 0 else 0.0
    follow = entry + offsets + jit
    follow = follow[follow <= entry + preset.horizon]
    return entry, np.concatenate([[entry], follow])


def generate_random_effects_and_marker(visit_times, params: ParameterSet, spec: ModelSpec,
                                       rng: np.random.Generator, n_measurements: int = 2):
    """Draw (b, tau) and the marker at each visit time (model time scale)."""
    d = params.chol.shape[0]
    draw = RandomEffects.from_vector(params.chol @ rng.standard_normal(d), d - 2)
    sigma, kappa = residual_scales(params.mu_sigma, params.mu_kappa, draw.tau_sigma, draw.tau_kappa)
    visit_times = np.asarray(visit_times, dtype=float)
    mean, _ = trajectory(visit_times, params.beta, draw.b, spec)
    eps = sigma * rng.standard_normal(visit_times.size)
    nu = kappa * rng.standard_normal((visit_times.size, n_measurements))
    return draw, np.asarray(mean)[:, None] + eps[:, None] + nu


def hazard_function(kl: str, draw: RandomEffects, params: ParameterSet, spec: ModelSpec,
                    covariates=()) -> Callable[[np.ndarray], np.ndarray]:
    sigma, kappa = residual_scales(params.mu_sigma, params.mu_kappa, draw.tau_sigma, draw.tau_kappa)
    tspec, tp = spec.transitions[kl], params.transitions[kl]

    def hazard(t):
        value, slope = trajectory(t, params.beta, draw.b, spec)
        return transition_hazard(tspec, tp, t, covariates, value, slope, sigma, kappa)

    return hazard


def gk_cumulative(hazard: Callable, a: float, b: float) -> float:
    x, w = GK15.map_to(a, b)
    return float(np.sum(w * hazard(x)))


def invert_cumulative_hazard(kl: str, draw: RandomEffects, u: float, params: ParameterSet,
                             spec: ModelSpec, start: float = 0.0, cap: float = 10.0,
                             xtol: float = 1e-12) -> float:
    """Time T with cumulative intensity from ``start`` to T equal to -log(u).

    Returns ``inf`` when the target is not reached by ``cap``.
    """
    if not 0.0 < u < 1.0:
        raise ValueError("u must lie in (0, 1)")
    hazard = hazard_function(kl, draw, params, spec)
    target = -np.log(u)

    def resid(t):
        return gk_cumulative(hazard, start, t) - target

    if resid(cap) < 0:
        return np.inf
    return brentq(resid, start, cap, xtol=xtol, rtol=4 * np.finfo(float).eps, maxiter=200)


def apply_observation_scheme(t01: float, t02: float, t12: float | None, visits, end: float, entry: float):
    """Observed event record from latent times and visit times (model scale).

    ``t12`` is only consulted when dementia precedes death and censoring.
    Returns the record and the visit times kept (none after death).
    """
    visits = np.asarray(visits, dtype=float)

    def before(t, strict=False):
        keep = visits < t if strict else visits <= t
        return float(visits[keep].max())

    if t01 > end and t02 > end:
        rec = EventRecord(entry, float(visits.max()), None, False, end, False)
    elif t02 < t01 and t02 <= end:
        rec = EventRecord(entry, before(t02, strict=True), None, False, t02, True)
    else:
        if t12 is None:
            raise ValueError("dementia before death and censoring requires t12")
        if t12 > end:
            if t01 > visits.max():
                rec = EventRecord(entry, float(visits.max()), None, False, end, False)
            else:
                R = float(visits[visits >= t01].min())
                rec = EventRecord(entry, before(t01), R, True, end, False)
        else:
            alive_visits = visits[visits < t12]
            diagnosed = np.any((alive_visits >= t01))
            if not diagnosed:
                rec = EventRecord(entry, float(alive_visits.max()), None, False, t12, True)
            else:
                R = float(alive_visits[alive_visits >= t01].min())
                rec = EventRecord(entry, before(t01), R, True, t12, True)
    kept = visits[visits <= rec.terminal] if not rec.death else visits[visits < rec.terminal]
    return rec, kept


@dataclass
class LatentSubject:
    """Generated subject with its latent quantities (for checks and diagnostics)."""

    subject: SubjectData
    draw: RandomEffects
    t01: float
    t02: float
    t12: float | None


def _age_representable(t: float, ts: TimeScale) -> float:
    return t if not np.isfinite(t) else float(ts.transform(float(ts.inverse(t))))


def generate_subject(preset: ScenarioPreset, cfg: GeneratorConfig, rng: np.random.Generator,
                     subject_id: str = "0", time_scale: TimeScale | None = None) -> LatentSubject:
    ts = time_scale or preset.spec.time_scale
    spec, params = preset.spec, preset.params
    entry_age, visit_ages = generate_subject_schedule(cfg, preset, rng)
    visits = ts.transform(visit_ages)
    entry = float(ts.transform(entry_age))
    end = float(ts.transform(entry_age + preset.horizon))
    draw, y = generate_random_effects_and_marker(visits, params, spec, rng, preset.n_measurements)
    u01, u02, u12 = rng.uniform(size=3)
    t01 = invert_cumulative_hazard("01", draw, u01, params, spec, entry, cfg.bracket_cap, cfg.brent_xtol)
    t02 = invert_cumulative_hazard("02", draw, u02, params, spec, entry, cfg.bracket_cap, cfg.brent_xtol)
    t12 = None
    if t01 <= t02 and t01 <= end:
        t12 = invert_cumulative_hazard("12", draw, u12, params, spec, t01, cfg.bracket_cap, cfg.brent_xtol)
    # snap latent times onto values reachable from a float age, so that
    # datasets written in ages read back bit for bit
    t01, t02 = _age_representable(t01, ts), _age_representable(t02, ts)
    t12 = None if t12 is None else _age_representable(t12, ts)
    rec, kept = apply_observation_scheme(t01, t02, t12, visits, end, entry)
    blocks = tuple(spec.make_visit(t, y[j]) for j, t in enumerate(visits) if j < kept.size)
    return LatentSubject(SubjectData(subject_id, blocks, rec), draw, t01, t02, t12)


def generate_dataset(preset: ScenarioPreset, cfg: GeneratorConfig, n_subjects: int | None = None,
                     replicate: int = 0, latent: bool = False):
    n = preset.n_subjects if n_subjects is None else n_subjects
    cfg.check(preset)
    out = [
        generate_subject(preset, cfg, subject_rng(cfg.seed, replicate, i), f"r{replicate}s{i}")
        for i in range(n)
    ]
    return out if latent else [s.subject for s in out]


def with_zero_associations(preset: ScenarioPreset) -> ScenarioPreset:
    params = preset.params
    transitions = {kl: replace(tp, alpha=np.zeros(4)) for kl, tp in params.transitions.items()}
    return replace(preset, params=replace(params, transitions=transitions))
