"""Dataset-level likelihood under jax: values, per-subject scores, gradients.

Subjects are packed into fixed-shape chunks (padded visits, padded chunk
tail) so each compiled function is reused across parameter values. Subjects
whose likelihood needs the onset integral are kept in a separate group so
the 15x15 nested quadrature is only paid where it is used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial
from typing import Sequence

import jax
import jax.numpy as jnp
import numpy as np

from .likelihood import CaseTag, EvaluationError, classify_case, LOG_2PI
from .model import TRANSITIONS, ModelSpec, SubjectData, log_linear_predictor, log_baseline_hazard
from .qmc import QmcConfig, standard_normal_points
from .quadrature import GK15

jax.config.update("jax_enable_x64", True)

_X = jnp.asarray(GK15.nodes)
_W = jnp.asarray(GK15.weights)


@dataclass
class PackedGroup:
    """Column arrays for a group of subjects sharing one kernel layout."""

    ids: list[str]
    index: np.ndarray  # position of each subject in the original dataset
    arrays: dict[str, np.ndarray]
    with_integral: bool

    def __len__(self):
        return len(self.ids)


def pack_subjects(dataset: Sequence[SubjectData], spec: ModelSpec, max_visits: int | None = None):
    """Split a dataset into (no-integral, integral) packed groups."""
    j_max = max([len(s.visits) for s in dataset] + [1])
    if max_visits is not None:
        if max_visits < j_max:
            raise ValueError(f"max_visits={max_visits} but a subject has {j_max} visits")
        j_max = max_visits
    groups = {False: [], True: []}
    for i, s in enumerate(dataset):
        case = classify_case(s.event)
        needs = case in (CaseTag.INTERVAL_DEMENTIA, CaseTag.HEALTHY_LAST_VISIT_BEFORE_T)
        groups[needs].append(i)
    out = []
    for flag in (False, True):
        idx = groups[flag]
        if not idx:
            continue
        subjects = [dataset[i] for i in idx]
        out.append(PackedGroup([s.id for s in subjects], np.asarray(idx), _columns(subjects, spec, j_max), flag))
    return out


def _columns(subjects: Sequence[SubjectData], spec: ModelSpec, j_max: int) -> dict[str, np.ndarray]:
    n = len(subjects)
    cols = {
        "t_vis": np.zeros((n, j_max)),
        "n_meas": np.zeros((n, j_max)),
        "ybar": np.zeros((n, j_max)),
        "ss": np.zeros((n, j_max)),
        "long_cov": np.zeros((n, spec.n_long_covariates)),
        "T0": np.zeros(n),
        "L": np.zeros(n),
        "U": np.zeros(n),
        "T": np.zeros(n),
        "death": np.zeros(n),
        "direct": np.zeros(n),
        "onset": np.zeros(n),
        "exact": np.zeros(n),
    }
    for kl in TRANSITIONS:
        cols[f"W{kl}"] = np.zeros((n, spec.transitions[kl].n_covariates))
    for i, s in enumerate(subjects):
        for j, v in enumerate(s.visits):
            y = np.asarray(v.measurements, dtype=float)
            cols["t_vis"][i, j] = v.time
            cols["n_meas"][i, j] = y.size
            cols["ybar"][i, j] = y.mean()
            cols["ss"][i, j] = np.sum((y - y.mean()) ** 2)
        if spec.n_long_covariates:
            cols["long_cov"][i] = s.long_covariates
        ev = s.event
        case = classify_case(ev)
        cols["T0"][i], cols["L"][i], cols["T"][i] = ev.entry, ev.last_healthy, ev.terminal
        cols["death"][i] = float(ev.death)
        cols["U"][i] = ev.diagnosis if case is CaseTag.INTERVAL_DEMENTIA else ev.terminal
        cols["direct"][i] = case in (CaseTag.HEALTHY_AT_T, CaseTag.HEALTHY_LAST_VISIT_BEFORE_T)
        cols["onset"][i] = case in (CaseTag.INTERVAL_DEMENTIA, CaseTag.HEALTHY_LAST_VISIT_BEFORE_T)
        cols["exact"][i] = case is CaseTag.EXACT_DEMENTIA
        for kl in TRANSITIONS:
            cols[f"W{kl}"][i] = ev.covariate_row(kl)
    return cols


def _gk(a, b):
    half = 0.5 * (b - a)
    return a + half * (_X + 1.0), half * _W


def _subject_loglik(theta, z, row, spec: ModelSpec, with_integral: bool, longitudinal_only: bool = False,
                    conditional: bool = False):
    """Marginal QMC log-likelihood of one packed subject over the draws ``z``.

    With ``conditional`` the per-draw log f(Y, D | b, tau) is returned instead
    (no averaging and no delayed-entry correction).
    """
    p = spec.unpack(theta)
    q = spec.q
    n_poly = len(spec.fixed_powers)
    u = z @ p.chol.T
    b = u[:, :q]
    sigma = jnp.exp(p.mu_sigma + u[:, q])
    kappa = jnp.exp(p.mu_kappa + u[:, q + 1])
    cov_shift = row["long_cov"] @ p.beta[n_poly:] if spec.n_long_covariates else 0.0

    def traj(t):
        value = spec.fixed_design(t) @ p.beta[:n_poly] + cov_shift + b @ spec.random_design(t).T
        slope = spec.fixed_design_slope(t) @ p.beta[:n_poly] + b @ spec.random_design_slope(t).T
        return value, slope

    # longitudinal part
    mean, _ = traj(row["t_vis"])
    n = row["n_meas"]
    k2 = (kappa**2)[:, None]
    tot = k2 + n * (sigma**2)[:, None]
    rbar = row["ybar"] - mean
    ld = -0.5 * (n * LOG_2PI + (n - 1.0) * jnp.log(k2) + jnp.log(tot) + row["ss"] / k2 + n * rbar**2 / tot)
    long_ll = jnp.sum(jnp.where(n > 0, ld, 0.0), axis=1)
    if longitudinal_only:
        return long_ll if conditional else jax.nn.logsumexp(long_ll) - jnp.log(z.shape[0])

    def log_hazards(t, kls):
        value, slope = traj(t)
        out = []
        for kl in kls:
            tp = p.transitions[kl]
            lp = log_linear_predictor(tp, row[f"W{kl}"], value, slope, sigma[:, None], kappa[:, None])
            out.append(log_baseline_hazard(spec.transitions[kl], tp, t) + lp)
        return out

    T0, L, U, T, death = row["T0"], row["L"], row["U"], row["T"], row["death"]
    x0, w0 = _gk(0.0, T0)
    xT, wT = _gk(0.0, T)
    xL, wL = _gk(0.0, L)
    xLT, wLT = _gk(L, T)
    nodes0 = [x0, xT, xL, jnp.stack([T, L])]
    nodes12 = [xLT, T[None]]
    if with_integral:
        xu, wu = _gk(L, U)
        inner0, winner0 = _gk(L, xu[:, None])  # (15, 15)
        inner12, winner12 = _gk(xu[:, None], T)
        nodes0 += [xu, inner0.reshape(-1)]
        nodes12 += [inner12.reshape(-1)]
    t0 = jnp.concatenate(nodes0)
    t12 = jnp.concatenate(nodes12)
    lh01, lh02 = log_hazards(t0, ("01", "02"))
    (lh12,) = log_hazards(t12, ("12",))
    lam0 = jnp.exp(lh01) + jnp.exp(lh02)  # both 0-> transitions always appear summed
    lam12 = jnp.exp(lh12)

    cum0_T0 = lam0[:, 0:15] @ w0
    cum0_T = lam0[:, 15:30] @ wT
    cum0_L = lam0[:, 30:45] @ wL
    lh02_T, lh01_L = lh02[:, 45], lh01[:, 46]
    cum12_LT = lam12[:, 0:15] @ wLT
    lh12_T = lh12[:, 15]

    direct = -cum0_T + death * lh02_T
    exact = -cum0_L - cum12_LT + lh01_L + death * lh12_T
    terms = [jnp.where(row["direct"] > 0, direct, -jnp.inf), jnp.where(row["exact"] > 0, exact, -jnp.inf)]
    if with_integral:
        lh01_u = lh01[:, 47:62]
        cum_inner0 = jnp.sum(lam0[:, 62:].reshape(-1, 15, 15) * winner0, axis=-1)
        cum_inner12 = jnp.sum(lam12[:, 16:].reshape(-1, 15, 15) * winner12, axis=-1)
        logg = -(cum0_L[:, None] + cum_inner0) - cum_inner12 + lh01_u + death * lh12_T[:, None]
        onset = jax.nn.logsumexp(logg + jnp.log(wu), axis=1)
        terms.append(jnp.where(row["onset"] > 0, onset, -jnp.inf))
    log_event = jax.nn.logsumexp(jnp.stack(terms), axis=0)
    if conditional:
        return long_ll + log_event
    return jax.nn.logsumexp(long_ll + log_event) - jax.nn.logsumexp(-cum0_T0)


def _full_theta(theta, spec, longitudinal_only):
    if not longitudinal_only:
        return theta
    # survival entries are unused; ones keep the baseline evaluations finite
    return jnp.concatenate([theta, jnp.ones(spec.n_params - spec.n_longitudinal_params)])


@partial(jax.jit, static_argnums=(3, 4, 5))
def _chunk_values(theta, z, rows, spec, with_integral, longitudinal_only):
    full = _full_theta(theta, spec, longitudinal_only)
    return jax.vmap(lambda r: _subject_loglik(full, z, r, spec, with_integral, longitudinal_only))(rows)


@partial(jax.jit, static_argnums=(3, 4, 5))
def _chunk_scores(theta, z, rows, spec, with_integral, longitudinal_only):
    def f(th, r):
        return _subject_loglik(_full_theta(th, spec, longitudinal_only), z, r, spec, with_integral, longitudinal_only)

    return jax.vmap(lambda r: jax.value_and_grad(f)(theta, r))(rows)


class JointLikelihood:
    """QMC log-likelihood of a dataset as a function of the parameter vector.

    Args:
        dataset: subjects; per-subject contributions are returned in this order.
        spec: model structure (decides the parameter layout).
        cfg: QMC draws shared by every subject and by numerator and denominator.
        chunk: subjects per compiled kernel call.
        longitudinal_only: marker likelihood alone, as a function of the
            leading ``spec.n_longitudinal_params`` entries only.
    """

    def __init__(self, dataset: Sequence[SubjectData], spec: ModelSpec, cfg: QmcConfig,
                 chunk: int = 32, max_visits: int | None = None, longitudinal_only: bool = False):
        if not dataset:
            raise ValueError("empty dataset")
        if cfg.dimension != spec.q + 2:
            raise ValueError("QMC dimension must equal the number of random effects")
        self.spec = spec
        self.cfg = cfg
        self.n = len(dataset)
        self.ids = [s.id for s in dataset]
        self.z = jnp.asarray(standard_normal_points(cfg))
        self.chunk = chunk
        self.longitudinal_only = longitudinal_only
        self._chunks = []
        for g in pack_subjects(dataset, spec, max_visits):
            flag = g.with_integral and not longitudinal_only
            for start in range(0, len(g), chunk):
                sel = np.arange(start, min(start + chunk, len(g)))
                pad = np.concatenate([sel, np.full(chunk - sel.size, sel[0])])
                rows = {k: jnp.asarray(v[pad]) for k, v in g.arrays.items()}
                self._chunks.append((g.index[sel], sel.size, rows, flag))

    @property
    def n_params(self) -> int:
        return self.spec.n_longitudinal_params if self.longitudinal_only else self.spec.n_params

    def per_subject(self, theta) -> np.ndarray:
        theta = jnp.asarray(theta, dtype=float)
        out = np.empty(self.n)
        for idx, m, rows, flag in self._chunks:
            out[idx] = np.asarray(_chunk_values(theta, self.z, rows, self.spec, flag, self.longitudinal_only))[:m]
        self._check(out)
        return out

    def __call__(self, theta) -> float:
        return math.fsum(self.per_subject(theta))

    def scores(self, theta) -> tuple[np.ndarray, np.ndarray]:
        """Per-subject contributions and their gradients, shapes (n,) and (n, p)."""
        theta = jnp.asarray(theta, dtype=float)
        vals = np.empty(self.n)
        grads = np.empty((self.n, self.n_params))
        for idx, m, rows, flag in self._chunks:
            v, g = _chunk_scores(theta, self.z, rows, self.spec, flag, self.longitudinal_only)
            vals[idx] = np.asarray(v)[:m]
            grads[idx] = np.asarray(g)[:m]
        self._check(vals)
        if not np.all(np.isfinite(grads)):
            raise EvaluationError("nonfinite gradient")
        return vals, grads

    def gradient(self, theta) -> np.ndarray:
        _, g = self.scores(theta)
        return _ordered_sum(g)

    def _check(self, vals):
        bad = ~np.isfinite(vals)
        if bad.any():
            who = [self.ids[i] for i in np.flatnonzero(bad)[:5]]
            raise EvaluationError(f"nonfinite likelihood contribution for subjects {who}")


def _ordered_sum(g: np.ndarray) -> np.ndarray:
    return np.array([math.fsum(col) for col in g.T])
