import mpmath
import numpy as np
import pytest
from scipy.stats import multivariate_normal

from lsidm.model import (
    EventRecord,
    ModelSpec,
    ParameterSet,
    SubjectData,
    TransitionParams,
    TransitionSpec,
    TRANSITIONS,
)


def dense_mvn_logpdf(y, mean, cov):
    return multivariate_normal(mean=mean, cov=cov).logpdf(y)


def dense_mvn_logpdf_exact(y, mean, cov, digits=40):
    """Dense Gaussian log-density in extended precision (reference for ill-conditioned blocks)."""
    with mpmath.workdps(digits):
        C = mpmath.matrix([[mpmath.mpf(float(c)) for c in row] for row in np.atleast_2d(cov)])
        r = mpmath.matrix([mpmath.mpf(float(a)) - mpmath.mpf(float(m)) for a, m in zip(y, mean)])
        quad = (r.T * mpmath.lu_solve(C, r))[0]
        value = -0.5 * (len(y) * mpmath.log(2 * mpmath.pi) + mpmath.log(mpmath.det(C)) + quad)
        return float(value)


def constant_spec(associations=(False, False, False, False), **kw):
    """Exponential baselines; with no associations every hazard is constant."""
    return ModelSpec(transitions={kl: TransitionSpec("exponential", 0, associations) for kl in TRANSITIONS}, **kw)


def make_params(spec: ModelSpec, beta=(14.0, 0.17), mu=(0.3, -0.23), chol=None, alpha=None,
                zeta=(-4.0, -2.5, -2.2), sqrt_eta=(2.0, 1.7, 1.7)) -> ParameterSet:
    d = spec.q + 2
    chol = np.zeros((d, d)) if chol is None else np.asarray(chol, dtype=float)
    transitions = {}
    for k, kl in enumerate(TRANSITIONS):
        ts = spec.transitions[kl]
        a = np.zeros(4) if alpha is None else np.asarray(alpha[k], dtype=float)
        a = np.where(ts.associations, a, 0.0)
        se = sqrt_eta[k] if ts.baseline == "weibull" else None
        transitions[kl] = TransitionParams(np.zeros(ts.n_covariates), a, zeta[k], se)
    return ParameterSet(np.asarray(beta, dtype=float), mu[0], mu[1], chol, transitions)


def make_subject(spec, visits, event, sid="s"):
    """visits: list of (time, [measurements])."""
    return SubjectData(sid, tuple(spec.make_visit(t, y) for t, y in visits), event)


def record(entry, L, R, dem, T, death):
    return EventRecord(entry, L, R, dem, T, death)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
