import math

import numpy as np
import pytest
from scipy.linalg import block_diag
from scipy.optimize import minimize

from lsidm.estimation import (
    PipelineConfig,
    fit_model,
    fit_pipeline,
    joint_start,
    longitudinal_start,
    naive_dataset_transform,
    survival_start,
)
from lsidm.kernel import JointLikelihood
from lsidm.model import ModelSpec, assemble_covariance
from lsidm.optim import OptimizerConfig
from lsidm.qmc import QmcConfig
from lsidm.simulation import GeneratorConfig, generate_dataset, scenario_preset

from conftest import constant_spec, dense_mvn_logpdf, make_subject, record


@pytest.fixture(scope="module")
def small_a():
    preset = scenario_preset("A")
    return preset, generate_dataset(preset, GeneratorConfig(seed=3), n_subjects=40)


def test_pipeline_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(S1=10, S2=5)
    with pytest.raises(ValueError):
        PipelineConfig(curvature="newton")


def test_naive_transform_examples():
    spec = ModelSpec()
    visits = [(0.1, [14.0])]
    dem = make_subject(spec, visits, record(0.1, 0.6, 0.8, True, 1.0, False), "a")
    dead = make_subject(spec, visits, record(0.1, 0.6, None, False, 0.9, True), "b")
    cens = make_subject(spec, visits, record(0.1, 0.6, None, False, 0.9, False), "c")
    a, b, c = naive_dataset_transform([dem, dead, cens])
    assert (a.event.last_healthy, a.event.diagnosis) == (pytest.approx(0.7), pytest.approx(0.7))
    assert a.event.dem and a.event.terminal == 1.0
    assert b.event.last_healthy == 0.9 and b.event.death and not b.event.dem
    assert c.event == cens.event
    assert a.visits == dem.visits


def test_naive_transform_is_idempotent(small_a):
    _, data = small_a
    once = naive_dataset_transform(data)
    twice = naive_dataset_transform(once)
    assert [s.event for s in once] == [s.event for s in twice]


def test_naive_and_interval_likelihoods_agree_on_exact_onsets(small_a):
    preset, data = small_a
    exact = naive_dataset_transform(data)
    theta = preset.spec.pack(preset.params)
    cfg = QmcConfig(32, 4)
    a = JointLikelihood(exact, preset.spec, cfg)(theta)
    b = JointLikelihood(naive_dataset_transform(exact), preset.spec, cfg)(theta)
    assert a == b


def test_longitudinal_start_recovers_noiseless_line():
    spec = ModelSpec()
    ev = record(0.0, 2.0, None, False, 2.0, False)
    data = [make_subject(spec, [(t, [3.0 + 0.5 * t, 3.0 + 0.5 * t + 1e-3]) for t in (0.0, 0.5, 1.0, 1.5)], ev, str(i))
            for i in range(5)]
    theta = longitudinal_start(data, spec)
    assert theta.size == spec.n_longitudinal_params
    np.testing.assert_allclose(theta[:2], [3.0, 0.5], atol=1e-3)
    assert np.all(np.isfinite(theta))


def test_survival_start_matches_counts_for_exponential_baselines():
    spec = constant_spec()
    v = [(0.0, [1.0])]
    data = [
        make_subject(spec, v, record(0.0, 1.0, 2.0, True, 3.0, True), "a"),   # naive onset 1.5
        make_subject(spec, v, record(0.0, 1.0, None, False, 2.0, True), "b"),
        make_subject(spec, v, record(0.0, 1.0, None, False, 4.0, False), "c"),
    ]
    start = survival_start(data, spec)
    # 0->1: one event over 1.5 + 2 + 4; 0->2: one event; 1->2: one event over 1.5
    assert start["01"] == (None, pytest.approx(math.log(1 / 7.5)))
    assert start["02"] == (None, pytest.approx(math.log(1 / 7.5)))
    assert start["12"] == (None, pytest.approx(math.log(1 / 1.5)))
    theta = joint_start(data, spec, longitudinal_start(data, spec))
    assert theta.size == spec.n_params


def _gaussian_oracle_fit(data, spec):
    """Exact marginal Gaussian likelihood of the marker model with a random intercept and slope."""
    n_long = spec.n_longitudinal_params

    def negll(th):
        full = np.concatenate([th, np.ones(spec.n_params - n_long)])
        p = spec.unpack(full)
        cov_b = np.asarray(assemble_covariance(p.chol))[: spec.q, : spec.q]
        sigma, kappa = math.exp(p.mu_sigma), math.exp(p.mu_kappa)
        total = 0.0
        for s in data:
            y = np.concatenate([v.measurements for v in s.visits])
            X = np.vstack([np.repeat(v.fixed_design[None], v.measurements.size, 0) for v in s.visits])
            Z = np.vstack([np.repeat(v.random_design[None], v.measurements.size, 0) for v in s.visits])
            blocks = block_diag(*[np.ones((v.measurements.size,) * 2) for v in s.visits])
            cov = Z @ cov_b @ Z.T + sigma**2 * blocks + kappa**2 * np.eye(y.size)
            total += dense_mvn_logpdf(y, X @ p.beta, cov)
        return -total

    th0 = longitudinal_start(data, spec)
    res = minimize(negll, th0, method="BFGS", options={"gtol": 1e-7})
    return res.x, -res.fun


def test_longitudinal_step_matches_exact_gaussian_oracle():
    preset = scenario_preset("A")
    spec = ModelSpec(random_scales=False)
    data = generate_dataset(preset, GeneratorConfig(seed=8), n_subjects=40)
    oracle, oracle_ll = _gaussian_oracle_fit(data, spec)
    fit = fit_model(data, spec, longitudinal_start(data, spec), 2000, longitudinal_only=True)
    assert fit.converged
    assert fit.loglik == pytest.approx(oracle_ll, abs=0.05)
    # signs of the Cholesky factor columns are not identified
    names = spec.param_names()[: spec.n_longitudinal_params]
    chol_cols = [k for k, n in enumerate(names) if n.startswith("chol")]
    got, ref = fit.theta.copy(), oracle.copy()
    got[chol_cols], ref[chol_cols] = np.abs(got[chol_cols]), np.abs(ref[chol_cols])
    np.testing.assert_allclose(got, ref, atol=0.03)


def test_refit_with_same_draws_is_a_noop(small_a):
    preset, data = small_a
    spec = preset.spec
    first = fit_model(data, spec, longitudinal_start(data, spec), 64, longitudinal_only=True)
    assert first.converged
    again = fit_model(data, spec, first.theta, 64, longitudinal_only=True)
    assert again.converged and again.iterations <= 1
    np.testing.assert_allclose(again.theta, first.theta, atol=1e-6)
    assert again.loglik == pytest.approx(first.loglik, abs=1e-8)


def test_pipeline_runs_all_steps(small_a):
    preset, data = small_a
    cfg = PipelineConfig(S1=16, S2=24, curvature="bhhh")
    res = fit_pipeline(data[:20], preset.spec, cfg, OptimizerConfig(max_iterations=5))
    assert res.failed_step is None
    assert list(res.steps) == ["longitudinal", "naive", "estimation", "precision"]
    assert res.final.S_used == 24 and res.final.step == "precision"
    assert res.final.hessian_pd is not None


def test_pipeline_longitudinal_only(small_a):
    preset, data = small_a
    cfg = PipelineConfig(S1=16, S2=16, longitudinal_only=True, curvature="bhhh")
    res = fit_pipeline(data[:15], preset.spec, cfg, OptimizerConfig(max_iterations=3))
    assert list(res.steps) == ["longitudinal"]
    assert res.final.theta.size == preset.spec.n_longitudinal_params


def test_pipeline_reports_failing_step(small_a):
    preset, data = small_a
    spec = preset.spec
    theta = spec.pack(preset.params)
    theta[spec.param_names().index("zeta_01")] = 900.0
    cfg = PipelineConfig(S1=8, S2=8, run_step1=False)
    res = fit_pipeline(data[:10], spec, cfg, theta0=theta)
    assert res.failed_step == 2 and res.error
    with pytest.raises(ValueError):
        fit_pipeline([], spec)
