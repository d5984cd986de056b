import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lsidm.model import (
    ModelSpec,
    RandomEffectsDistribution,
    TimeScale,
    TransitionParams,
    TransitionSpec,
    EventRecord,
    SubjectData,
    assemble_covariance,
    baseline_hazard,
    independence_mask,
    log_transition_hazard,
    residual_scales,
    trajectory,
    transition_hazard,
)
from lsidm.simulation import application_chol, scenario_preset

finite = st.floats(-3, 3, allow_nan=False)


def test_time_scale_transform():
    ts = TimeScale()
    assert ts.transform(72.5) == pytest.approx(0.75)
    assert ts.inverse(ts.transform(81.0)) == pytest.approx(81.0)
    with pytest.raises(ValueError):
        TimeScale(divisor=0)


def test_trajectory_examples():
    v, s = trajectory(0.0, [14.0, 0.17], [0.0, 0.0])
    assert (v, s) == (pytest.approx(14.0), pytest.approx(0.17))
    v, s = trajectory(2.3, [0.0, 0.0], [0.0, 0.0])
    assert v == 0 and s == 0
    v, s = trajectory(1.5, [1.0, 2.0], [0.5, -1.0])
    assert v == pytest.approx(3.0) and s == pytest.approx(1.0)


def test_trajectory_dimension_mismatch():
    with pytest.raises(ValueError):
        trajectory(1.0, [1.0, 2.0, 3.0], [0.0, 0.0])
    with pytest.raises(ValueError):
        trajectory(1.0, [1.0, 2.0], [0.0])


def test_trajectory_stacked_draws():
    b = np.array([[0.0, 0.0], [1.0, -1.0]])
    v, s = trajectory(np.array([0.0, 2.0]), [1.0, 1.0], b)
    assert v.shape == (2, 2)
    np.testing.assert_allclose(v[0], [1.0, 3.0])
    np.testing.assert_allclose(v[1], [2.0, 2.0])
    np.testing.assert_allclose(s[1], [0.0, 0.0])


@given(t=finite, h=st.floats(1e-3, 1.0), b0=finite, b1=finite)
def test_trajectory_slope_matches_central_difference(t, h, b0, b1):
    beta = [14.0, 0.17]
    up, _ = trajectory(t + h, beta, [b0, b1])
    dn, _ = trajectory(t - h, beta, [b0, b1])
    _, slope = trajectory(t, beta, [b0, b1])
    assert (up - dn) / (2 * h) == pytest.approx(slope, abs=1e-9)


def test_quadratic_design_slope():
    spec = ModelSpec(fixed_powers=(0, 1, 2), random_powers=(0,))
    v, s = trajectory(2.0, [1.0, 0.5, 0.25], [0.3], spec)
    assert v == pytest.approx(1.0 + 1.0 + 1.0 + 0.3)
    assert s == pytest.approx(0.5 + 2 * 0.25 * 2.0)


def test_residual_scales_examples():
    assert residual_scales(0.0, 0.0, 0.0, 0.0) == (1.0, 1.0)
    s, k = residual_scales(0.30, -0.23, 0.0, 0.0)
    assert s == pytest.approx(1.3498588075760032, rel=1e-14)
    assert k == pytest.approx(0.7945336025033340, rel=1e-14)


@given(a=finite, b=finite, d=st.floats(1e-3, 1.0))
def test_residual_scales_positive_and_increasing(a, b, d):
    s0, k0 = residual_scales(a, b, 0.1, -0.1)
    s1, _ = residual_scales(a + d, b, 0.1, -0.1)
    _, k1 = residual_scales(a, b, 0.1, -0.1 + d)
    assert s0 > 0 and k0 > 0 and s1 > s0 and k1 > k0


def test_baseline_hazard_examples():
    w = TransitionSpec("weibull")
    assert baseline_hazard(w, TransitionParams((), np.zeros(4), -4.0, 2.0), 1.0) == pytest.approx(4 * math.exp(-4))
    assert baseline_hazard(w, TransitionParams((), np.zeros(4), 0.0, 1.0), 3.7) == pytest.approx(1.0)
    e = TransitionSpec("exponential")
    assert baseline_hazard(e, TransitionParams((), np.zeros(4), -2.0), 5.0) == pytest.approx(math.exp(-2))


def test_baseline_hazard_singular_shape():
    w = TransitionSpec("weibull")
    with pytest.raises(ValueError):
        baseline_hazard(w, TransitionParams((), np.zeros(4), 0.0, 0.8), 0.0)


def test_unknown_baseline_family():
    with pytest.raises(ValueError):
        TransitionSpec("spline")


def test_transition_hazard_examples():
    ts = TransitionSpec()
    tp0 = TransitionParams(np.zeros(0), np.zeros(4), -4.0, 2.0)
    base = baseline_hazard(ts, tp0, 1.2)
    assert transition_hazard(ts, tp0, 1.2, (), 3.0, 0.5, 1.1, 0.9) == pytest.approx(base)
    sigma = math.exp(0.3)
    tp = TransitionParams(np.zeros(0), np.array([0, 0, 0.5, 0]), -4.0, 2.0)
    assert transition_hazard(ts, tp, 1.2, (), 3.0, 0.5, sigma, 0.9) == pytest.approx(base * math.exp(0.5 * 1.3499), rel=1e-4)
    tsw = TransitionSpec(n_covariates=1)
    tpw = TransitionParams(np.array([0.7]), np.zeros(4), -4.0, 2.0)
    h1 = transition_hazard(tsw, tpw, 1.2, [1.0], 0, 0, 1, 1)
    h2 = transition_hazard(tsw, tpw, 1.2, [2.0], 0, 0, 1, 1)
    assert h2 / h1 == pytest.approx(math.exp(0.7), rel=1e-14)


@given(t=st.floats(0.01, 4), coef=finite, val=finite, x=finite, c=st.floats(0.1, 2))
def test_log_hazard_linear_in_each_coefficient(t, coef, val, x, c):
    ts = TransitionSpec()
    for k in range(4):
        def lh(a):
            alpha = np.zeros(4)
            alpha[k] = a
            tp = TransitionParams(np.zeros(0), alpha, -1.0, 1.5)
            return log_transition_hazard(ts, tp, t, (), val, x, c, c + 0.5)
        mult = (val, x, c, c + 0.5)[k]
        assert lh(coef) - lh(0.0) == pytest.approx(coef * mult, abs=1e-9)
        assert transition_hazard(ts, TransitionParams(np.zeros(0), np.eye(4)[k] * coef, -1.0, 1.5),
                                 t, (), val, x, c, c + 0.5) >= 0


def test_assemble_covariance_examples():
    np.testing.assert_array_equal(assemble_covariance(np.eye(3)), np.eye(3))
    np.testing.assert_array_equal(assemble_covariance(np.diag([2.0, 3.0])), np.diag([4.0, 9.0]))
    full = np.tril(np.arange(1.0, 17.0).reshape(4, 4))
    cov = assemble_covariance(full, independence_mask(2))
    assert np.all(cov[:2, 2:] == 0.0) and np.all(cov[2:, :2] == 0.0)


@settings(max_examples=50)
@given(st.lists(st.floats(-5, 5), min_size=10, max_size=10))
def test_assembled_covariance_symmetric_psd(entries):
    L = np.zeros((4, 4))
    L[np.tril_indices(4)] = entries
    cov = assemble_covariance(L)
    np.testing.assert_array_equal(cov, cov.T)
    assert np.linalg.eigvalsh(cov).min() >= -1e-10 * max(1.0, np.abs(cov).max())


def test_random_effects_distribution_blocks():
    dist = RandomEffectsDistribution(application_chol(), independence_mask(2))
    sb, sbt, st_ = dist.blocks(2)
    np.testing.assert_allclose(sb, [[4.57, -1.86], [-1.86, 1.22]], atol=1e-12)
    np.testing.assert_allclose(st_, [[0.07, 0.01], [0.01, 0.07]], atol=1e-12)
    assert np.all(sbt == 0)


def test_pack_unpack_round_trip():
    preset = scenario_preset("A")
    spec = preset.spec
    theta = spec.pack(preset.params)
    assert theta.size == spec.n_params == len(spec.param_names())
    again = spec.pack(spec.unpack(theta))
    np.testing.assert_array_equal(theta, again)
    with pytest.raises(ValueError):
        spec.unpack(theta[:-1])


def test_free_parameter_counts():
    assert ModelSpec().n_params == 2 + 2 + 10 + 3 * 6
    assert ModelSpec(independent_b_tau=True).n_longitudinal_params == 2 + 2 + 6
    assert ModelSpec(random_scales=False).n_longitudinal_params == 2 + 2 + 3
    assoc = {kl: TransitionSpec("exponential", 2, (True, False, False, False)) for kl in ("01", "02", "12")}
    assert ModelSpec(transitions=assoc).n_params == 14 + 3 * 4


def test_event_record_invariants():
    EventRecord(0.5, 0.7, 0.9, True, 1.2, False)
    with pytest.raises(ValueError):
        EventRecord(0.5, 0.4, None, False, 1.0, False)
    with pytest.raises(ValueError):
        EventRecord(0.5, 0.7, None, True, 1.0, False)
    with pytest.raises(ValueError):
        EventRecord(0.5, 0.7, 0.6, True, 1.0, False)
    with pytest.raises(ValueError):
        EventRecord(0.5, 0.7, 0.8, False, 1.0, False)


def test_subject_visit_invariants():
    spec = ModelSpec()
    ev = EventRecord(0.0, 0.5, None, False, 1.0, False)
    with pytest.raises(ValueError):
        SubjectData("x", (spec.make_visit(0.4, [1.0]), spec.make_visit(0.2, [1.0])), ev)
    with pytest.raises(ValueError):
        SubjectData("x", (spec.make_visit(1.5, [1.0]),), ev)
    with pytest.raises(ValueError):
        spec.make_visit(0.1, [])
