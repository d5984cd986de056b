import math

import numpy as np
import pytest
from scipy.stats import kstest

from lsidm.model import ModelSpec, RandomEffects
from lsidm.simulation import (
    GeneratorConfig,
    SCHEDULE_COHORT,
    SCHEDULE_4Y,
    apply_observation_scheme,
    generate_dataset,
    generate_random_effects_and_marker,
    generate_subject_schedule,
    invert_cumulative_hazard,
    scenario_preset,
    subject_rng,
    with_zero_associations,
)

from conftest import constant_spec, make_params

ZERO4 = RandomEffects(np.zeros(2), 0.0, 0.0)


@pytest.fixture(scope="module")
def latent_a():
    return generate_dataset(scenario_preset("A"), GeneratorConfig(seed=21), n_subjects=2000, latent=True)


@pytest.fixture(scope="module")
def latent_b():
    return generate_dataset(scenario_preset("B"), GeneratorConfig(seed=21), n_subjects=2000, latent=True)


def test_presets():
    a, b, c = (scenario_preset(n) for n in "ABC")
    assert a.schedule == SCHEDULE_COHORT and b.schedule == SCHEDULE_4Y and c.schedule == SCHEDULE_COHORT
    assert a.params.transitions["01"].zeta == -4.0 and c.params.transitions["01"].zeta == -7.0
    np.testing.assert_array_equal(a.params.transitions["12"].alpha, b.params.transitions["12"].alpha)
    cov = a.params.chol @ a.params.chol.T
    np.testing.assert_allclose(cov[:2, :2], [[4.57, -1.86], [-1.86, 1.22]], atol=1e-12)
    assert np.all(cov[:2, 2:] == 0)
    with pytest.raises(ValueError):
        scenario_preset("D")
    zero = with_zero_associations(a)
    assert all(np.all(tp.alpha == 0) for tp in zero.params.transitions.values())


def test_schedule_without_jitter_is_exact():
    preset = scenario_preset("A")
    entry, ages = generate_subject_schedule(GeneratorConfig(jitter=0.0), preset, subject_rng(1, 0, 0))
    np.testing.assert_allclose(ages, entry + np.array((0.0,) + SCHEDULE_COHORT), atol=1e-12)
    assert 65.0 <= entry <= 85.0


def test_schedule_jitter_bounds():
    preset = scenario_preset("B")
    cfg = GeneratorConfig()
    for i in range(200):
        entry, ages = generate_subject_schedule(cfg, preset, subject_rng(2, 0, i))
        off = ages[1:] - entry - np.array(SCHEDULE_4Y)
        assert np.all(np.abs(off) <= cfg.jitter) and ages[0] == entry
    with pytest.raises(ValueError):
        GeneratorConfig(jitter=2.5).check(preset)


def test_entry_age_distribution_means():
    preset = scenario_preset("A")
    for shape, mean, n, tol in (((1.0, 1.0), 75.0, 100_000, 0.05), ((2.0, 5.0), 65 + 20 * 2 / 7, 4000, 0.25)):
        cfg = GeneratorConfig(entry_beta=shape)
        entries = [generate_subject_schedule(cfg, preset, subject_rng(3, 0, i))[0] for i in range(n)]
        assert np.mean(entries) == pytest.approx(mean, abs=tol)


def test_marker_within_visit_correlation_and_difference_variance():
    params = make_params(ModelSpec(), chol=np.zeros((4, 4)))
    t = np.zeros(40000)
    draw, y = generate_random_effects_and_marker(t, params, ModelSpec(), np.random.default_rng(4))
    sigma2, kappa2 = math.exp(0.6), math.exp(-0.46)
    icc = sigma2 / (sigma2 + kappa2)
    assert icc == pytest.approx(0.743, abs=5e-4)
    assert np.corrcoef(y[:, 0], y[:, 1])[0, 1] == pytest.approx(icc, abs=0.01)
    assert np.var(y[:, 0] - y[:, 1]) == pytest.approx(2 * kappa2, rel=0.03)
    assert y.mean() == pytest.approx(14.0, abs=0.03)


def test_inversion_exponential_closed_form():
    spec = constant_spec()
    params = make_params(spec, zeta=(math.log(0.5), -2.0, -2.0))
    u = 0.3
    t = invert_cumulative_hazard("01", ZERO4, u, params, spec, start=0.4)
    assert t == pytest.approx(0.4 - math.log(u) / 0.5, abs=1e-10)


def test_inversion_weibull_closed_form():
    preset = with_zero_associations(scenario_preset("A"))
    spec, params = preset.spec, preset.params
    tp = params.transitions["02"]
    eta = tp.sqrt_eta**2
    for u, s in ((0.5, 0.2), (0.9, 1.0), (0.05, 0.0)):
        t = invert_cumulative_hazard("02", ZERO4, u, params, spec, start=s)
        expected = (s**eta - math.log(u) * math.exp(-tp.zeta)) ** (1 / eta)
        assert t == pytest.approx(expected, rel=1e-8)  # GK-15 error of the non-polynomial t**(eta-1)


def test_inversion_unreachable_and_invalid():
    spec = constant_spec()
    params = make_params(spec, zeta=(-30.0, -2.0, -2.0))
    assert invert_cumulative_hazard("01", ZERO4, 0.5, params, spec) == math.inf
    with pytest.raises(ValueError):
        invert_cumulative_hazard("01", ZERO4, 1.0, params, spec)


VISITS = np.array([0.0, 0.2, 0.4, 0.7, 1.0])


@pytest.mark.parametrize(
    "t01, t02, t12, expected, n_kept",
    [
        (math.inf, math.inf, None, (1.0, None, False, 2.0, False), 5),
        (1.2, 0.5, None, (0.4, None, False, 0.5, True), 3),
        (0.3, 3.0, 5.0, (0.2, 0.4, True, 2.0, False), 5),
        (1.5, 3.0, 5.0, (1.0, None, False, 2.0, False), 5),
        (0.3, 3.0, 0.35, (0.2, None, False, 0.35, True), 2),
        (0.3, 3.0, 0.9, (0.2, 0.4, True, 0.9, True), 4),
        (0.3, 3.0, 1.0, (0.2, 0.4, True, 1.0, True), 4),
    ],
)
def test_observation_scheme_branches(t01, t02, t12, expected, n_kept):
    rec, kept = apply_observation_scheme(t01, t02, t12, VISITS, 2.0, 0.0)
    assert (rec.last_healthy, rec.diagnosis, rec.dem, rec.terminal, rec.death) == expected
    assert kept.size == n_kept


def test_observation_scheme_requires_illness_death_time():
    with pytest.raises(ValueError):
        apply_observation_scheme(0.3, 3.0, None, VISITS, 2.0, 0.0)


def test_zero_association_onset_times_follow_baseline():
    preset = with_zero_associations(scenario_preset("A"))
    tp = preset.params.transitions["01"]
    eta = tp.sqrt_eta**2
    subjects = generate_dataset(preset, GeneratorConfig(seed=13), n_subjects=5000, latent=True)
    # probability integral transform of T01 given entry
    u = [math.exp(-math.exp(tp.zeta) * (min(ls.t01, 10.0) ** eta - ls.subject.event.entry**eta))
         for ls in subjects]
    assert kstest(u, "uniform").statistic < 0.02


def test_generated_records_are_consistent(latent_a):
    for ls in latent_a:
        s, ev = ls.subject, ls.subject.event
        times = [v.time for v in s.visits]
        assert times[0] == ev.entry and np.all(np.diff(times) > 0)
        assert ev.entry <= ev.last_healthy <= ev.terminal
        if ev.dem:
            assert ev.last_healthy <= ls.t01 <= ev.diagnosis <= ev.terminal
        if ev.death:
            assert times[-1] < ev.terminal
        else:
            assert times[-1] <= ev.terminal
        assert all(np.all(np.isfinite(v.measurements)) and v.measurements.size == 2 for v in s.visits)


def test_sparser_schedule_misses_more_dementia(latent_a, latent_b):
    def undiagnosed(latent):
        return np.mean([ls.t12 is not None and ls.subject.event.death and not ls.subject.event.dem
                        for ls in latent])

    assert undiagnosed(latent_a) < undiagnosed(latent_b)


def test_generation_is_deterministic_and_counter_based():
    preset = scenario_preset("C")
    cfg = GeneratorConfig(seed=5)
    a = generate_dataset(preset, cfg, n_subjects=6, replicate=2)
    b = generate_dataset(preset, cfg, n_subjects=3, replicate=2)
    c = generate_dataset(preset, cfg, n_subjects=3, replicate=3)
    for x, y in zip(a, b):
        assert x.event == y.event and x.id == y.id
        assert all(np.array_equal(v.measurements, w.measurements) for v, w in zip(x.visits, y.visits))
    assert any(x.event != z.event for x, z in zip(b, c))
