import math

import numpy as np
import pytest

from bncde.data import Dataset, TreatmentEvent, dumps_record
from bncde.errors import ArgumentError
from bncde.simulator import (
    ALPHA_C,
    ALPHA_R,
    OBS_WINDOW,
    RHO,
    SimConfig,
    TumorParams,
    generate_dataset,
    observation_probability,
    observation_times,
    sample_params,
    simulate_outcome,
    sphere_diameter,
    sphere_volume,
    treatment_schedule,
)


@pytest.fixture(scope="module")
def small_dataset():
    return generate_dataset(SimConfig(n_train=40, n_val=10, n_test=15, seed=3))


# parameters


def test_parameter_constants_match_sampling_table():
    assert RHO == (7.00e-5, 7.23e-3)
    assert ALPHA_R == (0.0398, 0.168)
    assert ALPHA_C == (0.028, 7.00e-4)


def test_k_is_constant_and_beta_ratio():
    rng = np.random.default_rng(0)
    for sg in (0, 1, 2):
        for _ in range(50):
            p = sample_params(rng, sg)
            assert p.K == 30.0
            assert p.beta_r == 10 * p.alpha_r
            assert p.subgroup == sg and p.y0 > 0


def test_unknown_subgroup():
    with pytest.raises(ArgumentError):
        sample_params(np.random.default_rng(0), 3)


def _draws(subgroup, n=100_000, seed=0):
    rng = np.random.default_rng(seed)
    ps = [sample_params(rng, subgroup, y0=1.0) for _ in range(n)]
    return (np.array([p.rho for p in ps]), np.array([p.alpha_r for p in ps]), np.array([p.alpha_c for p in ps]))


@pytest.mark.parametrize("subgroup", [0, 1, 2])
def test_parameter_means_within_three_standard_errors(subgroup):
    n = 100_000
    rho, a_r, a_c = _draws(subgroup, n, seed=subgroup)
    mu_r = 0.0398 * (1.1 if subgroup == 1 else 1.0)
    mu_c = 0.028 * (1.1 if subgroup == 2 else 1.0)
    if subgroup == 1:
        assert mu_r == pytest.approx(0.04378, abs=1e-12)
    for x, (mean, var) in ((rho, RHO), (a_r, (mu_r, ALPHA_R[1])), (a_c, (mu_c, ALPHA_C[1]))):
        se = math.sqrt(var / n)
        assert abs(x.mean() - mean) < 3 * se
        # the variance column is a variance, not a standard deviation
        assert x.var() == pytest.approx(var, rel=0.02)


def test_rejection_keeps_kills_non_negative():
    rng = np.random.default_rng(1)
    ps = [sample_params(rng, 0, reject_negative_kill=True, y0=1.0) for _ in range(2000)]
    assert all(p.alpha_r >= 0 and p.alpha_c >= 0 for p in ps)


def test_initial_volumes_within_stage_bounds():
    rng = np.random.default_rng(2)
    d = sphere_diameter([sample_params(rng, 0).y0 for _ in range(2000)])
    assert np.all(d >= 0.3 - 1e-9) and np.all(d <= 13.0 + 1e-9)


def test_sphere_conversion_roundtrip():
    d = np.array([0.5, 1.0, 6.5, 13.0])
    np.testing.assert_allclose(sphere_diameter(sphere_volume(d)), d, rtol=1e-14)
    assert sphere_volume(1.0) == pytest.approx(math.pi / 6)


# schedules


def test_sequential_schedule():
    ev = treatment_schedule("sequential")
    assert ev[0] == TreatmentEvent(0.0, "chemo")
    assert [e.time for e in ev if e.kind == "chemo"] == [0, 7, 14, 21, 28]
    assert [e.time for e in ev if e.kind == "radio"] == [35, 42, 49]


def test_concurrent_schedule():
    ev = treatment_schedule("concurrent")
    chemo = [e.time for e in ev if e.kind == "chemo"]
    radio = [e.time for e in ev if e.kind == "radio"]
    assert chemo == radio == [0, 14, 28, 42]


@pytest.mark.parametrize("arm", ["sequential", "concurrent"])
def test_schedules_within_window(arm):
    assert all(0 <= e.time <= OBS_WINDOW for e in treatment_schedule(arm))


def test_unknown_arm():
    with pytest.raises(ArgumentError):
        treatment_schedule("none")


# outcome dynamics


def _params(**kw):
    base = dict(rho=0.0, K=30.0, alpha_c=0.0, alpha_r=0.0, beta_r=0.0, subgroup=0, y0=1.0)
    base.update(kw)
    return TumorParams(**base)


def test_exponential_growth_without_treatment():
    path = simulate_outcome(_params(), [], 0, h_sim=0.01, horizon=1.0, noise_var=0.0)
    assert path.volume[-1] == pytest.approx(math.e, rel=0.01)
    assert path.volume[-1] == pytest.approx(1.01**100, rel=1e-12)


def test_bracket_is_one_at_carrying_capacity():
    p = _params(rho=0.5, y0=30.0)
    path = simulate_outcome(p, [], 0, h_sim=0.05, horizon=1.0, noise_var=0.0)
    assert path.volume[1] == pytest.approx(30.0 * (1 + 0.05), rel=1e-14)


def test_zero_kill_rates_ignore_treatments():
    p = _params(rho=0.02)
    a = simulate_outcome(p, treatment_schedule("sequential"), 11, horizon=20.0)
    b = simulate_outcome(p, treatment_schedule("concurrent"), 11, horizon=20.0)
    c = simulate_outcome(p, [], 11, horizon=20.0)
    np.testing.assert_array_equal(a.volume, b.volume)
    np.testing.assert_array_equal(a.volume, c.volume)


def test_twins_with_identical_schedules_are_bitwise_equal():
    p = sample_params(np.random.default_rng(4), 1)
    s = treatment_schedule("concurrent")
    a = simulate_outcome(p, s, 123, volume_cap=1000.0)
    b = simulate_outcome(p, list(s), 123, volume_cap=1000.0)
    np.testing.assert_array_equal(a.volume, b.volume)


def test_treatment_reduces_volume():
    p = _params(rho=0.01, alpha_c=0.3, alpha_r=0.05, beta_r=0.5, y0=5.0)
    treated = simulate_outcome(p, treatment_schedule("concurrent"), 0, noise_var=0.0, growth_offset=0.0)
    untreated = simulate_outcome(p, [], 0, noise_var=0.0, growth_offset=0.0)
    assert treated.at_day(30) < untreated.at_day(30)


def test_volume_floor_and_cap():
    p = _params(alpha_r=2.0, beta_r=20.0, y0=0.01)
    path = simulate_outcome(p, treatment_schedule("concurrent"), 0, noise_var=0.0, growth_offset=0.0)
    assert path.volume.min() == 1e-3
    grow = simulate_outcome(_params(y0=1.0), [], 0, volume_cap=50.0, noise_var=0.0)
    assert grow.volume.max() == 50.0


def test_outcome_argument_errors():
    with pytest.raises(ArgumentError):
        simulate_outcome(_params(y0=0.0), [], 0)
    with pytest.raises(ArgumentError):
        simulate_outcome(_params(), [], 0, h_sim=0.3)


def test_daily_sampling():
    path = simulate_outcome(_params(rho=0.01), [], 5, h_sim=0.05, horizon=10.0)
    assert path.daily().size == 11
    assert path.at_day(3) == path.volume[60]


# observation process


def test_observation_probability_examples():
    assert observation_probability(6.5, 1.0) == 0.5
    assert observation_probability(6.5, 7.3) == 0.5
    np.testing.assert_array_equal(observation_probability(np.array([0.1, 6.5, 13.0]), 0.0), 0.5)
    assert observation_probability(13.0, 2.0) == pytest.approx(1 / (1 + math.exp(-1.0)))


def test_observation_times_structure():
    rng = np.random.default_rng(0)
    vol = np.full(OBS_WINDOW + 6, sphere_volume(4.0))
    for _ in range(20):
        t = observation_times(vol, 1.0, rng)
        assert t[0] == 0.0 and np.all(np.diff(t) > 0) and t[-1] <= OBS_WINDOW
        assert np.all(t == np.round(t))
    with pytest.raises(ArgumentError):
        observation_times(vol, -1.0, rng)


def test_gamma_zero_accepts_half_the_days():
    rng = np.random.default_rng(1)
    vol = np.full(OBS_WINDOW + 1, sphere_volume(2.0))
    n = np.mean([observation_times(vol, 0.0, rng).size - 1 for _ in range(4000)])
    se = math.sqrt(OBS_WINDOW * 0.25 / 4000)
    assert abs(n - OBS_WINDOW * 0.5) < 3 * se


def test_larger_gamma_observes_small_tumours_less():
    vol = np.full(OBS_WINDOW + 1, sphere_volume(3.0))
    rng = np.random.default_rng(2)
    n1 = np.mean([observation_times(vol, 1.0, rng).size for _ in range(2000)])
    n2 = np.mean([observation_times(vol, 2.0, rng).size for _ in range(2000)])
    assert n2 < n1


def test_trailing_window_mean_diameter():
    # small tumour for days 0..29 then 13 cm: day 30 averages the diameters of days 16..30
    vol = np.concatenate([np.full(30, 1e-3), np.full(OBS_WINDOW - 29, sphere_volume(13.0))])
    dbar = sphere_diameter(vol[16:31]).mean()
    u = np.full(OBS_WINDOW, 0.5)
    u[29] = observation_probability(dbar, 1.0) - 1e-9
    t = observation_times(vol, 1.0, uniforms=u)
    assert 30.0 in t
    u[29] = observation_probability(dbar, 1.0) + 1e-9
    assert 30.0 not in observation_times(vol, 1.0, uniforms=u)


# datasets


def test_dataset_shapes(small_dataset):
    ds = small_dataset
    assert len(ds.train) == 40 and len(ds.val) == 10 and len(ds.test) == 15
    for r in ds.test:
        assert r.counterfactual is not None
        assert r.counterfactual.arm != r.factual.arm
        assert r.counterfactual.y[0] == r.factual.y[0]
    assert all(r.counterfactual is None for r in ds.train + ds.val)
    for r in ds.train:
        assert np.all(r.factual.y > 0)
        assert r.factual.obs_times[0] == 0 and r.factual.obs_times[-1] <= OBS_WINDOW
        assert sorted(r.factual.targets) == [1, 2, 3, 4, 5]


def test_standardized_training_outcomes(small_dataset):
    ds = small_dataset
    y = np.concatenate([ds.standardizer.y(r.factual.y) for r in ds.train])
    assert abs(y.mean()) < 1e-6
    assert y.std() == pytest.approx(1.0, rel=1e-12)
    c = np.concatenate([ds.standardizer.counts(r.factual.counts) for r in ds.train])
    assert np.all(np.abs(c.mean(axis=0)) < 1e-9)


def test_same_seed_gives_identical_files(tmp_path, small_dataset):
    again = generate_dataset(SimConfig(n_train=40, n_val=10, n_test=15, seed=3))
    small_dataset.save(tmp_path / "a")
    again.save(tmp_path / "b")
    for name in ("train.jsonl", "val.jsonl", "test.jsonl", "standardization.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    loaded = Dataset.load(tmp_path / "a")
    assert [dumps_record(r) for r in loaded.test] == [dumps_record(r) for r in small_dataset.test]
    assert loaded.standardizer == small_dataset.standardizer


def test_parallel_generation_matches_serial(small_dataset):
    par = generate_dataset(SimConfig(n_train=40, n_val=10, n_test=15, seed=3, threads=2))
    for split in ("train", "val", "test"):
        assert [dumps_record(r) for r in getattr(par, split)] == [dumps_record(r) for r in getattr(small_dataset, split)]


def test_different_seeds_differ(small_dataset):
    other = generate_dataset(SimConfig(n_train=40, n_val=10, n_test=15, seed=4))
    assert dumps_record(other.train[0]) != dumps_record(small_dataset.train[0])


def test_config_validation():
    with pytest.raises(ArgumentError):
        SimConfig(n_train=0)
    with pytest.raises(ArgumentError):
        SimConfig(gamma=-1)
