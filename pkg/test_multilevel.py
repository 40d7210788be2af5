#!/usr/bin/env python3
"""Tests for sample allocation, coupled ensembles and the multilevel estimators."""

import math

import numpy as np
import pytest
from scipy import stats

from mlkbf.core.enkbf import FilterNoise, Variant, draw_initial_ensemble, enkbf_run, ensemble_mean
from mlkbf.core.errors import AllocationTooSmall, TooFewParticles
from mlkbf.core.model import build_linear_model, ou1_family, ou5_family
from mlkbf.core.multilevel import (
    LevelTerm,
    MLConfig,
    MLEstimate,
    coupled_run,
    ml_filter_estimate,
    ml_level_term,
    ml_log_nc,
    sample_allocation,
)
from mlkbf.core.paths import Branch, IncrementPath, Level, SeedSpec, Stream, coupled_brownian, simulate_truth_and_obs
from mlkbf.harness.rates import coupled_variance_study


@pytest.fixture(scope="module")
def ou5_setup():
    family = ou5_family(c_seed=1)
    model = family(family.default_theta)
    _, obs = simulate_truth_and_obs(model, 8, 1, SeedSpec(1, branch=Branch.DATA))
    return model, obs


def test_sample_allocation_values():
    assert sample_allocation(1.0, 8, 10) == [12288, 6144, 3072]
    assert sample_allocation(0.01, 8, 10) == [122, 61, 30]
    assert sample_allocation(0.5, 4, 4) == [8]


def test_sample_allocation_halves_per_level():
    allocation = sample_allocation(0.3, 2, 7)
    for coarse, fine in zip(allocation, allocation[1:]):
        assert coarse // 2 <= fine + 1 and fine <= coarse // 2 + 1


def test_sample_allocation_rejects_bad_inputs():
    with pytest.raises(AllocationTooSmall):
        sample_allocation(1e-6, 3, 5)
    with pytest.raises(ValueError):
        sample_allocation(0.0, 3, 5)
    with pytest.raises(ValueError):
        sample_allocation(1.0, 6, 5)


def test_ml_config():
    config = MLConfig.from_allocation(0.01, 8, 10, "f2")
    assert config.variant is Variant.DETERMINISTIC
    assert list(config.levels) == [8, 9, 10]
    assert config.N(9) == 61 and config.total_particles == 213
    with pytest.raises(TooFewParticles):
        MLConfig(2, 3, (4, 1))
    with pytest.raises(ValueError):
        MLConfig(2, 3, (4,))


def test_ml_config_split():
    config = MLConfig(1, 3, (4, 3, 2))
    carrier = np.arange(18.0).reshape(9, 2)
    parts = config.split(carrier)
    assert [parts[l].shape[0] for l in (1, 2, 3)] == [4, 3, 2]
    assert np.array_equal(np.concatenate([parts[l] for l in (1, 2, 3)]), carrier)
    with pytest.raises(ValueError):
        config.split(carrier[:8])


@pytest.mark.parametrize("variant", list(Variant))
def test_coarse_leg_is_a_single_level_run_on_summed_drivers(ou5_setup, variant):
    model, obs = ou5_setup
    N, seed = 10, SeedSpec(3, branch=Branch.ESTIMATOR)
    for l in (3, 4, 5, 6):
        pair = coupled_run(model, obs, l, N, variant, seed)
        _, coarse_W = coupled_brownian(l, obs.horizon, model.d_x, N, seed, Stream.SIGNAL)
        _, coarse_V = coupled_brownian(l, obs.horizon, model.d_y, N, seed, Stream.OBSERVATION)
        noise = FilterNoise(np.stack([p.data for p in coarse_W], axis=1), np.stack([p.data for p in coarse_V], axis=1))
        init = draw_initial_ensemble(model, N, seed, l)
        coarse = enkbf_run(model, obs, l - 1, N, variant, seed, init=init, noise=noise)
        assert pair.u_coarse == coarse.u
        assert np.array_equal(pair.coarse_final.particles, coarse.final.particles)
        fine = enkbf_run(model, obs, l, N, variant, seed, init=init)
        assert pair.u_fine == fine.u


def test_coupled_costs():
    model = build_linear_model([[-1.0]], [[1.0]], [[1.0]], [[1.0]], [0.0], [[1.0]])
    obs = IncrementPath(Level(4), 1, np.zeros(16))
    pair = coupled_run(model, obs, 4, 3, "f1", SeedSpec(0))
    assert pair.cost == 3 * (16 + 8)
    assert pair.fine_cost == 3 * 16
    assert pair.contribution == pair.u_fine - pair.u_coarse


def test_single_level_collapse(ou5_setup):
    model, obs = ou5_setup
    seed = SeedSpec(4, branch=Branch.ESTIMATOR)
    for variant in Variant:
        config = MLConfig(5, 5, (20,), variant)
        estimate = ml_log_nc(model, obs, config, seed)
        run = enkbf_run(model, obs, 5, 20, variant, seed)
        assert estimate.u_ml == run.u
        assert estimate.fine_cost == 20 * 32
        phi = lambda x: x[:, 0]
        assert ml_filter_estimate(model, obs, config, seed, phi) == ensemble_mean(run.final)[0]
        assert estimate.z_ml == math.exp(run.u)


def test_constant_test_function_is_exactly_one(ou5_setup):
    model, obs = ou5_setup
    config = MLConfig(3, 5, (12, 8, 4))
    assert ml_filter_estimate(model, obs, config, SeedSpec(5), lambda x: np.ones(x.shape[0])) == 1.0


def test_unobserved_multilevel_estimate_is_zero():
    model = build_linear_model(-np.eye(2), np.zeros((1, 2)), np.eye(2), [[1.0]], np.zeros(2), np.eye(2))
    obs = IncrementPath(Level(6), 1, np.random.default_rng(0).normal(size=64))
    for variant in Variant:
        estimate = ml_log_nc(model, obs, MLConfig(2, 4, (8, 6, 4), variant), SeedSpec(6))
        assert estimate.u_ml == 0.0
        assert estimate.z_ml == 1.0


def test_level_terms_do_not_depend_on_evaluation_order(ou5_setup):
    model, obs = ou5_setup
    config = MLConfig(3, 6, (16, 8, 6, 4))
    seed = SeedSpec(7, branch=Branch.ESTIMATOR)
    estimate = ml_log_nc(model, obs, config, seed)
    reversed_terms = [ml_level_term(model, obs, config, l, seed) for l in reversed(config.levels)]
    assert math.fsum(t.contribution for t in reversed_terms) == estimate.u_ml
    assert [t.level for t in estimate.terms] == [3, 4, 5, 6]
    assert estimate.terms[0].u_coarse is None
    assert estimate.cost == 16 * 8 + 8 * (16 + 8) + 6 * (32 + 16) + 4 * (64 + 32)


def test_multilevel_estimate_is_reproducible(ou5_setup):
    model, obs = ou5_setup
    config = MLConfig(3, 5, (12, 8, 6), "f3")
    a = ml_log_nc(model, obs, config, SeedSpec(8))
    b = ml_log_nc(model, obs, config, SeedSpec(8))
    assert a.u_ml == b.u_ml
    assert a.u_ml != ml_log_nc(model, obs, config, SeedSpec(9)).u_ml


def test_supplied_initial_ensembles_are_used(ou5_setup):
    model, obs = ou5_setup
    config = MLConfig(3, 4, (6, 4))
    carrier = np.tile(model.M0, (10, 1))
    estimate = ml_log_nc(model, obs, config, SeedSpec(10), inits=config.split(carrier))
    base = enkbf_run(model, obs, 3, 6, "f1", SeedSpec(10), init=carrier[:6])
    assert estimate.terms[0].u_fine == base.u


def test_deterministic_pair_difference_vanishes_with_the_step():
    model = build_linear_model([[-0.5]], [[1.0]], [[0.0]], [[1.0]], [1.0], [[0.0]], observation_noise=False)
    _, obs = simulate_truth_and_obs(model, 12, 1, SeedSpec(11))
    levels = [3, 4, 5, 6, 7]
    diffs = [abs(coupled_run(model, obs, l, 2, "f1", SeedSpec(12)).contribution) for l in levels]
    assert all(d > 0 for d in diffs)
    assert stats.linregress(levels, np.log2(diffs)).slope <= -0.6


@pytest.mark.slow
def test_coupled_variance_decays_with_the_level():
    family = ou1_family(c=1.0, q_sqrt=1.0, r_sqrt=1.0)
    model = family((-0.8,))
    _, obs = simulate_truth_and_obs(model, 10, 1, SeedSpec(13, branch=Branch.DATA))
    rows = coupled_variance_study(model, obs, [4, 5, 6, 7, 8], 500, "f1", 200, SeedSpec(14))
    levels, variances = zip(*rows)
    slope = stats.linregress(levels, np.log2(variances)).slope
    assert -1.5 <= slope <= -0.5


@pytest.mark.slow
def test_multilevel_and_single_level_agree_in_mean():
    family = ou5_family(c_seed=1)
    model = family(family.default_theta)
    _, obs = simulate_truth_and_obs(model, 10, 1, SeedSpec(15, branch=Branch.DATA))
    config = MLConfig.from_allocation(0.2, 6, 8)
    ml, sl = [], []
    for r in range(100):
        seed = SeedSpec(16, branch=Branch.ESTIMATOR, repetition=r)
        ml.append(ml_log_nc(model, obs, config, seed).u_ml)
        sl.append(enkbf_run(model, obs, 8, config.N(8), "f1", seed.child(branch=Branch.REFERENCE)).u)
    se = math.sqrt(np.var(ml, ddof=1) / len(ml) + np.var(sl, ddof=1) / len(sl))
    assert abs(np.mean(ml) - np.mean(sl)) <= 3.0 * se


def _term(level, u_fine, u_coarse=None):
    return LevelTerm(level, 4, u_fine, u_coarse, 1.0, 1.0, None, None)


def test_linear_scale_terms_saturate_instead_of_overflowing():
    assert _term(5, 800.0).z_contribution == math.inf
    assert _term(6, 800.0, 799.0).z_contribution == math.inf
    assert _term(6, 799.0, 800.0).z_contribution == -math.inf
    assert _term(6, 800.0, 800.0).z_contribution == 0.0
    assert _term(6, 1.0, 0.999).z_contribution == pytest.approx(math.e - math.exp(0.999), rel=1e-12)


def test_linear_scale_estimate_with_an_overflowing_base_is_infinite():
    estimate = MLEstimate(800.5, [_term(5, 800.0), _term(6, 0.5, 0.0)])
    assert estimate.z_ml == math.inf
    finite = MLEstimate(1.0, [_term(5, 0.5), _term(6, 1.0, 0.5)])
    assert finite.z_ml == pytest.approx(math.e, rel=1e-12)
