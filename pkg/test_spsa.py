#!/usr/bin/env python3
"""Tests for gain schedules, SPSA updates and the online RML-SPSA loop."""

import pickle

import numpy as np
import pytest

from mlkbf.core.errors import CovarianceBlowup, NonFiniteTheta
from mlkbf.core.model import ThetaVector, l96_family, ou1_family
from mlkbf.core.multilevel import MLConfig
from mlkbf.core.paths import SeedSpec
from mlkbf.core.spsa import (
    SCHEDULES,
    GainSchedule,
    SPSAConfig,
    SPSATrajectory,
    default_schedule,
    evaluate_perturbed,
    gain_at,
    mean_theta,
    rml_spsa_run,
    sample_perturbation,
    spsa_update,
)
from mlkbf.harness.estimation import run_estimation, summarize_runs, synthetic_record
from mlkbf.harness.executor import RepetitionExecutor


@pytest.fixture(scope="module")
def ou1_record():
    family = ou1_family(c=1.0, q_sqrt=1.0, r_sqrt=0.5, p0=0.1)
    return family, synthetic_record(family, (-2.0,), 5, 6, 0)


def small_config(family, M=4, schedule=None, seed=1, **kwargs):
    return SPSAConfig(
        theta0=family.theta((-1.0,)),
        schedule=schedule or GainSchedule(),
        M=M,
        ml=MLConfig(2, 3, (8, 4)),
        seed=SeedSpec(seed),
        **kwargs,
    )


def test_perturbation_support_and_balance():
    rng = np.random.default_rng(0)
    draws = np.concatenate([sample_perturbation(3, rng) for _ in range(4000)])
    assert set(np.unique(draws)) == {-1.0, 1.0}
    assert abs(draws.mean()) < 4.0 / np.sqrt(draws.size)


def test_perturbation_coordinates_are_independent():
    rng = np.random.default_rng(1)
    draws = np.stack([sample_perturbation(2, rng) for _ in range(10_000)])
    assert abs(np.corrcoef(draws[:, 0], draws[:, 1])[0, 1]) < 0.05
    with pytest.raises(ValueError):
        sample_perturbation(0, rng)


def test_spsa_update_values():
    assert spsa_update(np.array([1.0]), 0.02, 0.5, np.array([1.0]), 1.0, 2.0)[0] == pytest.approx(0.98)
    assert spsa_update(np.array([1.0]), 0.02, 0.5, np.array([-1.0]), 1.0, 2.0)[0] == pytest.approx(1.02)
    theta = np.array([0.3, -1.2])
    assert np.array_equal(spsa_update(theta, np.array([0.1, 0.2]), 0.7, np.ones(2), 3.5, 3.5), theta)


def test_spsa_update_sign_symmetry():
    theta = np.array([0.25, 2.0])
    psi = np.array([1.0, -1.0])
    a = np.array([0.03, 0.01])
    step_up = spsa_update(theta, a, 0.5, psi, 1.7, 0.2) - theta
    step_down = spsa_update(theta, a, 0.5, -psi, 0.2, 1.7) - theta
    assert np.array_equal(step_up, step_down)


def test_spsa_update_keeps_theta_labels():
    theta = ThetaVector(np.array([-1.0]), ("a",))
    updated = spsa_update(theta, 0.1, 1.0, np.array([1.0]), 0.5, 0.0)
    assert updated.names == ("a",)
    assert updated.values[0] == pytest.approx(-0.975)


def test_default_gain_schedule():
    a, b = gain_at(GainSchedule(), 10)
    assert a[0] == 0.02
    assert b == pytest.approx(0.79433, abs=1e-5)
    a, _ = gain_at(GainSchedule(), 100)
    assert a[0] == pytest.approx(0.031623, abs=1e-6)
    with pytest.raises(ValueError):
        gain_at(GainSchedule(), 0)


def test_named_schedules():
    linear_f3 = default_schedule("linear-f3")
    a, _ = gain_at(linear_f3, 600, 2)
    assert a[0] == pytest.approx(600.0**-0.88)
    assert a[1] == pytest.approx(0.2 * 600.0**-0.95)
    assert gain_at(linear_f3, 500, 2)[0].tolist() == [0.02, 0.02]
    assert default_schedule("l96").a0 == 0.03
    assert default_schedule("l63", a0=0.05).t0 == 100
    assert set(SCHEDULES) == {"linear-f12", "linear-f3", "l63", "l96"}
    with pytest.raises(ValueError):
        default_schedule("unknown")


def test_gain_schedule_validation():
    with pytest.raises(ValueError):
        GainSchedule(alpha=(0.5,))
    with pytest.raises(ValueError):
        GainSchedule(alpha=(1.2,))
    with pytest.raises(ValueError):
        GainSchedule(b_scale=0.0)
    assert GainSchedule(a0=0.0, scale=(0.0,)).a(70)[0] == 0.0


def test_common_random_numbers_give_equal_values_at_equal_parameters(ou1_record):
    family, obs = ou1_record
    ml = MLConfig(2, 3, (8, 4))
    inits = ml.split(np.zeros((12, 1)) + np.linspace(-1.0, 1.0, 12)[:, None])
    theta = np.array([-1.5])
    u_plus, u_minus = evaluate_perturbed(family, obs.window(0, 1), ml, theta, theta, SeedSpec(2), inits)
    assert u_plus == u_minus
    u_plus, u_minus = evaluate_perturbed(family, obs.window(0, 1), ml, theta, theta, SeedSpec(2), inits,
                                         common_random_numbers=False)
    assert u_plus != u_minus


def test_zero_gain_keeps_theta_fixed(ou1_record):
    family, obs = ou1_record
    config = small_config(family, schedule=GainSchedule(a0=0.0, scale=(0.0,)))
    trajectory = rml_spsa_run(family, obs, config)
    thetas = trajectory.thetas()
    assert thetas.shape == (5, 1)
    assert np.all(thetas == -1.0)
    assert [it.iteration for it in trajectory.iterates] == [1, 2, 3, 4]


def test_runs_are_reproducible(ou1_record):
    family, obs = ou1_record
    a = rml_spsa_run(family, obs, small_config(family, M=3))
    b = rml_spsa_run(family, obs, small_config(family, M=3))
    c = rml_spsa_run(family, obs, small_config(family, M=3, seed=2))
    assert np.array_equal(a.thetas(), b.thetas())
    assert not np.array_equal(a.thetas(), c.thetas())


def test_record_must_cover_all_iterations(ou1_record):
    family, obs = ou1_record
    with pytest.raises(ValueError):
        rml_spsa_run(family, obs, small_config(family, M=7))


def test_divergent_gains_stop_the_run(ou1_record):
    family, obs = ou1_record
    config = small_config(family, M=4, schedule=GainSchedule(a0=0.0, t0=2, scale=(1e300,)))
    with pytest.raises(NonFiniteTheta) as info:
        rml_spsa_run(family, obs, config)
    err = info.value
    assert err.iteration == 3
    assert isinstance(err.__cause__, ArithmeticError)
    assert [it.iteration for it in err.trajectory.iterates] == [1, 2]
    assert all(it.theta[0] == -1.0 for it in err.trajectory.iterates)
    assert err.trajectory.run == config.seed.run


def test_divergence_surfaces_through_the_executor(ou1_record):
    family, obs = ou1_record
    config = small_config(family, M=4, schedule=GainSchedule(a0=0.0, t0=2, scale=(1e300,)))
    with pytest.raises(NonFiniteTheta) as info:
        run_estimation(family, obs, config, runs=1)
    assert len(info.value.trajectory.iterates) == 2


def test_numerical_errors_survive_pickling():
    trajectory = SPSATrajectory(("theta",), np.array([-1.0]), run=2)
    err = pickle.loads(pickle.dumps(NonFiniteTheta(3, trajectory)))
    assert err.iteration == 3
    assert err.trajectory.run == 2
    assert err.trajectory.names == ("theta",)
    blowup = pickle.loads(pickle.dumps(CovarianceBlowup(7, 1e6, 2e6)))
    assert (blowup.step, blowup.bound, blowup.value) == (7, 1e6, 2e6)
    assert str(blowup) == str(CovarianceBlowup(7, 1e6, 2e6))


def test_estimation_runs_and_summary(ou1_record):
    family, obs = ou1_record
    trajectories = run_estimation(family, obs, small_config(family, M=3), runs=2)
    assert len(trajectories) == 2
    assert not np.array_equal(trajectories[0].thetas(), trajectories[1].thetas())
    summary = summarize_runs(trajectories)
    assert summary.mean.shape == (4, 1)
    assert summary.std[0, 0] == 0.0
    np.testing.assert_allclose(summary.mean[-1], (trajectories[0].thetas()[-1] + trajectories[1].thetas()[-1]) / 2)
    assert mean_theta(trajectories[0], 2).shape == (1,)


@pytest.mark.slow
def test_scalar_drift_is_recovered():
    family = ou1_family()
    obs = synthetic_record(family, family.default_theta, 7, 400, 0)
    config = SPSAConfig(
        theta0=family.theta((-1.0,)),
        schedule=GainSchedule(),
        M=400,
        ml=MLConfig.from_allocation(0.1, 3, 5),
        seed=SeedSpec(3),
    )
    assert config.ml.particles == (38, 19, 9)
    trajectories = run_estimation(family, obs, config, runs=6, executor=RepetitionExecutor())
    hits = sum(abs(mean_theta(t, 50)[0] + 2.0) <= 0.2 for t in trajectories)
    assert hits >= 4


@pytest.mark.slow
def test_lorenz96_forcing_moves_toward_truth():
    family = l96_family(perturbed=True)
    obs = synthetic_record(family, (8.0,), 8, 300, 0)
    config = SPSAConfig(
        theta0=family.theta((10.0,)),
        schedule=default_schedule("l96"),
        M=300,
        ml=MLConfig.from_allocation(0.3, 4, 6),
        seed=SeedSpec(4),
    )
    trajectories = run_estimation(family, obs, config, runs=6, executor=RepetitionExecutor())
    improved = 0
    for trajectory in trajectories:
        errors = np.abs(trajectory.thetas()[1:, 0] - 8.0)
        if errors[-30:].mean() < errors[:30].mean():
            improved += 1
    assert improved >= 5
