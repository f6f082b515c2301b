import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from covad.detectors import (
    DetectorOptions,
    DetectorState,
    apply_rank1_update,
    constrained_ml_exhaustive,
    lifted_operator,
    ml_coordinate_step,
    ml_objective,
    nnls_coordinate_step,
    nnls_objective,
    nnls_reference_solve,
    run_detector,
    threshold_activity,
)
from covad.errors import InvalidArgument, NumericFailure
from covad.metrics import lp_error
from covad.system_model import (
    LsfcModel,
    complex_normal,
    covariance_model,
    generate_pilots,
    sample_covariance,
    sample_ground_truth,
    synthesize_block,
    true_covariance,
)


def random_psd(rng, l, m=None):
    y = complex_normal(rng, (l, m or 3 * l))
    return y @ y.conj().T / y.shape[1]


def state_for(pilots, gamma, sigma2, track=True):
    st_ = DetectorState.initial(pilots.dim_ktot, pilots.dim_l, sigma2, track)
    st_.gamma = np.array(gamma, dtype=float)
    st_.refresh(pilots)
    return st_


# objectives

def test_ml_objective_zero_gamma_zero_sample():
    p = generate_pilots(5, 9, 0)
    assert ml_objective(p, np.zeros(9), 2.0, np.zeros((5, 5))) == pytest.approx(5 * math.log(2.0), abs=1e-12)


def test_ml_objective_matches_dense_inverse():
    rng = np.random.default_rng(1)
    p = generate_pilots(4, 8, 1)
    gamma = rng.uniform(0, 2, 8)
    sh = random_psd(rng, 4)
    sigma = p.entries @ np.diag(gamma) @ p.entries.conj().T + 0.5 * np.eye(4)
    expected = np.log(np.linalg.det(sigma)).real + np.trace(np.linalg.inv(sigma) @ sh).real
    assert ml_objective(p, gamma, 0.5, sh) == pytest.approx(expected, abs=1e-10)


def test_objective_errors():
    p = generate_pilots(3, 4, 0)
    with pytest.raises(InvalidArgument):
        ml_objective(p, -np.ones(4), 1.0, np.eye(3))
    with pytest.raises(InvalidArgument):
        ml_objective(p, np.ones(4), 0.0, np.eye(3))


# coordinate steps

def test_steps_vanish_at_fixed_point():
    rng = np.random.default_rng(2)
    p = generate_pilots(6, 15, 2)
    gamma = rng.uniform(0.1, 3, 15)
    sh = covariance_model(p, gamma, 0.8)
    s = state_for(p, gamma, 0.8)
    for k in range(15):
        a = p.column(k)
        assert abs(ml_coordinate_step(s, sh, a, k)) < 1e-10
        assert abs(nnls_coordinate_step(s, sh, a, k)) < 1e-10


@given(c=st.floats(0.01, 50), k=st.integers(0, 9), seed=st.integers(0, 500))
@settings(max_examples=40, deadline=None)
def test_steps_recover_rank_one_perturbation(c, k, seed):
    p = generate_pilots(5, 10, seed)
    a = p.column(k)
    sh = 1.3 * np.eye(5) + c * np.outer(a, a.conj())
    s = DetectorState.initial(10, 5, 1.3)
    assert ml_coordinate_step(s, sh, a, k) == pytest.approx(c, rel=1e-10)
    assert nnls_coordinate_step(s, sh, a, k) == pytest.approx(c, rel=1e-10)
    nn = DetectorState.initial(10, 5, 1.3, track_inverse=False)
    assert nnls_coordinate_step(nn, sh + np.outer(a, a.conj()) * (-c - 1.0), a, k) == 0.0  # clipped at -gamma_k = 0


def test_box_clipping():
    p = generate_pilots(4, 6, 3)
    a = p.column(2)
    sh = np.eye(4) + 5.0 * np.outer(a, a.conj())
    s = DetectorState.initial(6, 4, 1.0)
    upper = np.full(6, 2.0)
    assert ml_coordinate_step(s, sh, a, 2, box_upper=upper) == 2.0
    assert nnls_coordinate_step(s, sh, a, 2, box_upper=upper) == 2.0


@pytest.mark.parametrize("seed", range(5))
def test_ml_step_is_grid_minimizer(seed):
    rng = np.random.default_rng(seed)
    p = generate_pilots(3, 6, seed)
    gamma = rng.uniform(0, 2, 6)
    sh = random_psd(rng, 3, 5)
    s = state_for(p, gamma, 0.7)
    k = 1
    a = p.column(k)
    d_star = ml_coordinate_step(s, sh, a, k)

    def f(d):
        g = gamma.copy()
        g[k] += d
        return ml_objective(p, g, 0.7, sh)

    d0 = -gamma[k]
    grid = d0 + np.linspace(0, 10, 1001)[1:]
    best = min(f(d) for d in grid)
    assert f(d_star) <= best + 1e-12


@given(c=st.floats(0.01, 100), seed=st.integers(0, 1000))
@settings(max_examples=40, deadline=None)
def test_steps_scale_equivariant(c, seed):
    rng = np.random.default_rng(seed)
    p = generate_pilots(4, 7, seed)
    gamma = rng.uniform(0, 2, 7) * (rng.random(7) < 0.6)
    sh = random_psd(rng, 4)
    s1 = state_for(p, gamma, 0.9)
    s2 = state_for(p, c * gamma, c * 0.9)
    for k in range(7):
        a = p.column(k)
        for step in (ml_coordinate_step, nnls_coordinate_step):
            d1 = step(s1, sh, a, k)
            d2 = step(s2, c * sh, a, k)
            assert d2 == pytest.approx(c * d1, rel=1e-10, abs=1e-12 * c)


def test_nnls_cyclic_pass_never_increases_misfit():
    rng = np.random.default_rng(7)
    p = generate_pilots(4, 12, 7)
    sh = random_psd(rng, 4)
    s = DetectorState.initial(12, 4, 0.5, track_inverse=False)
    prev = nnls_objective(p, s.gamma, 0.5, sh)
    for k in range(12):
        apply_rank1_update(s, p.column(k), nnls_coordinate_step(s, sh, p.column(k), k), k)
        cur = nnls_objective(p, s.gamma, 0.5, sh)
        assert cur <= prev + 1e-12 * max(1.0, prev)
        prev = cur


# rank-1 updates

def test_rank1_zero_step_is_identity():
    p = generate_pilots(3, 5, 0)
    s = state_for(p, np.ones(5), 1.0)
    inv = s.sigma_inv.copy()
    apply_rank1_update(s, p.column(0), 0.0, 0)
    np.testing.assert_array_equal(s.sigma_inv, inv)
    np.testing.assert_array_equal(s.gamma, np.ones(5))


@given(seed=st.integers(0, 10_000), steps=st.integers(1, 60))
@settings(max_examples=40, deadline=None)
def test_rank1_composition_matches_direct_inverse(seed, steps):
    rng = np.random.default_rng(seed)
    p = generate_pilots(6, 20, seed)
    sh = random_psd(rng, 6)
    s = DetectorState.initial(20, 6, 1.0)
    for _ in range(steps):
        k = int(rng.integers(20))
        d = ml_coordinate_step(s, sh, p.column(k), k)
        apply_rank1_update(s, p.column(k), d, k)
        assert s.coherence_error(p) < 1e-8
        assert np.all(s.gamma >= 0)
    direct = np.linalg.inv(covariance_model(p, s.gamma, 1.0))
    assert np.linalg.norm(s.sigma_inv - direct) < 1e-7


def test_rank1_denominator_failure():
    p = generate_pilots(3, 4, 0)
    s = DetectorState.initial(4, 3, 1.0)
    a = p.column(0)
    with pytest.raises(NumericFailure):
        apply_rank1_update(s, a, -1.0 / 3.0, 0)


# full runs

def test_noise_only_gives_zero():
    p = generate_pilots(5, 20, 0)
    for alg in ("ml", "nnls"):
        est = run_detector(p, 0.6 * np.eye(5), 0.6, DetectorOptions(max_epochs=5), alg)
        assert np.all(est.gamma_hat == 0)
        assert est.converged and est.epochs_run == 1


def test_engines_agree():
    rng = np.random.default_rng(4)
    p = generate_pilots(8, 40, 4)
    sh = random_psd(rng, 8)
    for alg in ("ml", "nnls"):
        a = run_detector(p, sh, 0.5, DetectorOptions(max_epochs=20, seed=3, engine="numba"), alg)
        b = run_detector(p, sh, 0.5, DetectorOptions(max_epochs=20, seed=3, engine="python"), alg)
        np.testing.assert_allclose(a.gamma_hat, b.gamma_hat, atol=1e-10)
        np.testing.assert_allclose(a.objective_trace, b.objective_trace, rtol=1e-9)


@pytest.mark.parametrize("schedule", ["random_permutation", "cyclic", "uniform_random"])
def test_run_is_deterministic_and_monotone(schedule):
    rng = np.random.default_rng(5)
    p = generate_pilots(6, 30, 5)
    sh = random_psd(rng, 6)
    opts = DetectorOptions(max_epochs=15, schedule=schedule, seed=11)
    a = run_detector(p, sh, 1.0, opts, "ml")
    b = run_detector(p, sh, 1.0, opts, "ml")
    np.testing.assert_array_equal(a.gamma_hat, b.gamma_hat)
    trace = np.array(a.objective_trace)
    assert np.all(np.diff(trace) <= 1e-12 * np.maximum(1, np.abs(trace[:-1])))


def test_box_constraint_respected():
    rng = np.random.default_rng(6)
    p = generate_pilots(6, 30, 6)
    sh = random_psd(rng, 6) * 10
    upper = np.full(30, 0.2)
    est = run_detector(p, sh, 1.0, DetectorOptions(max_epochs=30, box_upper=upper), "ml")
    assert np.all(est.gamma_hat <= 0.2 + 1e-15)


def test_periodic_refresh_keeps_inverse_coherent():
    rng = np.random.default_rng(8)
    p = generate_pilots(10, 60, 8)
    sh = random_psd(rng, 10)
    est = run_detector(p, sh, 1.0, DetectorOptions(max_epochs=40, inverse_refresh_period=37), "ml")
    assert est.refreshes > 0


def test_options_validation():
    with pytest.raises(InvalidArgument):
        DetectorOptions(schedule="zigzag")
    with pytest.raises(InvalidArgument):
        DetectorOptions(max_epochs=0)
    p = generate_pilots(3, 4, 0)
    with pytest.raises(InvalidArgument):
        run_detector(p, np.eye(3), 1.0, algorithm="lasso")


@pytest.mark.parametrize("ka", [1, 4, 8])
def test_noiseless_nnls_recovery(ka):
    p = generate_pilots(20, 200, 100 + ka)
    t = sample_ground_truth(200, ka, LsfcModel.uniform_db(1.0, 10.0), 200 + ka)
    sh = true_covariance(p, t.gamma_true, 1.0)
    est = run_detector(p, sh, 1.0, DetectorOptions(max_epochs=3000, tolerance=1e-13), "nnls")
    assert lp_error(est.gamma_hat, t.gamma_true, 1) < 1e-4
    ref = nnls_reference_solve(p, sh, 1.0)
    assert lp_error(ref.gamma, t.gamma_true, 1) < 1e-4


# reference solver

def test_lifted_objective_identity():
    rng = np.random.default_rng(9)
    p = generate_pilots(5, 11, 9)
    big_a = lifted_operator(p)
    assert big_a.shape == (25, 11)
    for _ in range(100):
        gamma = rng.uniform(0, 3, 11)
        sh = random_psd(rng, 5)
        w = (sh - 0.4 * np.eye(5)).reshape(-1)
        lhs = np.sum(np.abs(big_a @ gamma - w) ** 2)
        assert lhs == pytest.approx(nnls_objective(p, gamma, 0.4, sh), rel=1e-10, abs=1e-10)


def test_reference_noise_only():
    p = generate_pilots(4, 10, 0)
    res = nnls_reference_solve(p, 0.3 * np.eye(4), 0.3)
    assert res.converged
    np.testing.assert_array_equal(res.gamma, 0)


@pytest.mark.parametrize("seed", range(5))
def test_reference_matches_coordinate_descent(seed):
    p = generate_pilots(10, 50, seed)
    t = sample_ground_truth(50, 8, LsfcModel.uniform_db(1.0, 10.0), seed)
    blk = synthesize_block(p, t, 40, 1.0, seed)
    sh = sample_covariance(blk)
    ref = nnls_reference_solve(p, sh, 1.0)
    cd = run_detector(p, sh, 1.0, DetectorOptions(max_epochs=5000, tolerance=1e-12), "nnls")
    assert ref.converged and ref.kkt_residual < 1e-8
    assert cd.final_objective == pytest.approx(ref.objective, rel=1e-6)


def test_reference_reports_non_convergence():
    rng = np.random.default_rng(3)
    p = generate_pilots(10, 50, 3)
    res = nnls_reference_solve(p, random_psd(rng, 10) * 5, 1.0, max_iter=2)
    assert not res.converged
    assert res.iterations == 2 and res.gamma.shape == (50,)


# thresholding and the exhaustive oracle

def test_threshold_activity():
    assert threshold_activity(np.zeros(5), 0.1, 1.0).size == 0
    np.testing.assert_array_equal(threshold_activity(np.array([0.1, 2, 3]), 0.0, 1.0), [0, 1, 2])
    np.testing.assert_array_equal(threshold_activity(np.array([1.0, 2.0]), 1.0, 1.0), [1])
    np.testing.assert_array_equal(threshold_activity(np.array([1.0, 2.0]), 0.5, 1.0, relative_to=[3.0, 3.0]), [1])
    with pytest.raises(InvalidArgument):
        threshold_activity(np.ones(2), -1.0, 1.0)


def test_exhaustive_ml_noiseless_recovers_support():
    p = generate_pilots(6, 10, 1)
    g = np.full(10, 4.0)
    gamma = np.zeros(10)
    gamma[[2, 7]] = 4.0
    sh = covariance_model(p, gamma, 1.0)
    np.testing.assert_array_equal(constrained_ml_exhaustive(p, sh, 1.0, 2, g), [2, 7])
    with pytest.raises(InvalidArgument):
        constrained_ml_exhaustive(generate_pilots(3, 21, 0), np.eye(3), 1.0, 1, np.ones(21))
