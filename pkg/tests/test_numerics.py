import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from enkf_fcnn.errors import ContractViolation, DegenerateEnsembleError, SingularInnovationCovarianceError
from enkf_fcnn.numerics import (
    GaussianSpec,
    RngStream,
    covariance,
    ensemble_anomalies,
    gaussian_sample,
    spd_solve,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


# -- random streams ----------------------------------------------------------

def test_normals_follow_box_muller_on_philox_uniforms():
    # oracle: the documented transform applied by hand to numpy's Philox stream
    seed, index = 42, 3
    gen = np.random.Generator(np.random.Philox(key=seed | (index << 64)))
    u = gen.random(6)
    expected = []
    for u1, u2 in zip(u[0::2], u[1::2]):
        r = math.sqrt(-2.0 * math.log(1.0 - u1))
        expected += [r * math.cos(2 * math.pi * u2), r * math.sin(2 * math.pi * u2)]
    z = RngStream(seed, index).standard_normals(5)
    np.testing.assert_allclose(z, expected[:5], rtol=1e-14, atol=1e-15)


def test_stream_is_reproducible_and_derivation_separates():
    a = RngStream(7).derive("members", 1, 7).uniforms(10)
    b = RngStream(7).derive("members", 1, 7).uniforms(10)
    c = RngStream(7).derive("members", 1, 100).uniforms(10)
    d = RngStream(8).derive("members", 1, 7).uniforms(10)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_label_types_do_not_collide():
    root = RngStream(1)
    assert root.derive(1).stream_index != root.derive("1").stream_index
    assert root.derive(1, 2).stream_index != root.derive(12).stream_index
    with pytest.raises(TypeError):
        root.derive(True)


def test_seed_range_is_checked():
    with pytest.raises(ContractViolation):
        RngStream(-1)
    with pytest.raises(ContractViolation):
        RngStream(0, 2**64)


def test_sample_moments_of_standard_normals():
    z = RngStream(12345, 7).standard_normals(300000).reshape(100000, 3)
    # five standard errors on the mean and on the variance
    assert np.all(np.abs(z.mean(axis=0)) < 5 / math.sqrt(1e5))
    assert np.all(np.abs(z.var(axis=0, ddof=1) - 1) < 5 * math.sqrt(2 / 1e5))
    # pinned values guard against silent changes to the stream
    np.testing.assert_allclose(z.mean(axis=0), [0.00558617, 0.00295924, 0.00075698], atol=1e-8)


# -- gaussian sampling -------------------------------------------------------

def test_zero_variance_returns_mean():
    mean = np.array([1.0, -2.0, 3.5])
    x = gaussian_sample(RngStream(3), GaussianSpec(mean, 0.0), 3)
    assert np.array_equal(x, mean)


def test_gaussian_sample_scales_normals():
    mean = np.array([0.5, 1.5])
    z = RngStream(9).standard_normals(2)
    x = gaussian_sample(RngStream(9), GaussianSpec(mean, 4.0), 2)
    np.testing.assert_allclose(x, mean + 2.0 * z, rtol=0, atol=1e-15)


def test_gaussian_sample_contracts():
    with pytest.raises(ContractViolation):
        GaussianSpec([0.0], -1.0)
    with pytest.raises(ContractViolation):
        gaussian_sample(RngStream(0), GaussianSpec([0.0, 0.0], 1.0), 3)


# -- anomalies and covariance ------------------------------------------------

def test_anomalies_and_covariance_examples():
    S = np.array([[1.0, 3.0]])
    assert np.array_equal(ensemble_anomalies(S), [[-1.0, 1.0]])
    assert np.array_equal(covariance(S), [[2.0]])
    S = np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]])
    np.testing.assert_allclose(covariance(S), [[1.0, 2.0], [2.0, 4.0]], rtol=1e-15)


def test_degenerate_ensemble_rejected():
    with pytest.raises(DegenerateEnsembleError):
        covariance(np.ones((3, 1)))
    with pytest.raises(ContractViolation):
        covariance(np.ones(3))


def _brute_force_covariance(S):
    d, N = S.shape
    mean = [sum(S[i, n] for n in range(N)) / N for i in range(d)]
    C = np.empty((d, d))
    for i in range(d):
        for k in range(d):
            C[i, k] = sum((S[i, n] - mean[i]) * (S[k, n] - mean[k]) for n in range(N)) / (N - 1)
    return C


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5).flatmap(lambda d: st.integers(2, 8).flatmap(
    lambda N: arrays(np.float64, (d, N), elements=finite))))
def test_covariance_matches_double_loop(S):
    C = covariance(S)
    ref = _brute_force_covariance(S)
    scale = max(1.0, np.abs(S).max() ** 2)
    np.testing.assert_allclose(C, ref, rtol=0, atol=1e-10 * scale)
    assert np.array_equal(C, C.T)
    assert np.all(np.linalg.eigvalsh(C) >= -1e-9 * scale)
    np.testing.assert_allclose(ensemble_anomalies(S).sum(axis=1), 0.0, atol=1e-10 * max(1.0, np.abs(S).max()))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 6), elements=finite), arrays(np.float64, (3,), elements=finite))
def test_covariance_shift_invariant(S, c):
    scale = max(1.0, np.abs(S).max() + np.abs(c).max()) ** 2
    np.testing.assert_allclose(covariance(S + c[:, None]), covariance(S), rtol=0, atol=1e-9 * scale)


# -- SPD solve ---------------------------------------------------------------

def test_spd_solve_examples():
    b = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(spd_solve(np.eye(3), b), b)
    assert spd_solve(np.array([[4.0]]), np.array([2.0]))[0] == 0.5


def test_spd_solve_random_residual():
    rng = np.random.default_rng(0)
    for m in (1, 3, 10):
        M = rng.standard_normal((m, m))
        A = M @ M.T + m * np.eye(m)
        B = rng.standard_normal((m, 4))
        X = spd_solve(A, B)
        assert np.linalg.norm(A @ X - B) / np.linalg.norm(B) < 1e-10


def test_spd_solve_jitters_semidefinite_matrix():
    A = np.array([[1.0, 1.0], [1.0, 1.0]])
    x = spd_solve(A, np.array([1.0, 1.0]))
    assert np.all(np.isfinite(x))
    assert spd_solve(np.zeros((2, 2)), np.zeros(2)).tolist() == [0.0, 0.0]


def test_spd_solve_fails_on_negative_definite():
    with pytest.raises(SingularInnovationCovarianceError):
        spd_solve(-np.eye(2), np.ones(2))


def test_spd_solve_contracts():
    with pytest.raises(ContractViolation):
        spd_solve(np.ones((2, 3)), np.ones(2))
    with pytest.raises(ContractViolation):
        spd_solve(np.eye(2), np.ones(3))
    with pytest.raises(ContractViolation):
        spd_solve(np.array([[np.nan]]), np.ones(1))
