import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from longmix.covariance import ThetaMap, VarianceParams, cs_block, marginal_cov, rho_bounds
from longmix.exceptions import DecodeFailure, DimensionMismatch, NonPositiveSigma, RhoOutOfRange


def test_cs_identity():
    assert np.array_equal(cs_block(1.0, 0.0, 3), np.eye(3))


def test_cs_two_by_two():
    assert np.array_equal(cs_block(2.0, 0.5, 2), [[2.0, 1.0], [1.0, 2.0]])


def test_cs_lower_bound_m3():
    with pytest.raises(RhoOutOfRange):
        cs_block(1.0, -0.6, 3)


@pytest.mark.parametrize("rho", [-1 / 11, -0.1, 1.0, 1.5])
def test_cs_rejects_outside_open_interval_m12(rho):
    with pytest.raises(RhoOutOfRange):
        cs_block(1.0, rho, 12)


def test_cs_accepts_just_inside_m12():
    for rho in (-1 / 11 + 1e-9, 0.999999):
        assert np.all(np.linalg.eigvalsh(cs_block(1.0, rho, 12)) > 0)


@pytest.mark.parametrize("sigma2", [0.0, -1.0, float("nan")])
def test_cs_nonpositive_sigma(sigma2):
    with pytest.raises(NonPositiveSigma):
        cs_block(sigma2, 0.0, 3)


def test_marginal_zero_design():
    p = VarianceParams(D={"pair_id": np.eye(2)}, sigma2=3.0)
    assert np.array_equal(marginal_cov(np.zeros((4, 2)), p), 3.0 * np.eye(4))


def test_marginal_random_intercept():
    d, s2 = 0.7, 1.3
    p = VarianceParams(D={"pair_id": np.array([[d]])}, sigma2=s2, rho=0.0)
    V = marginal_cov(np.ones((5, 1)), p)
    assert np.allclose(V, d * np.ones((5, 5)) + s2 * np.eye(5), atol=1e-15)


def test_marginal_dimension_mismatch():
    p = VarianceParams(D={"pair_id": np.eye(2)}, sigma2=1.0)
    with pytest.raises(DimensionMismatch):
        marginal_cov(np.ones((3, 3)), p)


def test_marginal_matches_monte_carlo():
    rng = np.random.default_rng(5)
    D = np.array([[1.0, 0.3], [0.3, 0.5]])
    p = VarianceParams(D={"pair_id": D}, sigma2=0.8, rho=0.25)
    Z = np.column_stack([np.ones(3), [1.0, 2.0, 3.0]])
    V = marginal_cov(Z, p)
    n = 1_000_000
    b = rng.multivariate_normal(np.zeros(2), D, size=n)
    e = rng.multivariate_normal(np.zeros(3), p.residual_cov(3), size=n)
    y = b @ Z.T + e
    S = y.T @ y / n
    for i in range(3):
        for j in range(i + 1):
            se = np.std(y[:, i] * y[:, j]) / np.sqrt(n)
            assert abs(S[i, j] - V[i, j]) < 3 * se, (i, j)


def test_rho_bounds():
    assert rho_bounds(12) == (-1 / 11, 1.0)
    assert rho_bounds(1) == (-1.0, 1.0)


def _tmap(structure="general", residual="compound_symmetry"):
    return ThetaMap([("origin_borough", 1), ("pair_id", 3)], structure, residual, m=12)


def test_theta_layout():
    t = _tmap()
    assert t.size == 1 + 6 + 2
    assert t.labels[-2:] == ["log_sigma2", "logit_rho"]
    assert t.diag_indices == [0, 1, 3, 6]
    assert _tmap("diagonal", "independent").size == 1 + 3 + 1


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 9, elements=st.floats(-4, 4)))
def test_decode_valid_and_round_trips(theta):
    t = _tmap()
    p = t.decode(theta)
    for D in p.D.values():
        assert np.allclose(D, D.T)
        assert np.linalg.eigvalsh(D).min() >= -1e-12 * max(1.0, np.abs(D).max())
    assert t.rho_lo <= p.rho <= t.rho_hi
    assert -1 / 11 < p.rho < 1 and p.sigma2 > 0
    assert np.allclose(t.encode(p), theta, atol=1e-7)


def test_decode_failures():
    t = _tmap()
    with pytest.raises(DecodeFailure):
        t.decode(np.zeros(4))
    bad = np.zeros(9)
    bad[0] = np.nan
    with pytest.raises(DecodeFailure):
        t.decode(bad)
