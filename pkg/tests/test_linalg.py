"""Dense linear algebra contracts."""

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from loopsynth import linalg
from loopsynth.policy import default_policy


def test_svd_identity():
    res = linalg.svd(np.eye(4))
    assert np.allclose(res.s, np.ones(4))
    assert np.allclose(res.reconstruct(), np.eye(4))


def test_svd_rank_one_outer_product():
    rng = np.random.default_rng(7)
    u = rng.standard_normal(6) + 1j * rng.standard_normal(6)
    v = rng.standard_normal(4) + 1j * rng.standard_normal(4)
    res = linalg.svd(np.outer(u, v.conj()))
    assert res.s[0] == pytest.approx(np.linalg.norm(u) * np.linalg.norm(v), rel=1e-12)
    assert np.all(res.s[1:] < 1e-12 * res.s[0])


def test_svd_gram_eigenvalue_oracle():
    rng = np.random.default_rng(11)
    a = rng.standard_normal((5, 3))
    res = linalg.svd(a)
    gram_eigs = np.sort(np.linalg.eigvalsh(a.T @ a))[::-1]
    assert np.allclose(res.s**2, gram_eigs, rtol=1e-10, atol=1e-12)
    assert np.allclose(res.reconstruct(), a, atol=1e-12)
    assert np.all(np.diff(res.s) <= 0)


def test_svd_rejects_vectors():
    with pytest.raises(ValueError):
        linalg.svd(np.ones(3))


def test_eigenvalues_diagonal():
    w = linalg.eigenvalues(np.diag([3.0, -1.0, 0.5]))
    assert np.allclose(sorted(w.real), [-1.0, 0.5, 3.0])
    assert np.allclose(w.imag, 0.0)


def test_eigenvalues_companion_double_root():
    # z^2 - z + 0.25 = (z - 0.5)^2
    companion = np.array([[1.0, -0.25], [1.0, 0.0]])
    w = linalg.eigenvalues(companion)
    assert np.allclose(w, [0.5, 0.5], atol=1e-7)


def test_eigenvalues_rotation_pair():
    theta = 0.3
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    w = np.sort_complex(linalg.eigenvalues(rot))
    expected = np.sort_complex(np.array([np.exp(1j * theta), np.exp(-1j * theta)]))
    assert np.allclose(w, expected)


def test_cholesky_pinned_factor():
    low = linalg.cholesky(np.array([[4.0, 2.0], [2.0, 5.0]]))
    assert np.allclose(low, np.array([[2.0, 0.0], [1.0, 2.0]]))


def test_cholesky_failure_reports_pivot():
    bad = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 3.0], [0.0, 3.0, 1.0]])
    with pytest.raises(linalg.NotPositiveDefiniteError) as err:
        linalg.cholesky(bad)
    assert err.value.pivot == 2


def test_cholesky_complex_hermitian():
    a = np.array([[2.0, 1.0 + 1.0j], [1.0 - 1.0j, 3.0]])
    low = linalg.cholesky(a)
    assert np.allclose(low @ low.conj().T, a)
    assert np.allclose(np.triu(low, 1), 0.0)


def test_lyapunov_scalar_pinned():
    x = linalg.solve_discrete_lyapunov(np.array([[0.5]]), np.array([[1.0]]))
    assert x[0, 0] == pytest.approx(4.0 / 3.0, rel=1e-13)


def test_lyapunov_matches_scipy_small():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((4, 4))
    a *= 0.9 / np.max(np.abs(np.linalg.eigvals(a)))
    q = rng.standard_normal((4, 4))
    q = q @ q.T
    x = linalg.solve_discrete_lyapunov(a, q)
    x_ref = scipy.linalg.solve_discrete_lyapunov(a, q)
    assert np.allclose(x, x_ref, rtol=1e-10, atol=1e-10)
    assert np.allclose(a @ x @ a.T - x + q, 0.0, atol=1e-9)


def test_lyapunov_smith_branch_matches_scipy():
    rng = np.random.default_rng(5)
    n = 44
    a = rng.standard_normal((n, n))
    a *= 0.85 / np.max(np.abs(np.linalg.eigvals(a)))
    q = rng.standard_normal((n, n))
    q = q @ q.T + n * np.eye(n)
    x = linalg.solve_discrete_lyapunov(a, q)
    x_ref = scipy.linalg.solve_discrete_lyapunov(a, q)
    assert np.allclose(x, x_ref, rtol=1e-9, atol=1e-8 * np.linalg.norm(x_ref))


def test_lyapunov_rejects_unstable():
    with pytest.raises(ValueError, match="spectral radius"):
        linalg.solve_discrete_lyapunov(np.array([[1.0]]), np.array([[1.0]]))


def test_policy_override_changes_dispatch():
    # force the Smith branch on a small system and check both routes agree
    rng = np.random.default_rng(9)
    a = rng.standard_normal((6, 6))
    a *= 0.7 / np.max(np.abs(np.linalg.eigvals(a)))
    q = np.eye(6)
    policy = default_policy().with_updates(lyapunov_kron_max=2)
    x_smith = linalg.solve_discrete_lyapunov(a, q, policy=policy)
    x_kron = linalg.solve_discrete_lyapunov(a, q)
    assert np.allclose(x_smith, x_kron, rtol=1e-11, atol=1e-11)


@settings(max_examples=60, deadline=None)
@given(st.integers(min_value=1, max_value=8), st.integers(min_value=0, max_value=2**31 - 1))
def test_svd_reconstruction_property(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, max(1, n - 1)))
    res = linalg.svd(a)
    assert np.allclose(res.reconstruct(), a, atol=1e-10 * max(1.0, np.abs(a).max()))
    assert np.all(res.s >= 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(min_value=1, max_value=7), st.integers(min_value=0, max_value=2**31 - 1))
def test_cholesky_round_trip_property(n, seed):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((n, n))
    a = m @ m.T + n * np.eye(n)
    low = linalg.cholesky(a)
    assert np.allclose(low @ low.T, a, rtol=1e-10, atol=1e-10)
