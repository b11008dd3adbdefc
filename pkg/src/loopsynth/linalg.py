"""Dense linear algebra used by the synthesis stack.

Thin, contract-pinning wrappers around LAPACK (via numpy) plus the few
routines where we need behaviour numpy does not expose: a Cholesky that
reports the failing pivot, and a discrete Lyapunov solver with a
size-dispatched Kronecker/Smith strategy.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from loopsynth.policy import NumericPolicy, default_policy

__all__ = [
    "SvdResult",
    "NotPositiveDefiniteError",
    "SpectralConvergenceError",
    "svd",
    "eigenvalues",
    "cholesky",
    "solve_discrete_lyapunov",
]


class NotPositiveDefiniteError(ValueError):
    """Raised when a Cholesky pivot fails; carries the zero-based pivot index."""

    def __init__(self, pivot: int, value: float):
        self.pivot = pivot
        self.value = value
        super().__init__(f"matrix is not positive definite: pivot {pivot} = {value:.6e}")


class SpectralConvergenceError(RuntimeError):
    """Raised when an iterative eigenvalue or SVD routine fails to converge."""


@dataclasses.dataclass(frozen=True)
class SvdResult:
    """Singular value decomposition A = u @ diag(s) @ vh.

    Singular values are nonnegative and sorted descending; u and vh have
    orthonormal columns and rows respectively (thin form).
    """

    u: np.ndarray
    s: np.ndarray
    vh: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.vh


def svd(a: np.ndarray) -> SvdResult:
    """Thin SVD of a dense matrix (real or complex)."""
    a = np.asarray(a)
    if a.ndim != 2:
        raise ValueError("svd expects a 2-D array")
    try:
        u, s, vh = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SpectralConvergenceError(str(exc)) from exc
    return SvdResult(u=u, s=s, vh=vh)


def eigenvalues(a: np.ndarray) -> np.ndarray:
    """Eigenvalues of a square matrix, sorted by descending magnitude."""
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("eigenvalues expects a square matrix")
    try:
        w = np.linalg.eigvals(a)
    except np.linalg.LinAlgError as exc:
        raise SpectralConvergenceError(str(exc)) from exc
    order = np.argsort(-np.abs(w), kind="stable")
    return w[order]


def cholesky(a: np.ndarray, policy: NumericPolicy | None = None) -> np.ndarray:
    """Lower-triangular Cholesky factor of a Hermitian positive definite matrix.

    Outer-product form so a failure identifies the exact pivot: raises
    :class:`NotPositiveDefiniteError` with the zero-based index of the first
    nonpositive diagonal entry encountered.
    """
    policy = policy or default_policy()
    a = np.array(a, dtype=complex if np.iscomplexobj(a) else float)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("cholesky expects a square matrix")
    scale = max(np.max(np.abs(np.diagonal(a)).astype(float)), 1.0)
    low = np.zeros_like(a)
    work = a.copy()
    for k in range(n):
        pivot = work[k, k].real
        if pivot <= policy.coeff_zero_rel * scale:
            raise NotPositiveDefiniteError(k, float(pivot))
        root = np.sqrt(pivot)
        low[k, k] = root
        if k + 1 < n:
            col = work[k + 1 :, k] / root
            low[k + 1 :, k] = col
            work[k + 1 :, k + 1 :] -= np.outer(col, col.conj())
    return low


def _lyapunov_kron(a: np.ndarray, q: np.ndarray) -> np.ndarray:
    n = a.shape[0]
    eye = np.eye(n * n)
    m = np.kron(a.conj(), a)
    vec_q = q.flatten(order="F")
    vec_x = np.linalg.solve(eye - m, vec_q)
    return vec_x.reshape((n, n), order="F")


def _lyapunov_smith(a: np.ndarray, q: np.ndarray, policy: NumericPolicy) -> np.ndarray:
    # squared-Smith: X_{j+1} = X_j + A_j X_j A_j^H with A_{j+1} = A_j^2,
    # valid for rho(A) < 1
    x = q.astype(complex).copy()
    ak = a.astype(complex).copy()
    for _ in range(policy.smith_max_iter):
        update = ak @ x @ ak.conj().T
        x = x + update
        norm_update = np.linalg.norm(update)
        if norm_update <= policy.smith_tol * max(np.linalg.norm(x), 1.0):
            break
        ak = ak @ ak
    else:
        raise SpectralConvergenceError("Smith iteration did not converge")
    return x


def solve_discrete_lyapunov(
    a: np.ndarray,
    q: np.ndarray,
    policy: NumericPolicy | None = None,
) -> np.ndarray:
    """Solve A X A^H - X + Q = 0 for a Schur-stable A.

    Dispatches on size: direct Kronecker solve up to
    ``policy.lyapunov_kron_max`` states, squared-Smith iteration above.
    Raises ValueError when the spectral radius of A is not below one.
    """
    policy = policy or default_policy()
    a = np.atleast_2d(np.asarray(a))
    q = np.atleast_2d(np.asarray(q))
    n = a.shape[0]
    if a.shape != (n, n) or q.shape != (n, n):
        raise ValueError("solve_discrete_lyapunov expects square matrices of equal size")
    radius = float(np.max(np.abs(np.linalg.eigvals(a)))) if n else 0.0
    if radius >= 1.0:
        raise ValueError(f"spectral radius {radius:.6f} >= 1: no bounded solution")
    if n <= policy.lyapunov_kron_max:
        x = _lyapunov_kron(a, q)
    else:
        x = _lyapunov_smith(a, q, policy)
    if not np.iscomplexobj(a) and not np.iscomplexobj(q):
        x = x.real
    return x
