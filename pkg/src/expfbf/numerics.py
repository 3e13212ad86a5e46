"""Dense linear algebra, FFT and non-negative least squares.

Every heavy numerical kernel used elsewhere in the package goes through
this module so its contracts (tolerances, error types) live in one place.
SVD, eigendecompositions, least squares and the FFT delegate to LAPACK /
pocketfft via numpy; the Cholesky factorisation and the NNLS active-set
solver are written out here because their failure reporting and pivoting
order are part of the contract.
"""
import numpy as np
from scipy.linalg import solve_triangular

from .errors import InvalidInputError, NumericFailure

__all__ = [
    "svd",
    "eig_general",
    "eig_symmetric",
    "cholesky",
    "spd_solve",
    "nnls",
    "fft",
    "ifft",
    "is_power_of_two",
]

SYMMETRY_TOL = 1e-9
PIVOT_TOL = 1e-12


def _as_finite_matrix(A, name="A"):
    A = np.asarray(A)
    if A.ndim == 1:
        A = A[:, None]
    if A.ndim != 2:
        raise InvalidInputError(f"{name} must be a 2-D array, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return A


def svd(A):
    """Thin singular value decomposition ``A = U @ diag(S) @ V.T``.

    Returns ``(U, S, V)`` with ``S`` sorted in descending order. Note that
    ``V`` is returned, not its (conjugate) transpose.
    """
    A = _as_finite_matrix(A)
    try:
        U, S, Vh = np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericFailure(f"SVD did not converge: {exc}") from exc
    return U, S, Vh.conj().T


def eig_general(A):
    """Eigenvalues and unit-norm eigenvectors of a general square matrix."""
    A = _as_finite_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise InvalidInputError(f"matrix must be square, got {A.shape}")
    try:
        lam, W = np.linalg.eig(A)
    except np.linalg.LinAlgError as exc:
        raise NumericFailure(f"eigendecomposition did not converge: {exc}") from exc
    W = W / np.linalg.norm(W, axis=0, keepdims=True)
    return lam.astype(complex), W.astype(complex)


def eig_symmetric(A):
    """Ascending eigenvalues and orthonormal eigenvectors of a symmetric matrix."""
    A = _as_finite_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise InvalidInputError(f"matrix must be square, got {A.shape}")
    try:
        return np.linalg.eigh(0.5 * (A + A.T))
    except np.linalg.LinAlgError as exc:
        raise NumericFailure(f"symmetric eigensolver did not converge: {exc}") from exc


def cholesky(M):
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Accepts a stack ``(..., n, n)`` and factors every matrix in it. Raises
    NumericFailure with ``index`` set to the first pivot that falls below
    ``PIVOT_TOL`` times the largest diagonal entry of its matrix.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim < 2 or M.shape[-1] != M.shape[-2]:
        raise InvalidInputError(f"M must be square, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise InvalidInputError("M contains non-finite entries")
    n = M.shape[-1]
    Mt = np.swapaxes(M, -1, -2)
    scale = np.maximum(np.abs(M).max(axis=(-1, -2)), 1.0)
    if np.any(np.abs(M - Mt).max(axis=(-1, -2)) > SYMMETRY_TOL * scale):
        raise InvalidInputError("M is not symmetric")
    M = 0.5 * (M + Mt)
    diag = np.abs(np.diagonal(M, axis1=-2, axis2=-1))
    floor = PIVOT_TOL * np.maximum(diag.max(axis=-1), 1e-300)
    L = np.zeros_like(M)
    for j in range(n):
        row = L[..., j, :j]
        pivot = M[..., j, j] - np.einsum("...i,...i->...", row, row)
        if not np.all(pivot > floor):
            worst = float(np.min(pivot - floor) + np.min(floor))
            raise NumericFailure(
                f"matrix is not positive definite: pivot {j} = {worst:.3e}", index=j
            )
        L[..., j, j] = np.sqrt(pivot)
        L[..., j + 1 :, j] = (
            M[..., j + 1 :, j] - np.einsum("...ri,...i->...r", L[..., j + 1 :, :j], row)
        ) / L[..., j, j][..., None]
    return L


def spd_solve(M, B):
    """Solve ``M X = B`` for symmetric positive definite ``M``.

    ``M`` may be a stack ``(..., n, n)`` with a matching stack of right-hand
    sides ``(..., n, k)``.
    """
    B = np.asarray(B, dtype=float)
    if not np.all(np.isfinite(B)):
        raise InvalidInputError("B contains non-finite entries")
    L = cholesky(M)
    vector = B.ndim == L.ndim - 1
    Bm = B[..., None] if vector else B
    if Bm.shape[-2] != L.shape[-1]:
        raise InvalidInputError(f"shape mismatch: M is {np.shape(M)}, B is {B.shape}")
    if L.ndim == 2:
        Y = solve_triangular(L, Bm, lower=True)
        X = solve_triangular(L.T, Y, lower=False)
    else:
        X = np.empty(np.broadcast_shapes(L.shape[:-2], Bm.shape[:-2]) + Bm.shape[-2:])
        Lb = np.broadcast_to(L, X.shape[:-2] + L.shape[-2:])
        Bb = np.broadcast_to(Bm, X.shape)
        for i in np.ndindex(*X.shape[:-2]):
            Y = solve_triangular(Lb[i], Bb[i], lower=True)
            X[i] = solve_triangular(Lb[i].T, Y, lower=False)
    return X[..., 0] if vector else X


def nnls(C, d, max_iter=None):
    """Non-negative least squares by the Lawson-Hanson active-set method.

    Minimises ``||C a - d||_2`` subject to ``a >= 0``. The variable entering
    the passive set is the one with the largest dual value; ties go to the
    lowest index (``np.argmax`` order), so the result is deterministic.
    """
    C = _as_finite_matrix(C, "C").astype(float)
    d = np.asarray(d, dtype=float).ravel()
    m, n = C.shape
    if d.shape[0] != m:
        raise InvalidInputError(f"rows(C) = {m} but len(d) = {d.shape[0]}")
    if not np.all(np.isfinite(d)):
        raise InvalidInputError("d contains non-finite entries")
    if max_iter is None:
        max_iter = 3 * n + 30

    tol = 10 * np.finfo(float).eps * max(np.abs(C).sum(axis=0).max(), 1.0) * max(m, n)
    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    w = C.T @ d

    def restricted_lstsq(mask):
        z = np.zeros(n)
        z[mask] = np.linalg.lstsq(C[:, mask], d, rcond=None)[0]
        return z

    for _ in range(max_iter):
        if passive.all():
            break
        candidates = np.where(passive, -np.inf, w)
        j = int(np.argmax(candidates))
        if candidates[j] <= tol:
            break
        passive[j] = True
        z = restricted_lstsq(passive)
        while np.any(z[passive] <= 0):
            blocking = passive & (z <= 0)
            alpha = np.min(x[blocking] / (x[blocking] - z[blocking]))
            x = x + alpha * (z - x)
            passive &= x > tol
            x[~passive] = 0.0
            if not passive.any():
                z = np.zeros(n)
                break
            z = restricted_lstsq(passive)
        x = z
        w = C.T @ (d - C @ x)
    else:
        raise NumericFailure("NNLS did not converge within the iteration limit")
    return x


def is_power_of_two(n):
    n = int(n)
    return n > 0 and (n & (n - 1)) == 0


def _check_fft_input(x):
    x = np.asarray(x)
    if not is_power_of_two(x.shape[-1]):
        raise InvalidInputError(f"FFT length must be a power of two, got {x.shape[-1]}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("FFT input contains non-finite entries")
    return x


def fft(x):
    """Unnormalised forward DFT along the last axis (power-of-two lengths only)."""
    return np.fft.fft(_check_fft_input(x))


def ifft(X):
    """Inverse of :func:`fft`."""
    return np.fft.ifft(_check_fft_input(X))
