"""Small dense linear algebra on float64 numpy arrays.

Matrices are plain ``numpy.ndarray`` objects (row-major, float64).  Every
routine here also accepts a stack of matrices with arbitrary leading batch
dimensions, which is how the Kalman code processes many sequences at once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DimensionError, NumericalError

JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6)

# Pade(13) coefficients and the 1-norm bound theta_13 (Higham 2005).
_PADE13 = np.array([
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
    1187353796428800.0, 129060195264000.0, 10559470521600.0,
    670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
    960960.0, 16380.0, 182.0, 1.0,
])
THETA_13 = 5.371920351148152


def _check_square(M: np.ndarray, name: str = "matrix") -> None:
    if M.ndim < 2 or M.shape[-1] != M.shape[-2]:
        raise DimensionError(f"{name} must be square, got shape {M.shape}")


def _check_finite(M: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(M)):
        raise NumericalError(f"{name} contains non-finite entries")


def matexp(M) -> np.ndarray:
    """Matrix exponential by scaling and squaring with a degree-13 Pade approximant.

    The scaling power ``s`` is the smallest integer with ``||M / 2**s||_1 <= theta_13``;
    for a batch of matrices one common ``s`` is used.
    """
    M = np.asarray(M, dtype=np.float64)
    _check_square(M)
    _check_finite(M, "matexp input")
    n = M.shape[-1]
    norm = np.max(np.abs(M).sum(axis=-2), axis=-1) if M.size else np.zeros(M.shape[:-2])
    max_norm = float(np.max(norm)) if np.size(norm) else 0.0
    if max_norm == 0.0:
        return np.broadcast_to(np.eye(n), M.shape).copy()
    s = 0
    if max_norm > THETA_13:
        s = int(np.ceil(np.log2(max_norm / THETA_13)))
    A = M / (2.0 ** s)
    b = _PADE13
    eye = np.broadcast_to(np.eye(n), A.shape)
    A2 = A @ A
    A4 = A2 @ A2
    A6 = A4 @ A2
    U = A @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2) + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * eye)
    V = A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2) + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * eye
    R = np.linalg.solve(V - U, V + U)
    for _ in range(s):
        R = R @ R
    return R


@dataclass(frozen=True)
class CholFactor:
    """Lower Cholesky factor of ``source + jitter * I``."""

    lower: np.ndarray
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return self.lower.shape[-1]

    def reconstruct(self) -> np.ndarray:
        return self.lower @ np.swapaxes(self.lower, -1, -2)

    def logdet(self) -> np.ndarray:
        return 2.0 * np.sum(np.log(np.diagonal(self.lower, axis1=-2, axis2=-1)), axis=-1)


def cholesky(M, jitters=JITTER_LADDER, sym_tol: float = 1e-10) -> CholFactor:
    """Cholesky factor with escalating diagonal jitter.

    Tries each value in ``jitters`` in turn and returns the first success.
    Raises :class:`NumericalError` (carrying the last jitter tried) if the
    matrix is still not positive definite.
    """
    M = np.asarray(M, dtype=np.float64)
    _check_square(M)
    _check_finite(M, "cholesky input")
    asym = np.max(np.abs(M - np.swapaxes(M, -1, -2))) if M.size else 0.0
    scale = max(float(np.max(np.abs(M))) if M.size else 0.0, 1e-300)
    if asym > sym_tol * scale:
        raise DimensionError(f"cholesky input is not symmetric (max asymmetry {asym:.3e})")
    eye = np.eye(M.shape[-1])
    for jitter in jitters:
        try:
            lower = np.linalg.cholesky(M + jitter * eye if jitter else M)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(lower)):
            return CholFactor(lower, float(jitter))
    raise NumericalError(f"matrix not positive definite after jitter {jitters[-1]:g}",
                         jitter=float(jitters[-1]))


def solve_psd(chol: CholFactor, B) -> np.ndarray:
    """Solve ``(L L^T) X = B`` by forward and back substitution."""
    B = np.asarray(B, dtype=np.float64)
    Lw = chol.lower
    vector = B.ndim == Lw.ndim - 1
    Bm = B[..., None] if vector else B
    if Bm.shape[-2] != Lw.shape[-1]:
        raise DimensionError(f"solve_psd: factor is {Lw.shape[-2:]}, right-hand side {B.shape}")
    if Lw.ndim == 2 and Bm.ndim == 2:
        Y = scipy.linalg.solve_triangular(Lw, Bm, lower=True)
        X = scipy.linalg.solve_triangular(Lw.T, Y, lower=False)
    else:
        # batched: LAPACK has no batched triangular solve, fall back to generic solve
        Y = np.linalg.solve(Lw, Bm)
        X = np.linalg.solve(np.swapaxes(Lw, -1, -2), Y)
    return X[..., 0] if vector else X


def kron(A, B) -> np.ndarray:
    """Kronecker product of two matrices."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    return np.kron(A, B)


def symmetrize(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))
