"""Dense linear algebra helpers and seeded sampling.

Matrices are plain ``numpy`` arrays of dtype float64. Every routine here is
pure except :class:`TruncatedNormalSampler`, which owns its generator state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from deepmpc.errors import InvalidInputError, SolverError

DEFAULT_RANK_TOL = 1e-10


def as_matrix(M) -> np.ndarray:
    """Return ``M`` as a finite 2-D float array or raise."""
    arr = np.array(M, dtype=float, ndmin=2)
    if arr.ndim != 2:
        raise InvalidInputError(f"expected a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("matrix has non-finite entries")
    return arr


def pseudo_inverse(M, rank_tol: float = DEFAULT_RANK_TOL) -> tuple[np.ndarray, int]:
    """Moore-Penrose pseudo-inverse through the SVD.

    Singular values below ``rank_tol * sigma_max`` are treated as zero.

    Returns:
        ``(M_pinv, rank)`` where ``rank`` counts the retained singular values.
    """
    if rank_tol <= 0:
        raise InvalidInputError("rank_tol must be positive")
    M = as_matrix(M)
    rows, cols = M.shape
    if M.size == 0:
        return np.zeros((cols, rows)), 0
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    if s[0] == 0.0:
        return np.zeros((cols, rows)), 0
    keep = s > rank_tol * s[0]
    rank = int(np.count_nonzero(keep))
    inv_s = np.zeros_like(s)
    inv_s[keep] = 1.0 / s[keep]
    return (Vt.T * inv_s) @ U.T, rank


def min_singular_value(M) -> float:
    """Smallest singular value of ``M`` (rows are samples)."""
    M = as_matrix(M)
    if M.size == 0:
        raise InvalidInputError("matrix is empty")
    s = np.linalg.svd(M, compute_uv=False)
    # A tall k x n matrix with k < n has n - k implicit zero singular values.
    if M.shape[0] < M.shape[1]:
        return 0.0
    return float(max(s[-1], 0.0))


def riccati_map(P, A, B, Q, R) -> np.ndarray:
    """One application of the discrete Riccati operator."""
    BtP = B.T @ P
    gain = np.linalg.solve(R + BtP @ B, BtP @ A)
    return Q + A.T @ P @ A - A.T @ P @ B @ gain


def dare_residual(P, A, B, Q, R) -> float:
    """Induced infinity-norm of ``P - riccati_map(P)``."""
    return float(np.linalg.norm(P - riccati_map(P, A, B, Q, R), np.inf))


def dare_solve(A, B, Q, R, tol: float = 1e-10,
               max_iter: int = 10_000) -> tuple[np.ndarray, np.ndarray]:
    """Solve the discrete algebraic Riccati equation by fixed-point iteration.

    Starting from ``P = Q`` the Riccati operator is applied until
    ``||P - F(P)||_inf <= tol``.

    Returns:
        ``(P, K_lqr)`` with ``K_lqr = (R + B'PB)^{-1} B'PA`` so that
        ``u = -K_lqr x`` is the infinite-horizon LQR feedback.

    Raises:
        SolverError: the residual did not reach ``tol`` in ``max_iter`` steps.
    """
    A, B, Q, R = (as_matrix(M) for M in (A, B, Q, R))
    for S, name in ((Q, "Q"), (R, "R")):
        if not np.allclose(S, S.T) or np.linalg.eigvalsh(S).min() <= 0:
            raise InvalidInputError(f"{name} must be symmetric positive definite")
    P = Q.copy()
    residual = np.inf
    for _ in range(max_iter):
        P_next = riccati_map(P, A, B, Q, R)
        residual = float(np.linalg.norm(P - P_next, np.inf))
        if not np.isfinite(residual):
            break
        if residual <= tol:
            break
        P = 0.5 * (P_next + P_next.T)
    else:
        raise SolverError(f"DARE iteration did not converge in {max_iter} steps "
                          f"(residual {residual:.3e})", residual)
    if not residual <= tol:
        raise SolverError("DARE iteration diverged", residual)
    BtP = B.T @ P
    K = np.linalg.solve(R + BtP @ B, BtP @ A)
    return P, K


@dataclass
class TruncatedNormalSampler:
    """Normal distribution restricted to ``[lo, hi]``.

    Draws come from rejection against the base normal. When the acceptance
    window carries almost no mass, sampling falls back to the inverse CDF so
    that degenerate windows still return values inside the support.
    """

    mean: float
    stddev: float
    lo: float
    hi: float
    rng_seed: int = 0
    max_rejections: int = 1000
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if not self.lo < self.hi:
            raise InvalidInputError("truncated normal needs lo < hi")
        if self.stddev < 0:
            raise InvalidInputError("stddev must be non-negative")
        self._rng = np.random.default_rng(np.uint64(self.rng_seed))

    def _inverse_cdf(self, u: float) -> float:
        a = ndtr((self.lo - self.mean) / self.stddev)
        b = ndtr((self.hi - self.mean) / self.stddev)
        value = self.mean + self.stddev * ndtri(a + u * (b - a))
        if not np.isfinite(value):
            value = self.lo if a + u * (b - a) <= 0.5 else self.hi
        return float(min(max(value, self.lo), self.hi))

    def sample(self) -> float:
        if self.stddev == 0.0:
            return float(min(max(self.mean, self.lo), self.hi))
        for _ in range(self.max_rejections):
            s = self._rng.normal(self.mean, self.stddev)
            if self.lo <= s <= self.hi:
                return float(s)
        return self._inverse_cdf(self._rng.random())

    def sample_many(self, n: int) -> np.ndarray:
        """Draw ``n`` samples with vectorised rejection (own stream order)."""
        out = np.empty(n)
        filled = 0
        while filled < n:
            if self.stddev == 0.0:
                out[filled:] = min(max(self.mean, self.lo), self.hi)
                break
            draw = self._rng.normal(self.mean, self.stddev, size=2 * (n - filled) + 16)
            ok = draw[(draw >= self.lo) & (draw <= self.hi)]
            if ok.size == 0:
                out[filled] = self._inverse_cdf(self._rng.random())
                filled += 1
                continue
            take = min(ok.size, n - filled)
            out[filled:filled + take] = ok[:take]
            filled += take
        return out


def sample_truncated_normal(sampler: TruncatedNormalSampler) -> float:
    return sampler.sample()
