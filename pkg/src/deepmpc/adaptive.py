"""Outer-layer neuro-adaptive controller.

The adaptive control is ``u_a = -K' phi(x)``. After every plant step the
weights move along ``phi(x_t) u_tilde'`` where ``u_tilde = g(x_t)^+ r`` is the
part of the measured transition the nominal model did not explain, and each
column of ``K`` is then radially projected onto its norm ball.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from deepmpc.errors import DimensionError, InvalidInputError
from deepmpc.numerics import DEFAULT_RANK_TOL, pseudo_inverse


@dataclass(frozen=True)
class AdaptiveWeights:
    """Outer-layer weights ``K`` (``n_phi x m``) and their adaptation settings.

    Attributes:
        K: Current weight matrix.
        theta: Learning rate.
        col_bounds: Per-column norm bounds ``W_bar_i``.
        sigma: Bound on ``||phi(x)||``.
        eps_bar: Bound on the reconstruction error.
    """

    K: np.ndarray
    theta: float
    col_bounds: np.ndarray
    sigma: float
    eps_bar: float = 0.0

    def __post_init__(self):
        K = np.array(self.K, dtype=float, ndmin=2)
        bounds = np.atleast_1d(np.asarray(self.col_bounds, dtype=float))
        if bounds.size != K.shape[1]:
            raise DimensionError("need one column bound per control channel")
        if np.any(bounds < 0):
            raise InvalidInputError("column bounds must be non-negative")
        if self.theta <= 0:
            raise InvalidInputError("theta must be positive")
        K.setflags(write=False)
        bounds.setflags(write=False)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "col_bounds", bounds)

    @classmethod
    def zeros(cls, n_phi: int, m: int, theta: float, col_bounds, sigma: float,
              eps_bar: float = 0.0, strict: bool = False) -> "AdaptiveWeights":
        w = cls(np.zeros((n_phi, m)), theta, col_bounds, sigma, eps_bar)
        validate_learning_rate(w, strict=strict)
        return w

    @property
    def W_bar(self) -> float:
        """Sum of squared column bounds."""
        return float(np.sum(self.col_bounds ** 2))


def validate_learning_rate(w: AdaptiveWeights, strict: bool = False) -> bool:
    """Check ``theta * sigma^2 < 1``; warn (or raise when strict) otherwise."""
    ok = w.theta * w.sigma ** 2 < 1.0
    if not ok:
        msg = (f"theta*sigma^2 = {w.theta * w.sigma ** 2:.3f} >= 1; "
               "the mean-square adaptation bound does not apply")
        if strict:
            raise InvalidInputError(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return ok


@dataclass(frozen=True)
class FeatureMap:
    """Frozen feature basis ``phi`` with its norm bound."""

    evaluator: Callable[[np.ndarray], np.ndarray]
    n_phi: int
    sigma: float

    def __call__(self, x) -> np.ndarray:
        return np.asarray(self.evaluator(np.asarray(x, dtype=float)), dtype=float)


def adaptive_control(w: AdaptiveWeights, phi: FeatureMap | Callable, x) -> np.ndarray:
    phi_x = np.asarray(phi(x), dtype=float).reshape(-1)
    if phi_x.size != w.K.shape[0]:
        raise DimensionError("feature size does not match K")
    return -(w.K.T @ phi_x)


def project_columns(K_bar, col_bounds) -> np.ndarray:
    """Scale every column whose norm exceeds its bound back onto the sphere."""
    K_bar = np.array(K_bar, dtype=float, ndmin=2)
    bounds = np.atleast_1d(np.asarray(col_bounds, dtype=float))
    norms = np.linalg.norm(K_bar, axis=0)
    over = norms > bounds
    out = K_bar.copy()
    out[:, over] *= bounds[over] / norms[over]
    return out


def weight_update(w: AdaptiveWeights, phi_x, g_x, x_next, x_nominal_next,
                  rank_tol: float = DEFAULT_RANK_TOL) -> AdaptiveWeights:
    """One step of the discrete adaptation law followed by projection.

    ``u_tilde = g(x_t)^+ (x_{t+1} - f_bar(x_t, u_m))`` recovers
    ``u_a + h`` when ``g`` has full column rank; in that case
    ``K_bar = K + theta phi u_tilde'``. If ``g`` loses column rank the weights
    are kept.
    """
    return update_step(w, phi_x, g_x, x_next, x_nominal_next, rank_tol)[0]


def update_step(w: AdaptiveWeights, phi_x, g_x, x_next, x_nominal_next,
                rank_tol: float = DEFAULT_RANK_TOL):
    """Like :func:`weight_update` but also returns ``K_bar`` and ``u_tilde``.

    ``u_tilde`` is ``None`` on the rank-deficient branch.
    """
    phi_x = np.asarray(phi_x, dtype=float).reshape(-1)
    g_x = np.array(g_x, dtype=float, ndmin=2)
    r = np.asarray(x_next, dtype=float).reshape(-1) - np.asarray(x_nominal_next, dtype=float).reshape(-1)
    n_phi, m = w.K.shape
    if phi_x.size != n_phi or g_x.shape != (r.size, m):
        raise DimensionError("weight update shapes do not agree")
    g_pinv, rank = pseudo_inverse(g_x, rank_tol)
    if rank < m:
        K_bar, u_tilde = w.K, None
    else:
        u_tilde = g_pinv @ r
        K_bar = w.K + w.theta * np.outer(phi_x, u_tilde)
    return replace(w, K=project_columns(K_bar, w.col_bounds)), K_bar, u_tilde


def projection_inequality_check(K, K_bar, W_star, col_bounds, tol: float = 1e-12) -> bool:
    """Verify ``(K_i - W*_i)'(K_bar_i - K_i) >= -tol`` for every column.

    ``K`` is the projection of ``K_bar``; ``W_star`` must lie in the bound set.
    """
    K, K_bar, W_star = (np.array(M, dtype=float, ndmin=2) for M in (K, K_bar, W_star))
    bounds = np.atleast_1d(np.asarray(col_bounds, dtype=float))
    if np.any(np.linalg.norm(W_star, axis=0) > bounds * (1 + 1e-12)):
        raise InvalidInputError("W_star violates the column bounds")
    inner = np.sum((K - W_star) * (K_bar - K), axis=0)
    return bool(np.all(inner >= -tol))


def adaptive_sup_bound(w: AdaptiveWeights) -> float:
    """Largest possible ``||u_a||`` given the projection bounds and ``sigma``."""
    return float(np.sqrt(w.W_bar) * w.sigma)


def lemma1_bound(theta: float, sigma: float, W_bar_sum: float, eps_bar: float,
                 N: int | np.ndarray) -> float | np.ndarray:
    """Window bound ``N c0 eps_bar^2 + 4 c0 W_bar / theta``, ``c0 = 1/(1 - theta sigma^2)``."""
    ts2 = theta * sigma ** 2
    if ts2 >= 1.0:
        raise InvalidInputError(f"theta*sigma^2 = {ts2} must be < 1")
    c0 = 1.0 / (1.0 - ts2)
    return N * c0 * eps_bar ** 2 + 4.0 * c0 * W_bar_sum / theta


@dataclass(frozen=True)
class MeanSquareReport:
    passed: bool
    max_ratio: float
    worst_start: int
    worst_length: int


def windowed_ms_check(residuals, theta: float, sigma: float, W_bar_sum: float,
                      eps_bar: float, slack: float = 1e-9) -> MeanSquareReport:
    """Check the mean-square smallness bound over every window.

    For all starts ``k`` and lengths ``N`` the sum of ``||u_tilde_t||^2`` over
    ``t = k .. k+N-1`` must not exceed :func:`lemma1_bound` (plus ``slack``).
    """
    res = np.asarray(residuals, dtype=float)
    if res.ndim == 1:
        res = res[:, None]
    if not np.all(np.isfinite(res)):
        raise InvalidInputError("residuals must be finite")
    T = res.shape[0]
    if T == 0:
        return MeanSquareReport(True, 0.0, 0, 0)
    sq = np.sum(res ** 2, axis=1)
    csum = np.concatenate([[0.0], np.cumsum(sq)])
    best = (0.0, 0, 0)
    passed = True
    for k in range(T):
        lengths = np.arange(1, T - k + 1)
        sums = csum[k + 1:] - csum[k]
        bound = lemma1_bound(theta, sigma, W_bar_sum, eps_bar, lengths)
        if np.any(sums > bound + slack):
            passed = False
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(bound > 0, sums / bound, np.where(sums > 0, np.inf, 0.0))
        j = int(np.argmax(ratio))
        if ratio[j] > best[0]:
            best = (float(ratio[j]), k, int(lengths[j]))
    return MeanSquareReport(passed, *best)
