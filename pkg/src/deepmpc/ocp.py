"""Reference-tracking MPC, offline reference governor and their checks.

The online problem is condensed: states are eliminated through the
prediction matrices so the decision variable is the stacked control
sequence ``z`` and the only constraints are per-step boxes
``lower - u_a <= z_i <= upper - u_a``. Those box QPs are solved with an
accelerated projected gradient method.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from deepmpc.errors import CapabilityError, ConfigurationError, GovernorError, InvalidInputError
from deepmpc.plant import BoxConstraint, ControlAffineSystem


class SolverWarning(RuntimeWarning):
    pass


# ---------------------------------------------------------------------------
# Reference trajectory and costs


@dataclass(frozen=True)
class ReferenceTrajectory:
    """Stored reference with implicit zeros past its end.

    ``x_ref`` has one more row than ``u_ref``: the last stored state is the
    terminal state reached by the final stored control.
    """

    x_ref: np.ndarray
    u_ref: np.ndarray

    def __post_init__(self):
        x = np.array(self.x_ref, dtype=float, ndmin=2)
        u = np.array(self.u_ref, dtype=float, ndmin=2)
        if u.shape[0] not in (x.shape[0] - 1, 0) and x.shape[0] != 0:
            raise InvalidInputError("x_ref must hold exactly one more row than u_ref")
        x.setflags(write=False)
        u.setflags(write=False)
        object.__setattr__(self, "x_ref", x)
        object.__setattr__(self, "u_ref", u)

    @classmethod
    def zeros(cls, d: int, m: int) -> "ReferenceTrajectory":
        return cls(np.zeros((1, d)), np.zeros((0, m)))

    @property
    def d(self) -> int:
        return self.x_ref.shape[1]

    @property
    def m(self) -> int:
        return self.u_ref.shape[1]

    def __len__(self) -> int:
        return self.u_ref.shape[0]

    def state(self, t: int) -> np.ndarray:
        return self.x_ref[t].copy() if t < self.x_ref.shape[0] else np.zeros(self.d)

    def control(self, t: int) -> np.ndarray:
        return self.u_ref[t].copy() if t < self.u_ref.shape[0] else np.zeros(self.m)

    def states(self, t0: int, n: int) -> np.ndarray:
        return np.array([self.state(t0 + i) for i in range(n)]).reshape(n, self.d)

    def controls(self, t0: int, n: int) -> np.ndarray:
        return np.array([self.control(t0 + i) for i in range(n)]).reshape(n, self.m)


def _quad(v, M) -> float:
    v = np.asarray(v, dtype=float).reshape(-1)
    return float(v @ np.asarray(M, dtype=float) @ v)


def stage_cost(x, u, x_ref, u_ref, Q, R) -> float:
    return _quad(np.subtract(x, x_ref), Q) + _quad(np.subtract(u, u_ref), R)


def terminal_cost(x, Q_f, x_target=None) -> float:
    x = np.asarray(x, dtype=float)
    if x_target is not None:
        x = x - np.asarray(x_target, dtype=float)
    return _quad(x, Q_f)


def check_positive_definite(M, name: str) -> np.ndarray:
    M = np.array(M, dtype=float, ndmin=2)
    if M.shape[0] != M.shape[1] or not np.allclose(M, M.T, atol=1e-12):
        raise InvalidInputError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(M).min() <= 0:
        raise InvalidInputError(f"{name} must be positive definite")
    return M


# ---------------------------------------------------------------------------
# Box-constrained QP


@dataclass(frozen=True)
class QpResult:
    z: np.ndarray
    value: float
    residual: float
    iterations: int
    converged: bool


def projected_gradient_residual(H, q, z, lower, upper) -> float:
    grad = H @ z + q
    return float(np.max(np.abs(z - np.clip(z - grad, lower, upper)), initial=0.0))


def solve_box_qp(H, q, lower, upper, tol: float = 1e-9, max_iter: int = 50_000,
                 z0=None) -> QpResult:
    """Minimise ``0.5 z'Hz + q'z`` subject to ``lower <= z <= upper``.

    FISTA with step ``1/lambda_max(H)`` and gradient-based restart. The
    default start is the unconstrained minimiser clipped to the box. Stops
    once ``||z - clip(z - grad)||_inf <= tol``; hitting ``max_iter`` emits a
    :class:`SolverWarning` and returns the last iterate.
    """
    H = np.asarray(H, dtype=float)
    q = np.asarray(q, dtype=float).reshape(-1)
    lower = np.broadcast_to(np.asarray(lower, dtype=float), q.shape)
    upper = np.broadcast_to(np.asarray(upper, dtype=float), q.shape)
    if np.any(lower > upper):
        raise InvalidInputError("QP box is empty")
    if q.size == 0:
        return QpResult(q.copy(), 0.0, 0.0, 0, True)
    eig = np.linalg.eigvalsh(H)
    if eig[0] <= 0:
        raise InvalidInputError("QP Hessian must be positive definite")
    L = eig[-1]
    if z0 is None:
        z0 = np.linalg.solve(H, -q)
    z = np.clip(np.asarray(z0, dtype=float).reshape(-1), lower, upper)
    y = z.copy()
    t = 1.0
    residual = projected_gradient_residual(H, q, z, lower, upper)
    it = 0
    while residual > tol and it < max_iter:
        it += 1
        z_new = np.clip(y - (H @ y + q) / L, lower, upper)
        if (y - z_new) @ (z_new - z) > 0:
            t = 1.0
            y = z_new
        else:
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = z_new + ((t - 1.0) / t_new) * (z_new - z)
            t = t_new
        z = z_new
        residual = projected_gradient_residual(H, q, z, lower, upper)
    converged = residual <= tol
    if not converged:
        warnings.warn(f"box QP stopped at max_iter={max_iter} with residual {residual:.3e}",
                      SolverWarning, stacklevel=2)
    value = float(0.5 * z @ H @ z + q @ z)
    return QpResult(z, value, residual, it, converged)


# ---------------------------------------------------------------------------
# Prediction matrices


def prediction_matrices(A, B, N: int, c=None):
    """Stacked prediction ``X = Phi x0 + Gamma z + gamma`` for ``x_1..x_N``."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    d, m = B.shape
    c = np.zeros(d) if c is None else np.asarray(c, dtype=float).reshape(d)
    Phi = np.zeros((N * d, d))
    Gamma = np.zeros((N * d, N * m))
    gamma = np.zeros(N * d)
    Ak = np.eye(d)
    powers = [np.eye(d)]
    for k in range(1, N + 1):
        Ak = A @ Ak
        powers.append(Ak)
    acc = np.zeros(d)
    for k in range(1, N + 1):
        Phi[(k - 1) * d:k * d] = powers[k]
        acc = A @ acc + c
        gamma[(k - 1) * d:k * d] = acc
        for j in range(k):
            Gamma[(k - 1) * d:k * d, j * m:(j + 1) * m] = powers[k - 1 - j] @ B
    return Phi, Gamma, gamma


def rollout(A, B, x0, z, c=None) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    d, m = B.shape
    c = np.zeros(d) if c is None else np.asarray(c, dtype=float).reshape(d)
    U = np.asarray(z, dtype=float).reshape(-1, m)
    xs = [np.asarray(x0, dtype=float).reshape(d)]
    for u in U:
        xs.append(A @ xs[-1] + B @ u + c)
    return np.array(xs)


# ---------------------------------------------------------------------------
# Online tracking MPC


@dataclass(frozen=True)
class MpcProblem:
    """Tracking OCP at time ``t``.

    ``terminal_mode`` is ``"reference"`` (terminal cost on
    ``x_N - x_ref_{t+N}``) or ``"origin"`` (terminal cost ``x_N' Q_f x_N``).
    ``c`` is an optional affine term of the prediction model.
    """

    N: int
    Q: np.ndarray
    R: np.ndarray
    Q_f: np.ndarray
    A: np.ndarray
    B: np.ndarray
    reference: ReferenceTrajectory
    control_box: BoxConstraint
    u_a_current: np.ndarray = None
    t: int = 0
    terminal_mode: str = "reference"
    c: Optional[np.ndarray] = None
    qp_tol: float = 1e-9
    qp_max_iter: int = 50_000

    def __post_init__(self):
        if self.N < 1:
            raise InvalidInputError("horizon must be positive")
        for name in ("Q", "R", "Q_f"):
            object.__setattr__(self, name, check_positive_definite(getattr(self, name), name))
        m = np.asarray(self.B).shape[1]
        ua = np.zeros(m) if self.u_a_current is None else np.asarray(self.u_a_current, dtype=float).reshape(m)
        object.__setattr__(self, "u_a_current", ua)
        if self.terminal_mode not in ("reference", "origin"):
            raise InvalidInputError(f"unknown terminal mode {self.terminal_mode!r}")

    @classmethod
    def for_system(cls, sys: ControlAffineSystem, x_t, **kwargs) -> "MpcProblem":
        """Build the problem from a system, linearising once at ``x_t`` if needed."""
        if sys.is_linear:
            return cls(A=sys.A, B=sys.B, control_box=kwargs.pop("control_box", sys.control_box), **kwargs)
        if sys.linearize is None:
            raise CapabilityError("nonlinear system has no linearisation provider")
        A, B, c = sys.linearize(np.asarray(x_t, dtype=float))
        return cls(A=A, B=B, c=c, control_box=kwargs.pop("control_box", sys.control_box), **kwargs)


@dataclass(frozen=True)
class CondensedQp:
    H: np.ndarray
    q: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    const: float

    @property
    def box(self) -> BoxConstraint:
        return BoxConstraint(self.lower, self.upper)


def build_condensed_qp(p: MpcProblem, x0) -> CondensedQp:
    """Eliminate the states; the objective is ``0.5 z'Hz + q'z + const``."""
    A, B = np.asarray(p.A, dtype=float), np.asarray(p.B, dtype=float)
    d, m = B.shape
    N = p.N
    x0 = np.asarray(x0, dtype=float).reshape(d)
    Phi, Gamma, gamma = prediction_matrices(A, B, N, p.c)
    targets = p.reference.states(p.t + 1, N)
    if p.terminal_mode == "origin":
        targets[-1] = 0.0
    u_targets = p.reference.controls(p.t, N).reshape(-1)
    Qbar = np.zeros((N * d, N * d))
    for k in range(N - 1):
        Qbar[k * d:(k + 1) * d, k * d:(k + 1) * d] = p.Q
    Qbar[(N - 1) * d:, (N - 1) * d:] = p.Q_f
    Rbar = np.kron(np.eye(N), p.R)
    E = Phi @ x0 + gamma - targets.reshape(-1)
    GtQ = Gamma.T @ Qbar
    H = 2.0 * (GtQ @ Gamma + Rbar)
    H = 0.5 * (H + H.T)
    q = 2.0 * (GtQ @ E - Rbar @ u_targets)
    const = (_quad(x0 - p.reference.state(p.t), p.Q) + float(E @ Qbar @ E)
             + float(u_targets @ Rbar @ u_targets))
    lo = np.tile(p.control_box.lower - p.u_a_current, N)
    hi = np.tile(p.control_box.upper - p.u_a_current, N)
    if np.any(lo > hi):
        raise ConfigurationError("shifted control box is empty")
    return CondensedQp(H, q, lo, hi, const)


@dataclass(frozen=True)
class MpcSolution:
    u_seq: np.ndarray
    x_pred: np.ndarray
    value: float
    solver_residual: float
    iterations: int
    converged: bool = True

    @property
    def u_first(self) -> np.ndarray:
        return self.u_seq[0].copy()


def solve_mpc(p: MpcProblem, x0, warm_start=None) -> MpcSolution:
    qp = build_condensed_qp(p, x0)
    res = solve_box_qp(qp.H, qp.q, qp.lower, qp.upper, tol=p.qp_tol,
                       max_iter=p.qp_max_iter, z0=warm_start)
    m = np.asarray(p.B).shape[1]
    u_seq = res.z.reshape(p.N, m)
    x_pred = rollout(p.A, p.B, x0, res.z, p.c)
    value = max(res.value + qp.const, 0.0)
    return MpcSolution(u_seq, x_pred, value, res.residual, res.iterations, res.converged)


def value_function(p: MpcProblem, x) -> float:
    return solve_mpc(p, x).value


def lemma3_residual(p: MpcProblem, x_t, u_m) -> float:
    """``V(x_{t+1|t}) - V(x_t) + c_s(x_t, u_m)`` with ``V`` re-solved at ``t+1``."""
    x_t = np.asarray(x_t, dtype=float)
    u_m = np.asarray(u_m, dtype=float).reshape(-1)
    c = np.zeros(x_t.size) if p.c is None else p.c
    x_next = np.asarray(p.A) @ x_t + np.asarray(p.B) @ u_m + c
    v_now = value_function(p, x_t)
    v_next = value_function(replace(p, t=p.t + 1), x_next)
    cs = stage_cost(x_t, u_m, p.reference.state(p.t), p.reference.control(p.t), p.Q, p.R)
    return v_next - v_now + cs


def lipschitz_probe(p: MpcProblem, x, directions, radius: float) -> float:
    """Secant slope bound of the (convex) value function around ``x``.

    For every unit direction the increase ``V(x + s d) - V(x)`` over
    ``|s| <= radius`` is at most ``|s|`` times the returned constant.
    """
    v0 = value_function(p, x)
    best = 0.0
    for d in directions:
        d = np.asarray(d, dtype=float)
        d = d / np.linalg.norm(d)
        for sgn in (1.0, -1.0):
            slope = (value_function(p, x + sgn * radius * d) - v0) / radius
            best = max(best, slope)
    return best


# ---------------------------------------------------------------------------
# Constraint tightening


@dataclass(frozen=True)
class TighteningSpec:
    state_margin: np.ndarray
    control_margin_adaptive: float
    control_margin_robust: float


@dataclass(frozen=True)
class TightenedSets:
    X_r: BoxConstraint
    U_r: BoxConstraint
    U_prime: BoxConstraint
    w_prime_max: float


def tighten_boxes(state_box: BoxConstraint, control_box: BoxConstraint, u_max_a: float,
                  w_prime_max: float, state_margin=0.0,
                  control_margin: float = 0.0) -> TightenedSets:
    """Shrink the control box by ``u_max_a`` and apply the configured margins."""
    u_max = float(np.min(control_box.upper))
    if not u_max_a < u_max:
        raise ConfigurationError(f"adaptive bound {u_max_a:.4g} leaves no control authority "
                                 f"(u_max = {u_max:.4g})")
    try:
        U_prime = control_box.shrink(u_max_a)
        U_r = U_prime.shrink(control_margin)
        X_r = state_box.shrink(state_margin)
    except InvalidInputError as exc:
        raise ConfigurationError(str(exc)) from exc
    return TightenedSets(X_r, U_r, U_prime, float(w_prime_max))


def matched_disturbance_box(B, u_max_a: float, h_max: float) -> np.ndarray:
    """Per-coordinate bound on ``g (u_a + h)`` for a constant input matrix."""
    B = np.asarray(B, dtype=float)
    return np.abs(B) @ np.full(B.shape[1], u_max_a + h_max)


def default_state_margin(A, B, K_lqr, w_box, N: int) -> np.ndarray:
    """``sum_{k<N} |A_K^k| w_box`` with ``A_K = A - B K_lqr``.

    Box outer bound of the error reachable under the LQR feedback within
    ``N`` steps; conservative in place of a polytopic invariant set.
    """
    AK = np.asarray(A) - np.asarray(B) @ np.asarray(K_lqr)
    M = np.eye(AK.shape[0])
    S = np.zeros_like(M)
    for _ in range(N):
        S += np.abs(M)
        M = AK @ M
    return S @ np.asarray(w_box, dtype=float)


# ---------------------------------------------------------------------------
# Reference governor


def reference_governor(A, B, x0, X_r: BoxConstraint, U_r: BoxConstraint, N_r: int,
                       Q, R, tol: float = 1e-9, rho: float = 1e3,
                       max_outer: int = 200) -> ReferenceTrajectory:
    """Plan a nominal trajectory from ``x0`` to the origin inside ``X_r x U_r``.

    Minimises ``sum ||x_i||_Q^2 + ||u_i||_R^2`` with a terminal equality
    ``x_{N_r} = 0``. The state boxes and the terminal equality enter an
    augmented Lagrangian; each inner problem is a box QP over the stacked
    controls. The states are rebuilt from the controls, so the returned
    trajectory satisfies the nominal recursion exactly.

    Raises:
        GovernorError: the multipliers fail to drive violations below ``tol``.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    Q = check_positive_definite(Q, "Q")
    R = check_positive_definite(R, "R")
    d, m = B.shape
    x0 = np.asarray(x0, dtype=float).reshape(d)
    if not X_r.contains(x0):
        raise GovernorError("initial state lies outside the tightened state box")
    if np.all(x0 == 0):
        return ReferenceTrajectory(np.zeros((N_r + 1, d)), np.zeros((N_r, m)))

    Phi, Gamma, _ = prediction_matrices(A, B, N_r)
    free = Phi @ x0
    # Cost on x_1..x_{N_r-1}; x_{N_r} is pinned by the equality.
    n_s = (N_r - 1) * d
    Gs, es = Gamma[:n_s], free[:n_s]
    Ct, et = Gamma[n_s:], free[n_s:]
    Qbar = np.kron(np.eye(N_r - 1), Q)
    Rbar = np.kron(np.eye(N_r), R)
    H0 = 2.0 * (Gs.T @ Qbar @ Gs + Rbar)
    q0 = 2.0 * (Gs.T @ Qbar @ es)

    # Internal shrink keeps the AL's asymptotic feasibility strictly inside.
    inner = 1e-9
    lo_s = np.tile(X_r.lower + inner, N_r - 1)
    hi_s = np.tile(X_r.upper - inner, N_r - 1)
    G_in = np.vstack([Gs, -Gs])
    h_in = np.concatenate([hi_s - es, es - lo_s])
    lo_u = np.tile(U_r.lower, N_r)
    hi_u = np.tile(U_r.upper, N_r)

    lam = np.zeros(d)
    mu = np.zeros(G_in.shape[0])
    z = None
    worst = np.inf
    for _ in range(max_outer):
        for _inner in range(20):
            g_prev = G_in @ z - h_in if z is not None else -h_in
            active = (mu + rho * g_prev) > 0
            Ga = G_in[active]
            H = H0 + rho * (Ct.T @ Ct) + rho * (Ga.T @ Ga)
            q = q0 + Ct.T @ (lam + rho * et) + Ga.T @ (mu[active] - rho * h_in[active])
            res = solve_box_qp(H, q, lo_u, hi_u, tol=1e-12 * max(1.0, np.abs(q).max()),
                               max_iter=200_000, z0=z)
            z = res.z
            new_active = (mu + rho * (G_in @ z - h_in)) > 0
            if np.array_equal(new_active, active):
                break
        eq = Ct @ z + et
        g = G_in @ z - h_in
        lam = lam + rho * eq
        mu = np.maximum(0.0, mu + rho * g)
        worst = max(float(np.max(np.abs(eq))), float(np.max(g, initial=0.0)))
        if worst <= tol:
            break
    xs = rollout(A, B, x0, z)
    ref = ReferenceTrajectory(xs, z.reshape(N_r, m))
    term = float(np.max(np.abs(xs[-1])))
    box_ok = all(X_r.contains(x) for x in xs[:-1]) and all(U_r.contains(u) for u in ref.u_ref)
    if term > tol or not box_ok:
        raise GovernorError(f"governor infeasible: terminal {term:.3e}, boxes ok={box_ok}",
                            max(term, worst))
    return ref


# ---------------------------------------------------------------------------
# Terminal ingredient check


def assumption2_residual(A, B, Q_f, Q, R, K_lqr, samples, U_prime: Optional[BoxConstraint] = None) -> float:
    """Worst ``c_f(A x + B u') + c_s(x, u') - c_f(x)`` over the samples.

    ``u' = -K_lqr x``, clipped to ``U_prime`` when it is given; the reference
    is the origin.
    """
    A, B, Q_f, Q, R, K = (np.asarray(M, dtype=float) for M in (A, B, Q_f, Q, R, K_lqr))
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    U = -(X @ K.T)
    if U_prime is not None:
        U = np.clip(U, U_prime.lower, U_prime.upper)
    Xn = X @ A.T + U @ B.T
    vals = (np.einsum("ij,jk,ik->i", Xn, Q_f, Xn) + np.einsum("ij,jk,ik->i", X, Q, X)
            + np.einsum("ij,jk,ik->i", U, R, U) - np.einsum("ij,jk,ik->i", X, Q_f, X))
    return float(vals.max())


def terminal_region_samples(P, K_lqr, U_prime: BoxConstraint, n: int,
                            rng: np.random.Generator) -> np.ndarray:
    """Uniform samples of the largest level set of ``x'Px`` on which ``-K x`` fits ``U'``."""
    P = np.asarray(P, dtype=float)
    K = np.asarray(K_lqr, dtype=float)
    P_inv = np.linalg.inv(P)
    u_lim = np.minimum(-U_prime.lower, U_prime.upper)
    # max of |k_i x| over x'Px <= c is sqrt(c k_i P^-1 k_i').
    c = float(np.min(u_lim ** 2 / np.einsum("ij,jk,ik->i", K, P_inv, K)))
    d = P.shape[0]
    L = np.linalg.cholesky(P_inv * c)
    g = rng.normal(size=(n, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = rng.random(n) ** (1.0 / d)
    return (g * r[:, None]) @ L.T
