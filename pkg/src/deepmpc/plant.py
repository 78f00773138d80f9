"""Control-affine plant model and the wing-rock benchmark.

The true plant is ``x+ = f(x) + g(x) (u + h(x, t))`` with ``h`` a matched,
bounded uncertainty. Controllers only see the nominal map
``f(x) + g(x) u``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from deepmpc.errors import DimensionError, InvalidInputError
from deepmpc.numerics import TruncatedNormalSampler


@dataclass(frozen=True)
class BoxConstraint:
    """Axis-aligned box ``lower <= v <= upper``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape:
            raise DimensionError("box bounds have different shapes")
        if np.any(lo > hi):
            raise InvalidInputError("box has lower > upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def symmetric(cls, half_widths) -> "BoxConstraint":
        w = np.atleast_1d(np.asarray(half_widths, dtype=float))
        return cls(-w, w)

    @property
    def dim(self) -> int:
        return self.lower.size

    def contains(self, v) -> bool:
        v = np.asarray(v, dtype=float)
        return bool(np.all(v >= self.lower) and np.all(v <= self.upper))

    def shrink(self, margin) -> "BoxConstraint":
        """Pull every face inward by ``margin`` (scalar or per coordinate)."""
        m = np.broadcast_to(np.asarray(margin, dtype=float), self.lower.shape)
        if np.any(m < 0):
            raise InvalidInputError("tightening margins must be non-negative")
        lo, hi = self.lower + m, self.upper - m
        if np.any(lo > hi):
            raise InvalidInputError("tightened box is empty")
        return BoxConstraint(lo, hi)

    def shift(self, offset) -> "BoxConstraint":
        off = np.asarray(offset, dtype=float)
        return BoxConstraint(self.lower + off, self.upper + off)

    def project(self, v) -> np.ndarray:
        return np.clip(v, self.lower, self.upper)


@dataclass(frozen=True)
class ControlAffineSystem:
    """Discrete-time system ``x+ = f(x) + g(x) u`` with constraint boxes.

    ``A``/``B`` are set for linear systems. A nonlinear plant can instead
    supply ``linearize(x) -> (A, B, c)`` giving ``x+ ~ A x + B u + c`` near
    ``x``.
    """

    d: int
    m: int
    f: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    delta_g: float
    state_box: BoxConstraint
    control_box: BoxConstraint
    w_max: float
    A: Optional[np.ndarray] = None
    B: Optional[np.ndarray] = None
    linearize: Optional[Callable[[np.ndarray], tuple]] = None

    @property
    def is_linear(self) -> bool:
        return self.A is not None and self.B is not None

    def g_at(self, x) -> np.ndarray:
        G = np.asarray(self.g(x), dtype=float).reshape(self.d, self.m)
        return G


def linear_system(A, B, state_box: BoxConstraint, control_box: BoxConstraint,
                  w_max: float) -> ControlAffineSystem:
    A = np.array(A, dtype=float, ndmin=2)
    B = np.array(B, dtype=float, ndmin=2)
    d, m = B.shape
    if A.shape != (d, d):
        raise DimensionError("A must be d x d with d = rows of B")
    A.setflags(write=False)
    B.setflags(write=False)
    return ControlAffineSystem(
        d=d, m=m,
        f=lambda x: A @ x,
        g=lambda x: B,
        delta_g=float(np.linalg.norm(B, 2)),
        state_box=state_box, control_box=control_box, w_max=float(w_max),
        A=A, B=B,
    )


def _check_dims(sys: ControlAffineSystem, x, u):
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    if x.size != sys.d:
        raise DimensionError(f"state has size {x.size}, expected {sys.d}")
    if u.size != sys.m:
        raise DimensionError(f"control has size {u.size}, expected {sys.m}")
    return x, u


def nominal_step(sys: ControlAffineSystem, x, u_m) -> np.ndarray:
    """Nominal prediction ``f(x) + g(x) u_m``."""
    x, u_m = _check_dims(sys, x, u_m)
    return np.asarray(sys.f(x), dtype=float) + sys.g_at(x) @ u_m


def apply_dynamics(sys: ControlAffineSystem, x, u_total, h) -> np.ndarray:
    """True transition for a given uncertainty value ``h``."""
    x, u_total = _check_dims(sys, x, u_total)
    h = np.broadcast_to(np.asarray(h, dtype=float).reshape(-1), (sys.m,))
    return np.asarray(sys.f(x), dtype=float) + sys.g_at(x) @ (u_total + h)


class Sampler(Protocol):
    def sample(self) -> float: ...


# Matched uncertainty of the wing-rock benchmark.
WING_ROCK_V0 = np.array([0.8, 0.2314, 0.6918, -0.6245, 0.0095, 0.0214])
WING_ROCK_OMEGA0 = 0.457
WING_ROCK_SCHEDULE = ((0, 49, 4.0), (100, 149, 4.0))


@dataclass
class WingRockUncertainty:
    """``h(x, t) = v_t V0' sat(s(x)) + omega`` with truncated-normal omega.

    ``schedule`` lists inclusive ``(t_start, t_end, multiplier)`` intervals;
    the multiplier is zero outside them. A fresh ``omega`` is drawn on every
    call of :func:`uncertainty_eval`.
    """

    V0: np.ndarray = field(default_factory=lambda: WING_ROCK_V0.copy())
    omega0: float = WING_ROCK_OMEGA0
    sat_threshold: Optional[float] = None
    schedule: Sequence[tuple] = WING_ROCK_SCHEDULE
    sampler: Optional[Sampler] = None
    noise_stddev: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        self.V0 = np.asarray(self.V0, dtype=float).reshape(-1)
        if self.V0.size != 6:
            raise DimensionError("V0 must have 6 entries")
        if self.sat_threshold is None:
            self.sat_threshold = self.omega0 / 10.0
        spans = sorted((int(a), int(b)) for a, b, _ in self.schedule)
        for (a0, b0), (a1, _) in zip(spans, spans[1:]):
            if a1 <= b0:
                raise InvalidInputError("schedule intervals overlap")
        if self.sampler is None:
            sd = self.omega0 / 2.0 if self.noise_stddev is None else self.noise_stddev
            if self.omega0 > 0:
                self.sampler = TruncatedNormalSampler(0.0, sd, -self.omega0, self.omega0,
                                                      rng_seed=self.seed)
            else:
                self.sampler = _ZeroSampler()

    @property
    def h_max(self) -> float:
        """Analytic bound on ``|h|`` over all states and times."""
        v_max = max([abs(v) for _, _, v in self.schedule] + [0.0])
        return v_max * float(np.abs(self.V0).sum()) * self.sat_threshold + self.omega0


class _ZeroSampler:
    def sample(self) -> float:
        return 0.0


def multiplier_at(unc: WingRockUncertainty, t: int) -> float:
    if t < 0:
        raise InvalidInputError("time step must be non-negative")
    for start, end, value in unc.schedule:
        if start <= t <= end:
            return float(value)
    return 0.0


def raw_regressor(x) -> np.ndarray:
    delta, p = np.asarray(x, dtype=float).reshape(-1)[:2]
    return np.array([1.0, delta, p, abs(delta) * p, abs(p) * p, delta ** 3])


def regressor(unc: WingRockUncertainty, x) -> np.ndarray:
    """Saturated regressor, each entry clipped to ``+-sat_threshold``."""
    return np.clip(raw_regressor(x), -unc.sat_threshold, unc.sat_threshold)


def structured_part(unc: WingRockUncertainty, x, t: int) -> float:
    return multiplier_at(unc, t) * float(unc.V0 @ regressor(unc, x))


def uncertainty_eval(unc: WingRockUncertainty, x, t: int) -> float:
    """One realisation of ``h(x, t)``; consumes one noise sample."""
    return structured_part(unc, x, t) + float(unc.sampler.sample())


def true_step(sys: ControlAffineSystem, unc: WingRockUncertainty, x, u_total,
              t: int) -> np.ndarray:
    return apply_dynamics(sys, x, u_total, uncertainty_eval(unc, x, t))


def wing_rock_system(unc: Optional[WingRockUncertainty] = None) -> ControlAffineSystem:
    """The benchmark wing-rock model with its constraint boxes.

    ``w_max`` is the analytic bound ``||B|| * h_max`` for ``unc`` (defaults to
    the benchmark uncertainty).
    """
    A = np.array([[1.0, 0.05], [0.0, 1.0]])
    B = np.array([[0.0], [0.05]])
    unc = unc if unc is not None else WingRockUncertainty(sampler=_ZeroSampler())
    state_box = BoxConstraint.symmetric([np.pi / 6, np.pi / 2])
    control_box = BoxConstraint.symmetric([np.pi / 2])
    w_max = float(np.linalg.norm(B, 2)) * unc.h_max
    return linear_system(A, B, state_box, control_box, w_max)
