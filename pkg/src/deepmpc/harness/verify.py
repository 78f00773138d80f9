"""Numerical verification suite.

Each check returns a :class:`CheckResult`; the CLI ``verify`` command and the
acceptance tests share these routines.
"""

from __future__ import annotations

import itertools
import tempfile
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from deepmpc import adaptive, network, numerics, ocp
from deepmpc.harness import outputs
from deepmpc.harness.config import ExperimentConfig
from deepmpc.harness.runner import build_setup, run_agent, run_experiment


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


# ---------------------------------------------------------------------------
# Benchmark-level checks


def check_ratios(report) -> CheckResult:
    worst_ds, worst_st = 0.0, 0.0
    for a in range(report.n_agents):
        deep, shallow, tube = (report.median(c, a) for c in ("deep", "shallow", "tube"))
        worst_ds = max(worst_ds, float(np.max(deep / shallow)))
        worst_st = max(worst_st, float(np.max(shallow / tube)))
    ok = worst_ds <= 0.2 and worst_st <= 0.5
    return CheckResult("benchmark ratios", ok,
                       f"max deep/shallow {worst_ds:.4f} (<= 0.2), "
                       f"max shallow/tube {worst_st:.4f} (<= 0.5)")


def check_constraints(records) -> CheckResult:
    bad = [k for k, r in records.items() if not r.constraints_ok]
    steps = sum(len(r) for r in records.values())
    return CheckResult("constraint satisfaction", not bad,
                       f"{len(records)} runs, {steps} steps, {len(bad)} runs with violations")


def check_adaptive_bound(records, slack: float = 1e-12) -> CheckResult:
    worst = -np.inf
    for r in records.values():
        if len(r):
            worst = max(worst, float(np.max(np.linalg.norm(r.u_a, axis=1) - r.u_max_a)))
    return CheckResult("adaptive control bound", worst <= slack,
                       f"max ||u_a|| - sqrt(W_bar) sigma = {worst:.3e}")


def check_replay_monotone(records, cfg: ExperimentConfig | None = None,
                          small_capacity: int = 120) -> CheckResult:
    """Monotone min singular value after the buffer fills.

    With the default capacity a 200-step run never fills the buffer, so the
    deep runs are repeated with ``small_capacity`` to exercise replacement.
    """
    recs = list(records.values())
    if cfg is not None:
        small = replace(cfg, buffer_capacity=small_capacity)
        recs += [run_agent(small, a, controller="deep", agent_index=i)
                 for i, a in enumerate(small.agents)]
    worst = 0.0
    n = 0
    for r in recs:
        sv = np.asarray(r.buffer_min_sv)
        if sv.size > 1:
            n += 1
            worst = min(worst, float(np.min(np.diff(sv))))
    ok = worst >= 0.0 and (cfg is None or n > 0)
    return CheckResult("replay min singular value monotone", ok,
                       f"{n} filled buffers, most negative step {worst:.3e}")


# ---------------------------------------------------------------------------
# Closed-loop guarantee checks


def structured_config(base: ExperimentConfig | None = None, steps: int = 2000) -> ExperimentConfig:
    """Structured uncertainty on a fixed feature map with ``theta sigma^2 = 0.5``."""
    base = ExperimentConfig() if base is None else base
    sigma2 = base.shallow_neurons + 1
    return replace(base, controller="shallow", uncertainty="structured", steps=steps,
                   theta=0.5 / sigma2, eps_bar=0.0)


def check_mean_square_bound(cfg: ExperimentConfig | None = None) -> CheckResult:
    cfg = structured_config(cfg)
    worst_ratio = 0.0
    ok = True
    for i, agent in enumerate(cfg.agents):
        rec = run_agent(cfg, agent, agent_index=i)
        sigma = float(np.sqrt(cfg.shallow_neurons + 1))
        rep = adaptive.windowed_ms_check(rec.u_tilde, cfg.theta, sigma,
                                         float(np.sum(np.asarray(cfg.col_bounds) ** 2)),
                                         cfg.eps_bar)
        ok &= rep.passed
        worst_ratio = max(worst_ratio, rep.max_ratio)
    return CheckResult("windowed mean-square bound", ok,
                       f"{cfg.steps} steps per agent, worst window sum / bound = {worst_ratio:.4f}")


def check_projection(n: int = 10_000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = np.inf
    configs = [(4, np.array([0.5])), (4, np.array([10.0])), (6, np.array([0.3, 1.0, 2.0]))]
    for n_phi, bounds in configs:
        for _ in range(n):
            m = bounds.size
            K_bar = rng.normal(scale=rng.choice([0.1, 1.0, 10.0]), size=(n_phi, m))
            K = adaptive.project_columns(K_bar, bounds)
            W = rng.normal(size=(n_phi, m))
            W *= rng.random(m) * bounds / np.linalg.norm(W, axis=0)
            worst = min(worst, float(np.min(np.sum((K - W) * (K_bar - K), axis=0))))
    return CheckResult("projection inequality", worst >= -1e-12,
                       f"{n} samples x {len(configs)} bound sets, min inner product {worst:.3e}")


def check_value_decrease(cfg: ExperimentConfig | None = None, tol: float = 1e-7) -> CheckResult:
    cfg = replace(ExperimentConfig() if cfg is None else cfg, uncertainty="none", controller="tube")
    worst = -np.inf
    for i, agent in enumerate(cfg.agents):
        rec = run_agent(cfg, agent, agent_index=i)
        worst = max(worst, float(np.max(rec.lemma3_resid)))
    return CheckResult("value decrease along nominal rollout", worst <= tol,
                       f"max V(x+) - V(x) + c_s = {worst:.3e}")


def enumerate_box_qp(H, q, lower, upper) -> float:
    """Exact box-QP optimum by enumerating all lower/free/upper patterns."""
    n = q.size
    best = np.inf
    for pattern in itertools.product((0, 1, 2), repeat=n):
        z = np.zeros(n)
        fixed = np.array([p != 1 for p in pattern])
        z[np.array(pattern) == 0] = lower[np.array(pattern) == 0]
        z[np.array(pattern) == 2] = upper[np.array(pattern) == 2]
        free = ~fixed
        if free.any():
            rhs = -(q[free] + H[np.ix_(free, fixed)] @ z[fixed])
            z[free] = np.linalg.solve(H[np.ix_(free, free)], rhs)
        if np.all(z >= lower - 1e-12) and np.all(z <= upper + 1e-12):
            best = min(best, 0.5 * z @ H @ z + q @ z)
    return best


def check_qp_oracle(n: int = 200, seed: int = 0, records=None) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        k = int(rng.integers(1, 5))
        M = rng.normal(size=(k, k))
        H = M @ M.T + 0.1 * np.eye(k)
        q = rng.normal(scale=3.0, size=k)
        lo = -rng.random(k) * 2
        hi = rng.random(k) * 2
        res = ocp.solve_box_qp(H, q, lo, hi)
        worst = max(worst, abs(res.value - enumerate_box_qp(H, q, lo, hi)))
    resid = 0.0
    if records:
        resid = max(float(np.max(r.qp_residual)) for r in records.values() if len(r))
    ok = worst <= 1e-6 and resid <= 1e-9
    return CheckResult("box QP against enumeration", ok,
                       f"{n} problems, max objective gap {worst:.3e}; "
                       f"max benchmark residual {resid:.3e}")


def check_assumption2(n: int = 1000, seed: int = 0) -> CheckResult:
    setup = build_setup(ExperimentConfig())
    A, B = setup.system.A, setup.system.B
    P, K = numerics.dare_solve(A, B, setup.Q, setup.R)
    X = ocp.terminal_region_samples(P, K, setup.sets.U_prime, n, np.random.default_rng(seed))
    good = ocp.assumption2_residual(A, B, P, setup.Q, setup.R, K, X)
    bad = ocp.assumption2_residual(A, B, 0.01 * np.eye(2), setup.Q, setup.R, K, X)
    return CheckResult("terminal cost decrease", good <= 1e-9 and bad > 0,
                       f"DARE Q_f worst {good:.3e}; Q_f = 0.01 I worst {bad:.3e}")


def max_gradient_error(n_nets: int = 20, seed: int = 0, h: float = 1e-6) -> float:
    """Worst ``||fd - g|| / max(||fd||, ||g||)`` over every parameter array.

    ``fd`` holds central differences with step ``h``; arrays whose gradient
    is exactly zero on both routes count as error 0.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_nets):
        sizes = [2] + [int(v) for v in rng.integers(2, 6, size=int(rng.integers(1, 4)))] + [1]
        acts = [str(rng.choice(["tanh", "identity", "relu"])) for _ in sizes[2:]] + ["identity"]
        acts[-2] = "tanh"
        net = network.MlpNetwork.initialize(sizes, acts, rng)
        X = rng.normal(size=(8, 2))
        Y = rng.normal(size=(8, 1))
        grads = network.backprop(net, (X, Y))
        for p, g in zip(net.parameters(), grads):
            fd = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + h
                up = network.mse_loss(net, X, Y)
                p[idx] = old - h
                down = network.mse_loss(net, X, Y)
                p[idx] = old
                fd[idx] = (up - down) / (2 * h)
            scale = max(np.linalg.norm(fd), np.linalg.norm(g))
            if scale > 0:
                worst = max(worst, float(np.linalg.norm(fd - g) / scale))
    return worst


def check_gradients() -> CheckResult:
    err = max_gradient_error()
    return CheckResult("backprop against finite differences", err <= 1e-5,
                       f"20 networks, max relative error {err:.3e}")


def moore_penrose_residual(M) -> float:
    X, _ = numerics.pseudo_inverse(M)
    return max(np.max(np.abs(M @ X @ M - M)), np.max(np.abs(X @ M @ X - X)),
               np.max(np.abs((M @ X).T - M @ X)), np.max(np.abs((X @ M).T - X @ M)))


def check_numerics(n_draws: int = 1_000_000) -> CheckResult:
    rng = np.random.default_rng(0)
    mp = 0.0
    for _ in range(100):
        r, c = (int(v) for v in rng.integers(1, 7, size=2))
        mp = max(mp, moore_penrose_residual(rng.normal(size=(r, c))))
    setup = build_setup(ExperimentConfig())
    P, _ = numerics.dare_solve(setup.system.A, setup.system.B, setup.Q, setup.R)
    dare = numerics.dare_residual(P, setup.system.A, setup.system.B, setup.Q, setup.R)
    w0 = 0.457
    s = numerics.TruncatedNormalSampler(0.0, w0 / 2, -w0, w0, rng_seed=1).sample_many(n_draws)
    inside = float(np.mean((s >= -w0) & (s <= w0)))
    ok = mp <= 1e-9 and dare <= 1e-8 and inside == 1.0
    return CheckResult("numerics", ok, f"Moore-Penrose {mp:.3e}; DARE {dare:.3e}; "
                                       f"truncated normal in support {inside:.6f}")


def check_determinism(cfg: ExperimentConfig | None = None) -> CheckResult:
    cfg = replace(ExperimentConfig() if cfg is None else cfg, deterministic_training=True)
    blobs = []
    for _ in range(2):
        with tempfile.TemporaryDirectory() as tmp:
            recs = [run_agent(cfg, a, controller=c, agent_index=i)
                    for c in cfg.controllers for i, a in enumerate(cfg.agents)]
            paths = outputs.emit_outputs(recs, None, tmp, plots=False)
            blobs.append([Path(p).read_bytes() for p in paths])
    same = blobs[0] == blobs[1]
    return CheckResult("deterministic CSV output", same,
                       f"{len(blobs[0])} CSV files compared byte for byte")


def run_all(cfg: ExperimentConfig | None = None, quick: bool = False) -> list[CheckResult]:
    """All checks; ``quick`` runs the benchmark with a single seed."""
    cfg = ExperimentConfig() if cfg is None else cfg
    t0 = time.perf_counter()
    report = run_experiment(cfg, seeds=cfg.seeds[:1] if quick else cfg.seeds)
    elapsed = time.perf_counter() - t0
    ratio = check_ratios(report)
    results = [replace(ratio, detail=ratio.detail + f"; {elapsed:.1f} s")]
    results += [check_constraints(report.records), check_adaptive_bound(report.records),
                check_mean_square_bound(cfg), check_projection(1000 if quick else 10_000),
                check_value_decrease(cfg), check_qp_oracle(records=report.records),
                check_assumption2(), check_gradients(),
                check_numerics(10_000 if quick else 1_000_000),
                check_replay_monotone(report.records, cfg), check_determinism(cfg)]
    return results
