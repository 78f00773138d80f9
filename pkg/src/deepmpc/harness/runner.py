"""Closed-loop simulation of the layered controller.

Every step: swap in a freshly trained feature map if one is ready, evaluate
``u_a = -K' phi(x)``, solve the tracking MPC over the control box shifted by
``u_a``, apply ``u_m + u_a`` to the true plant, adapt ``K`` from the measured
transition and offer ``(x, -u_a)`` to the replay buffer. The inner layers
are retrained on a fixed cadence.
"""

from __future__ import annotations

import warnings
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np

from deepmpc import adaptive, network, ocp, plant, replay
from deepmpc.errors import DeepMpcError, SolverError
from deepmpc.harness.config import Agent, ExperimentConfig
from deepmpc.numerics import dare_solve

STATE_NAMES = ("delta", "p")


@dataclass
class AgentRunRecord:
    """Per-step trace of one agent under one controller.

    Row ``t`` holds the state ``x_t`` and the controls applied at ``t``;
    ``x_final`` is the state after the last step.
    """

    controller: str
    agent: int
    seed: int
    t: np.ndarray
    x: np.ndarray
    x_ref: np.ndarray
    u_m: np.ndarray
    u_a: np.ndarray
    u_total: np.ndarray
    h: np.ndarray
    V_m: np.ndarray
    lemma3_resid: np.ndarray
    in_X: np.ndarray
    in_U: np.ndarray
    qp_residual: np.ndarray
    u_tilde: np.ndarray
    clip: np.ndarray
    x_final: np.ndarray
    buffer_min_sv: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    projection_failures: int = 0
    u_max_a: float = 0.0

    def __len__(self) -> int:
        return int(self.t.size)

    @property
    def constraints_ok(self) -> bool:
        x_ok = bool(np.all(self.in_X)) and _state_box().contains(self.x_final)
        return x_ok and bool(np.all(self.in_U))

    def passed(self, qp_tol: float) -> bool:
        """Run-level assertions: constraints held and every QP met its tolerance."""
        return self.constraints_ok and bool(np.all(self.qp_residual <= qp_tol))


def empty_record(controller: str = "deep", agent: int = 0, seed: int = 0, d: int = 2,
                 m: int = 1) -> AgentRunRecord:
    z = lambda *s: np.zeros((0,) + s)  # noqa: E731
    return AgentRunRecord(controller, agent, seed, np.zeros(0, dtype=int), z(d), z(d), z(m),
                          z(m), z(m), z(m), z(), z(), np.zeros(0, bool), np.zeros(0, bool),
                          z(), z(m), z(), np.zeros(d))


def _state_box() -> plant.BoxConstraint:
    return plant.wing_rock_system().state_box


# ---------------------------------------------------------------------------
# Shared setup


@dataclass(frozen=True)
class Setup:
    """Controller-independent ingredients derived from a config."""

    system: plant.ControlAffineSystem
    Q: np.ndarray
    R: np.ndarray
    Q_f: np.ndarray
    K_lqr: np.ndarray
    sets: ocp.TightenedSets
    u_max_a: float
    sigma: float
    h_max: float


def _uncertainty(cfg: ExperimentConfig, sampler=None, seed: int = 0) -> plant.WingRockUncertainty:
    return plant.WingRockUncertainty(V0=cfg.V0, omega0=cfg.omega0, schedule=cfg.schedule,
                                     sampler=sampler, noise_stddev=cfg.noise_stddev, seed=seed)


def build_setup(cfg: ExperimentConfig) -> Setup:
    unc = _uncertainty(cfg, sampler=plant._ZeroSampler())
    h_max = unc.h_max if cfg.uncertainty == "wing_rock" else 0.0
    sys = plant.wing_rock_system(unc)
    P, K_lqr = dare_solve(sys.A, sys.B, cfg.Q, cfg.R)
    Q_f = P if cfg.Q_f is None else cfg.Q_f
    sigma = float(np.sqrt(cfg.layers[-1] + 1))
    u_max_a = float(np.sqrt(np.sum(np.asarray(cfg.col_bounds) ** 2)) * sigma)
    if cfg.uncertainty == "structured":
        h_max = float(cfg.structured_scale * np.sqrt(np.sum(np.asarray(cfg.col_bounds) ** 2)) * sigma)
    w_prime = float(np.linalg.norm(sys.B, 2)) * (u_max_a + h_max)
    if cfg.state_margin is None:
        w_box = ocp.matched_disturbance_box(sys.B, u_max_a, h_max)
        margin = ocp.default_state_margin(sys.A, sys.B, K_lqr, w_box, cfg.horizon)
    else:
        margin = cfg.state_margin
    sets = ocp.tighten_boxes(sys.state_box, sys.control_box, u_max_a, w_prime,
                             state_margin=margin, control_margin=cfg.control_margin)
    return Setup(sys, np.asarray(cfg.Q, float), np.asarray(cfg.R, float), Q_f, K_lqr, sets,
                 u_max_a, sigma, h_max)


@lru_cache(maxsize=64)
def _governor_cached(A, B, x0, X_lo, X_hi, U_lo, U_hi, N_r, Q, R, tol):
    arr = lambda t, s: np.array(t, dtype=float).reshape(s)  # noqa: E731
    d = len(x0)
    m = len(U_lo)
    return ocp.reference_governor(arr(A, (d, d)), arr(B, (d, m)), np.array(x0),
                                  plant.BoxConstraint(np.array(X_lo), np.array(X_hi)),
                                  plant.BoxConstraint(np.array(U_lo), np.array(U_hi)),
                                  N_r, arr(Q, (d, d)), arr(R, (m, m)), tol)


def governor_reference(cfg: ExperimentConfig, setup: Setup, x0) -> ocp.ReferenceTrajectory:
    """Reference from the offline governor; cached, since it depends only on ``x0``."""
    t = lambda a: tuple(np.asarray(a, dtype=float).ravel().tolist())  # noqa: E731
    sets = setup.sets
    return _governor_cached(t(setup.system.A), t(setup.system.B), t(x0), t(sets.X_r.lower),
                            t(sets.X_r.upper), t(sets.U_r.lower), t(sets.U_r.upper),
                            cfg.governor_horizon, t(setup.Q), t(setup.R), cfg.governor_tol)


def _seed_ints(*keys: int, n: int = 4) -> list[int]:
    return [int(v) for v in np.random.SeedSequence(list(keys)).generate_state(n, dtype=np.uint64)]


# ---------------------------------------------------------------------------
# Controller state


@dataclass
class _Learner:
    """Feature map, outer weights and (for the deep controller) the generative network."""

    phi: Optional[adaptive.FeatureMap]
    weights: Optional[adaptive.AdaptiveWeights]
    net: Optional[network.MlpNetwork] = None
    buffer: Optional[replay.ReplayBuffer] = None
    trainer: Optional[network.TrainerState] = None
    train_rng: Optional[np.random.Generator] = None


def _feature_map(net: network.MlpNetwork) -> adaptive.FeatureMap:
    return adaptive.FeatureMap(network.feature_evaluator(net), net.n_features, net.feature_sigma())


def _make_learner(cfg: ExperimentConfig, controller: str, seeds: list[int], setup: Setup,
                  freeze_adaptation: bool, train: bool) -> _Learner:
    m = setup.system.m
    if controller == "tube":
        return _Learner(None, None)
    if controller == "shallow":
        net = network.MlpNetwork.initialize(
            [2, cfg.shallow_neurons, m], [cfg.shallow_activation, "identity"],
            np.random.default_rng(seeds[1]))
    else:
        net = network.MlpNetwork.initialize(
            list(cfg.layers) + [m], list(cfg.activations) + ["identity"],
            np.random.default_rng(seeds[1]))
    phi = _feature_map(net)
    with warnings.catch_warnings():
        # theta * sigma^2 >= 1 is allowed outside strict mode; the warning is
        # raised once at config validation instead of once per run.
        warnings.simplefilter("ignore", RuntimeWarning)
        w = adaptive.AdaptiveWeights.zeros(phi.n_phi, m, cfg.theta, cfg.col_bounds, phi.sigma,
                                           cfg.eps_bar, strict=cfg.strict_theta)
    learner = _Learner(phi, w)
    if freeze_adaptation:
        learner.weights = None
    if controller == "deep" and train and cfg.train_every > 0:
        scale = None
        if cfg.buffer_normalize:
            box = setup.system.state_box
            scale = box.upper - box.lower
        learner.net = net
        learner.buffer = replay.ReplayBuffer(cfg.buffer_capacity, cfg.buffer_batch,
                                             rng_seed=seeds[2], scale=scale)
        learner.trainer = network.TrainerState(cfg.learning_rate, cfg.momentum,
                                               cfg.batch_size, cfg.epochs)
        learner.train_rng = np.random.default_rng(seeds[3])
    return learner


def _train_session(net, trainer, batch, rng, batch_size):
    X = np.array([e.x for e in batch])
    Y = np.array([e.target for e in batch])
    return network.train(net, trainer, network.minibatches(X, Y, batch_size, rng))


# ---------------------------------------------------------------------------
# Agent loop


def run_agent(cfg: ExperimentConfig, agent: Agent, controller: Optional[str] = None,
              seed: Optional[int] = None, agent_index: int = 0,
              freeze_adaptation: bool = False, train: bool = True,
              setup: Optional[Setup] = None,
              reference: Optional[ocp.ReferenceTrajectory] = None) -> AgentRunRecord:
    """Simulate one agent for ``cfg.steps`` steps.

    ``freeze_adaptation`` keeps ``K`` at zero and ``train=False`` disables
    inner-layer training; with both set the deep controller reduces to the
    tube controller. The disturbance stream depends only on ``(seed,
    agent.seed)``, so every controller sees the same noise realisation.

    Raises:
        GovernorError: no admissible reference exists.
        SolverError: an MPC solve missed the QP tolerance.
    """
    controller = cfg.controller if controller is None else controller
    seed = cfg.seed if seed is None else seed
    setup = build_setup(cfg) if setup is None else setup
    sys = setup.system
    d, m = sys.d, sys.m
    x0 = np.asarray(agent.x0, dtype=float)
    ref = governor_reference(cfg, setup, x0) if reference is None else reference
    seeds = _seed_ints(seed, agent.seed)
    learner = _make_learner(cfg, controller, seeds, setup, freeze_adaptation, train)

    if cfg.uncertainty == "wing_rock":
        unc = _uncertainty(cfg, seed=seeds[0])
        h_fn = lambda x, t: plant.uncertainty_eval(unc, x, t)  # noqa: E731
    elif cfg.uncertainty == "structured":
        h_fn = _structured_uncertainty(cfg, setup, learner, seeds[0])
    else:
        h_fn = lambda x, t: 0.0  # noqa: E731

    proj_rng = np.random.default_rng(seeds[0] + 1) if cfg.check_projection else None
    T = cfg.steps
    rows = {k: [] for k in ("x", "x_ref", "u_m", "u_a", "u_total", "h", "V_m", "lemma3",
                            "in_X", "in_U", "qp", "u_tilde", "clip")}
    rec = empty_record(controller, agent_index, seed, d, m)
    rec.u_max_a = setup.u_max_a
    pending: Optional[Future] = None
    pool = None if cfg.deterministic_training else ThreadPoolExecutor(max_workers=1)
    x = x0.copy()
    try:
        for t in range(T):
            # Feature swap from a finished background job.
            if pending is not None and pending.done():
                _publish(learner, pending.result(), cfg)
                pending = None
            phi_x = learner.phi(x) if learner.phi is not None else None
            if learner.weights is not None:
                u_a = adaptive.adaptive_control(learner.weights, learner.phi, x)
            else:
                u_a = np.zeros(m)
            prob = ocp.MpcProblem(N=cfg.horizon, Q=setup.Q, R=setup.R, Q_f=setup.Q_f, A=sys.A,
                                  B=sys.B, reference=ref, control_box=sys.control_box,
                                  u_a_current=u_a, t=t, terminal_mode=cfg.terminal_mode,
                                  qp_tol=cfg.qp_tol, qp_max_iter=cfg.qp_max_iter)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ocp.SolverWarning)
                sol = ocp.solve_mpc(prob, x)
            if sol.solver_residual > cfg.qp_tol:
                raise SolverError(f"MPC solve at t={t} stalled", sol.solver_residual)
            u_m = sol.u_first
            raw = u_m + u_a
            u_total = sys.control_box.project(raw)
            h = float(h_fn(x, t))
            x_next = plant.apply_dynamics(sys, x, u_total, h)
            x_nom = plant.nominal_step(sys, x, u_m)
            # Value decrease along the nominal prediction, re-solved at t+1.
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ocp.SolverWarning)
                v_next = ocp.solve_mpc(replace(prob, t=t + 1), x_nom).value
            cs = ocp.stage_cost(x, u_m, ref.state(t), ref.control(t), setup.Q, setup.R)
            u_tilde = np.full(m, np.nan)
            if learner.weights is not None:
                new_w, K_bar, ut = adaptive.update_step(
                    learner.weights, phi_x, sys.g_at(x), x_next, x_nom, cfg.rank_tol)
                if ut is not None:
                    u_tilde = ut
                if proj_rng is not None:
                    rec.projection_failures += _projection_failures(
                        new_w.K, K_bar, new_w.col_bounds, cfg.check_projection, proj_rng)
                learner.weights = new_w
            if learner.buffer is not None:
                replay.offer(learner.buffer, replay.ReplayEntry(x, -u_a, t))
                if learner.buffer.full:
                    rec.buffer_min_sv.append(learner.buffer.min_singular_value())
                if (t + 1) % cfg.train_every == 0 and pending is None \
                        and len(learner.buffer) >= cfg.buffer_batch:
                    batch = replay.sample_batch(learner.buffer, cfg.buffer_batch)
                    args = (learner.net, learner.trainer, batch, learner.train_rng, cfg.batch_size)
                    if pool is None:
                        _publish(learner, _train_session(*args), cfg)
                    else:
                        pending = pool.submit(_train_session, *args)
            rows["x"].append(x)
            rows["x_ref"].append(ref.state(t))
            rows["u_m"].append(u_m)
            rows["u_a"].append(u_a)
            rows["u_total"].append(u_total)
            rows["h"].append([h])
            rows["V_m"].append(sol.value)
            rows["lemma3"].append(v_next - sol.value + cs)
            rows["in_X"].append(sys.state_box.contains(x))
            rows["in_U"].append(sys.control_box.contains(u_total))
            rows["qp"].append(sol.solver_residual)
            rows["u_tilde"].append(u_tilde)
            rows["clip"].append(float(np.max(np.abs(raw - u_total))))
            if not np.all(np.isfinite(x_next)):
                raise DeepMpcError(f"state diverged at t={t}")
            x = x_next
    finally:
        if pool is not None:
            pool.shutdown(wait=True)
    if learner.trainer is not None:
        rec.epoch_losses = list(learner.trainer.epoch_losses)
    rec.t = np.arange(T)
    rec.x = np.array(rows["x"])
    rec.x_ref = np.array(rows["x_ref"])
    rec.u_m = np.array(rows["u_m"])
    rec.u_a = np.array(rows["u_a"])
    rec.u_total = np.array(rows["u_total"])
    rec.h = np.array(rows["h"])
    rec.V_m = np.array(rows["V_m"])
    rec.lemma3_resid = np.array(rows["lemma3"])
    rec.in_X = np.array(rows["in_X"], dtype=bool)
    rec.in_U = np.array(rows["in_U"], dtype=bool)
    rec.qp_residual = np.array(rows["qp"])
    rec.u_tilde = np.array(rows["u_tilde"])
    rec.clip = np.array(rows["clip"])
    rec.x_final = x
    return rec


def _publish(learner: _Learner, trained: network.MlpNetwork, cfg: ExperimentConfig) -> None:
    """Swap in the new feature basis; ``K`` is re-projected and otherwise kept."""
    learner.net = trained
    learner.phi = _feature_map(trained)
    if learner.weights is None:
        return
    K = learner.weights.K
    if cfg.warm_start_head:
        head = np.vstack([trained.weights[-1], trained.biases[-1][None, :]])
        # Network output approximates -u_a = K' phi, so the head is K itself.
        K = head
    learner.weights = replace(learner.weights, K=adaptive.project_columns(K, learner.weights.col_bounds))


def _projection_failures(K, K_bar, col_bounds, n: int, rng: np.random.Generator) -> int:
    fails = 0
    for _ in range(n):
        W = rng.normal(size=K.shape)
        W *= (rng.random(K.shape[1]) * col_bounds) / np.linalg.norm(W, axis=0)
        if not adaptive.projection_inequality_check(K, K_bar, W, col_bounds):
            fails += 1
    return fails


def _structured_uncertainty(cfg: ExperimentConfig, setup: Setup, learner: _Learner, seed: int):
    """``h = W*' phi(x)`` on the controller's own (fixed) feature map."""
    if learner.phi is None:
        raise DeepMpcError("structured uncertainty needs a feature map (shallow or deep controller)")
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(learner.phi.n_phi, setup.system.m))
    W *= cfg.structured_scale * np.asarray(cfg.col_bounds) / np.linalg.norm(W, axis=0)
    phi = learner.phi

    def h(x, t):
        return float((W.T @ phi(x))[0])
    h.W_star = W
    return h


# ---------------------------------------------------------------------------
# Metrics and experiment orchestration


def compute_mse(states, ref, unit_mode: str = "degrees") -> np.ndarray:
    """Per-coordinate mean squared deviation from the reference.

    ``ref`` is a :class:`~deepmpc.ocp.ReferenceTrajectory` (zero extended)
    or an array of the same shape as ``states``.
    """
    X = np.atleast_2d(np.asarray(states, dtype=float))
    if isinstance(ref, ocp.ReferenceTrajectory):
        Xr = ref.states(0, X.shape[0])
    else:
        Xr = np.atleast_2d(np.asarray(ref, dtype=float))
    if Xr.shape != X.shape:
        raise ValueError(f"trajectory shape {X.shape} differs from reference {Xr.shape}")
    if X.shape[0] == 0:
        return np.zeros(X.shape[1])
    err = X - Xr
    if unit_mode == "degrees":
        err = np.degrees(err)
    elif unit_mode != "radians":
        raise ValueError(f"unknown unit mode {unit_mode!r}")
    return np.mean(err ** 2, axis=0)


@dataclass
class MetricsReport:
    """MSE per (controller, agent, seed) plus medians over seeds.

    ``mse[controller][agent]`` is an array of shape ``(n_seeds, d)``.
    """

    controllers: tuple
    n_agents: int
    seeds: tuple
    units: str
    mse: dict
    records: dict = field(default_factory=dict, repr=False)

    def median(self, controller: str, agent: int) -> np.ndarray:
        return np.median(self.mse[controller][agent], axis=0)

    def table(self) -> list[dict]:
        rows = []
        for c in self.controllers:
            for a in range(self.n_agents):
                med = self.median(c, a)
                for j, name in enumerate(STATE_NAMES[:med.size]):
                    rows.append({"controller": c, "agent": a + 1, "state": name,
                                 "median_mse": float(med[j]),
                                 "min_mse": float(self.mse[c][a][:, j].min()),
                                 "max_mse": float(self.mse[c][a][:, j].max())})
        return rows

    def ratios(self) -> dict:
        """``deep/shallow`` and ``shallow/tube`` median ratios per agent and state."""
        out = {}
        for a in range(self.n_agents):
            if {"deep", "shallow"} <= set(self.controllers):
                out[("deep/shallow", a)] = self.median("deep", a) / self.median("shallow", a)
            if {"shallow", "tube"} <= set(self.controllers):
                out[("shallow/tube", a)] = self.median("shallow", a) / self.median("tube", a)
        return out

    @property
    def all_passed(self) -> bool:
        return all(r.constraints_ok for r in self.records.values())


def run_experiment(cfg: ExperimentConfig, seeds=None, controllers=None,
                   keep_records: bool = True) -> MetricsReport:
    """Run every agent under every controller for every seed.

    The reference of an agent is computed once and shared by all
    controllers; disturbance streams are paired across controllers.
    """
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    controllers = tuple(cfg.controllers if controllers is None else controllers)
    setup = build_setup(cfg)
    refs = [governor_reference(cfg, setup, a.x0) for a in cfg.agents]
    mse = {c: [np.zeros((len(seeds), setup.system.d)) for _ in cfg.agents] for c in controllers}
    records = {}
    for c in controllers:
        for i, agent in enumerate(cfg.agents):
            for k, s in enumerate(seeds):
                rec = run_agent(cfg, agent, controller=c, seed=s, agent_index=i,
                                setup=setup, reference=refs[i])
                mse[c][i][k] = compute_mse(rec.x, rec.x_ref, cfg.mse_units)
                if keep_records:
                    records[(c, i, s)] = rec
                elif not rec.constraints_ok:
                    records[(c, i, s)] = rec
    return MetricsReport(controllers, len(cfg.agents), seeds, cfg.mse_units, mse, records)
