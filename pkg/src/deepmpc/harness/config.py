"""Experiment configuration.

Configs are INI files. Numeric fields accept arithmetic on literals and
``pi`` (``pi/30``), vectors are comma separated and matrices use ``;``
between rows. Every field has a default reproducing the wing-rock
benchmark, so an empty file is a valid config.
"""

from __future__ import annotations

import ast
import configparser
import operator
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from deepmpc.errors import ConfigurationError

MODES = ("tube", "shallow", "deep")

_OPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
        ast.Div: operator.truediv, ast.Pow: operator.pow, ast.USub: operator.neg,
        ast.UAdd: operator.pos}


def eval_number(text: str) -> float:
    """Evaluate a literal arithmetic expression such as ``5*pi/60``."""
    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.Name) and node.id == "pi":
            return float(np.pi)
        if isinstance(node, ast.BinOp) and type(node.op) in _OPS:
            return _OPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _OPS:
            return _OPS[type(node.op)](ev(node.operand))
        raise ConfigurationError(f"unsupported expression {text!r}")
    try:
        return ev(ast.parse(text.strip(), mode="eval"))
    except SyntaxError as exc:
        raise ConfigurationError(f"cannot parse number {text!r}") from exc


def parse_vector(text: str) -> np.ndarray:
    return np.array([eval_number(v) for v in text.split(",") if v.strip()])


def parse_matrix(text: str) -> np.ndarray:
    rows = [parse_vector(r) for r in text.split(";") if r.strip()]
    if len({r.size for r in rows}) != 1:
        raise ConfigurationError(f"ragged matrix {text!r}")
    return np.array(rows)


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("on", "true", "yes", "1"):
        return True
    if t in ("off", "false", "no", "0"):
        return False
    raise ConfigurationError(f"not a boolean: {text!r}")


def parse_schedule(text: str) -> tuple:
    """``0-49:4, 100-149:4`` -> ``((0, 49, 4.0), (100, 149, 4.0))``."""
    out = []
    for item in text.split(","):
        if not item.strip():
            continue
        span, value = item.split(":")
        a, b = span.split("-")
        out.append((int(a), int(b), eval_number(value)))
    return tuple(out)


@dataclass(frozen=True)
class Agent:
    x0: np.ndarray
    seed: int = 0


def _default_agents():
    return (Agent(np.array([np.pi / 30, 5 * np.pi / 60]), 1),
            Agent(np.array([np.pi / 30, -np.pi / 18]), 2))


@dataclass(frozen=True)
class ExperimentConfig:
    # [experiment]
    steps: int = 200
    controller: str = "deep"
    controllers: tuple = MODES
    seed: int = 0
    seeds: tuple = tuple(range(10))
    mse_units: str = "degrees"
    deterministic_training: bool = True
    agents: tuple = field(default_factory=_default_agents)
    # [mpc]
    horizon: int = 20
    Q: np.ndarray = field(default_factory=lambda: np.eye(2))
    R: np.ndarray = field(default_factory=lambda: np.array([[0.1]]))
    Q_f: Optional[np.ndarray] = None  # None: DARE solution
    terminal_mode: str = "reference"
    qp_tol: float = 1e-9
    qp_max_iter: int = 50_000
    lemma3_kappa: float = 10.0
    # [governor]
    governor_horizon: int = 60
    governor_tol: float = 1e-9
    # [tightening]
    state_margin: Optional[np.ndarray] = None  # None: closed-loop box bound
    control_margin: float = 0.0
    # [adaptive]
    theta: float = 0.9
    col_bounds: np.ndarray = field(default_factory=lambda: np.array([0.5]))
    eps_bar: float = 0.0
    strict_theta: bool = False
    rank_tol: float = 1e-10
    check_projection: int = 0  # feasible W* samples per step for the projection check
    # [network]
    layers: tuple = (2, 5, 5, 3)
    activations: tuple = ("relu", "relu", "tanh")
    learning_rate: float = 0.1
    momentum: float = 0.9
    batch_size: int = 64  # p0: one full sampled batch per epoch
    epochs: int = 50
    train_every: int = 20
    warm_start_head: bool = False
    # [shallow]
    shallow_neurons: int = 3
    shallow_activation: str = "tanh"
    # [buffer]
    buffer_capacity: int = 250
    buffer_batch: int = 64
    buffer_normalize: bool = False
    # [uncertainty]
    uncertainty: str = "wing_rock"  # wing_rock | structured | none
    V0: np.ndarray = field(default_factory=lambda: np.array(
        [0.8, 0.2314, 0.6918, -0.6245, 0.0095, 0.0214]))
    omega0: float = 0.457
    noise_stddev: Optional[float] = None  # None: omega0 / 2
    schedule: tuple = ((0, 49, 4.0), (100, 149, 4.0))
    structured_scale: float = 0.8  # ||W*|| as a fraction of the column bound
    # [output]
    out_dir: str = "out"
    plots: bool = True

    def __post_init__(self):
        validate(self)

    def with_overrides(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)


def validate(cfg: ExperimentConfig) -> None:
    errs = []
    if cfg.controller not in MODES:
        errs.append(f"controller must be one of {MODES}")
    if any(c not in MODES for c in cfg.controllers):
        errs.append(f"controllers must be a subset of {MODES}")
    if cfg.steps < 1 or cfg.horizon < 1:
        errs.append("steps and horizon must be positive")
    if cfg.governor_horizon < cfg.horizon:
        errs.append("governor horizon must be at least the MPC horizon")
    if cfg.mse_units not in ("degrees", "radians"):
        errs.append("mse_units must be degrees or radians")
    if cfg.terminal_mode not in ("reference", "origin"):
        errs.append("terminal_mode must be reference or origin")
    if cfg.uncertainty not in ("wing_rock", "structured", "none"):
        errs.append("uncertainty must be wing_rock, structured or none")
    if cfg.theta <= 0:
        errs.append("theta must be positive")
    if np.any(np.asarray(cfg.col_bounds) <= 0):
        errs.append("column bounds must be positive")
    if not 0 <= cfg.momentum < 1 or cfg.learning_rate <= 0:
        errs.append("need 0 <= momentum < 1 and learning_rate > 0")
    if not 0 < cfg.buffer_batch < cfg.buffer_capacity:
        errs.append("buffer batch must be positive and below capacity")
    if len(cfg.activations) != len(cfg.layers) - 1:
        errs.append("one activation per hidden layer is required")
    elif cfg.activations[-1] != "tanh":
        errs.append("the last hidden layer must be tanh so that ||phi|| is bounded")
    if cfg.layers[0] != 2:
        errs.append("the wing-rock harness needs a 2-dimensional input layer")
    for a in cfg.agents:
        if np.asarray(a.x0).size != 2:
            errs.append("agent initial states must have 2 entries")
    if cfg.omega0 < 0:
        errs.append("omega0 must be non-negative")
    if errs:
        raise ConfigurationError("; ".join(errs))


_SCHEMA = {
    "experiment": {
        "steps": ("steps", int), "controller": ("controller", str),
        "controllers": ("controllers", lambda s: tuple(v.strip() for v in s.split(",") if v.strip())),
        "seed": ("seed", int),
        "seeds": ("seeds", lambda s: tuple(int(v) for v in s.split(",") if v.strip())),
        "mse_units": ("mse_units", str),
        "deterministic_training": ("deterministic_training", parse_bool),
    },
    "mpc": {
        "horizon": ("horizon", int), "Q": ("Q", parse_matrix), "R": ("R", parse_matrix),
        "Q_f": ("Q_f", lambda s: None if s.strip() == "dare" else parse_matrix(s)),
        "terminal_cost": ("terminal_mode", str), "qp_tol": ("qp_tol", eval_number),
        "qp_max_iter": ("qp_max_iter", int), "lemma3_kappa": ("lemma3_kappa", eval_number),
    },
    "governor": {"horizon": ("governor_horizon", int), "tol": ("governor_tol", eval_number)},
    "tightening": {
        "state_margin": ("state_margin", lambda s: None if s.strip() == "auto" else parse_vector(s)),
        "control_margin": ("control_margin", eval_number),
    },
    "adaptive": {
        "theta": ("theta", eval_number), "col_bounds": ("col_bounds", parse_vector),
        "eps_bar": ("eps_bar", eval_number), "strict_theta": ("strict_theta", parse_bool),
        "rank_tol": ("rank_tol", eval_number), "check_projection": ("check_projection", int),
    },
    "network": {
        "layers": ("layers", lambda s: tuple(int(v) for v in s.split(","))),
        "activations": ("activations", lambda s: tuple(v.strip() for v in s.split(","))),
        "learning_rate": ("learning_rate", eval_number), "momentum": ("momentum", eval_number),
        "batch_size": ("batch_size", int), "epochs": ("epochs", int),
        "train_every": ("train_every", int), "warm_start_head": ("warm_start_head", parse_bool),
    },
    "shallow": {"neurons": ("shallow_neurons", int), "activation": ("shallow_activation", str)},
    "buffer": {"capacity": ("buffer_capacity", int), "batch": ("buffer_batch", int),
               "normalize": ("buffer_normalize", parse_bool)},
    "uncertainty": {
        "kind": ("uncertainty", str), "V0": ("V0", parse_vector), "omega0": ("omega0", eval_number),
        "noise_stddev": ("noise_stddev", lambda s: None if s.strip() == "auto" else eval_number(s)),
        "schedule": ("schedule", parse_schedule),
        "structured_scale": ("structured_scale", eval_number),
    },
    "output": {"dir": ("out_dir", str), "plots": ("plots", parse_bool)},
}


def load_config(path=None, text: Optional[str] = None) -> ExperimentConfig:
    """Read an INI config; unknown sections or keys are rejected."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if text is not None:
        parser.read_string(text)
    elif path is not None:
        if not Path(path).exists():
            raise ConfigurationError(f"config file {path} not found")
        parser.read(path)
    values = {}
    agents = []
    for section in parser.sections():
        if section.startswith("agent."):
            sec = parser[section]
            if "x0" not in sec:
                raise ConfigurationError(f"[{section}] needs x0")
            agents.append((section, Agent(parse_vector(sec["x0"]), int(sec.get("seed", "0")))))
            continue
        if section not in _SCHEMA:
            raise ConfigurationError(f"unknown section [{section}]")
        for key, raw in parser[section].items():
            if key not in _SCHEMA[section]:
                raise ConfigurationError(f"unknown key {key!r} in [{section}]")
            name, conv = _SCHEMA[section][key]
            try:
                values[name] = conv(raw)
            except ConfigurationError:
                raise
            except Exception as exc:
                raise ConfigurationError(f"[{section}] {key}: {exc}") from exc
    if agents:
        agents.sort(key=lambda kv: kv[0])
        values["agents"] = tuple(a for _, a in agents)
    return ExperimentConfig(**values)


def config_fields() -> list[str]:
    return [f.name for f in fields(ExperimentConfig)]
