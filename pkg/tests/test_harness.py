import csv
from dataclasses import replace

import numpy as np
import pytest

from deepmpc.errors import ConfigurationError
from deepmpc.harness import cli, outputs
from deepmpc.harness.config import Agent, ExperimentConfig, eval_number, load_config
from deepmpc.harness.runner import (build_setup, compute_mse, empty_record, governor_reference,
                                    run_agent, run_experiment)
from deepmpc.ocp import ReferenceTrajectory

SHORT = ExperimentConfig(steps=60)
AGENT1 = SHORT.agents[0]


@pytest.fixture(scope="module")
def deep_run():
    return run_agent(ExperimentConfig(check_projection=10), ExperimentConfig().agents[0],
                     controller="deep")


def test_config_defaults_and_file(tmp_path):
    cfg = load_config("configs/wing_rock.ini")
    assert cfg.horizon == 20 and cfg.theta == 0.9 and cfg.steps == 200
    np.testing.assert_allclose(cfg.agents[0].x0, [np.pi / 30, 5 * np.pi / 60])
    np.testing.assert_allclose(cfg.agents[1].x0, [np.pi / 30, -np.pi / 18])
    assert cfg.schedule == ((0, 49, 4.0), (100, 149, 4.0))
    assert eval_number("5*pi/60") == pytest.approx(5 * np.pi / 60)
    cfg = load_config(text="[mpc]\nhorizon = 10\nQ = 2, 0; 0, 3\n")
    np.testing.assert_array_equal(cfg.Q, np.diag([2.0, 3.0]))


@pytest.mark.parametrize("text", [
    "[mpc]\nhorizon = 0\n",
    "[nope]\nx = 1\n",
    "[mpc]\nbogus = 1\n",
    "[experiment]\ncontroller = fancy\n",
    "[network]\nactivations = relu, relu, relu\n",
    "[buffer]\ncapacity = 10\nbatch = 20\n",
    "[mpc]\nhorizon = __import__('os')\n",
    "[governor]\nhorizon = 5\n",
])
def test_config_rejects_contradictions(text):
    with pytest.raises(ConfigurationError):
        load_config(text=text)


def test_oversized_adaptive_bound_rejected():
    with pytest.raises(ConfigurationError):
        build_setup(ExperimentConfig(col_bounds=np.array([10.0])))


def test_origin_start_without_disturbance_stays_zero():
    cfg = replace(SHORT, uncertainty="none")
    for c in ("tube", "shallow", "deep"):
        rec = run_agent(cfg, Agent(np.zeros(2)), controller=c)
        for arr in (rec.x, rec.u_m, rec.u_a, rec.u_total, rec.V_m):
            assert np.all(arr == 0)


def test_tube_equals_frozen_deep():
    tube = run_agent(SHORT, AGENT1, controller="tube")
    frozen = run_agent(SHORT, AGENT1, controller="deep", freeze_adaptation=True, train=False)
    for name in ("x", "u_m", "u_total", "V_m", "h"):
        np.testing.assert_array_equal(getattr(tube, name), getattr(frozen, name))


def test_zero_uncertainty_controllers_agree():
    cfg = replace(SHORT, V0=np.zeros(6), omega0=0.0, seeds=(0, 1))
    rep = run_experiment(cfg)
    for a in range(2):
        for c in ("shallow", "deep"):
            np.testing.assert_allclose(rep.median(c, a), rep.median("tube", a), atol=1e-9, rtol=0)


def test_compute_mse_examples():
    ref = ReferenceTrajectory.zeros(1, 1)
    assert compute_mse(np.ones((10, 1)), ref, "radians")[0] == pytest.approx(1.0)
    X = np.random.default_rng(0).normal(size=(7, 2))
    np.testing.assert_array_equal(compute_mse(X, X), [0.0, 0.0])
    assert compute_mse(np.array([[1.0], [2.0], [3.0]]), np.zeros((3, 1)), "radians")[0] == pytest.approx(14 / 3)
    assert compute_mse(np.array([[np.pi / 180]]), np.zeros((1, 1)))[0] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        compute_mse(np.zeros((3, 1)), np.zeros((2, 1)))


def test_deep_run_constraints_and_bounds(deep_run):
    rec = deep_run
    assert len(rec) == 200 and rec.constraints_ok
    assert rec.passed(1e-9)
    assert np.max(np.linalg.norm(rec.u_a, axis=1)) <= rec.u_max_a + 1e-12
    assert rec.projection_failures == 0
    assert np.max(rec.clip) <= 1e-12
    # Apparent disturbance g (u_a + h) stays inside delta_g u_max_a + w_max.
    setup = build_setup(ExperimentConfig())
    app = np.abs(setup.system.B[1, 0] * (rec.u_a[:, 0] + rec.h[:, 0]))
    assert app.max() <= setup.system.delta_g * setup.u_max_a + setup.system.w_max
    # 200 steps never fill the default 250-entry buffer.
    assert rec.buffer_min_sv == []
    # Sessions at steps 80, 100, ..., 200 once the buffer holds p0 = 64 pairs.
    assert len(rec.epoch_losses) == 50 * 7


def test_replay_monotone_when_buffer_fills():
    rec = run_agent(ExperimentConfig(buffer_capacity=100), AGENT1, controller="deep")
    sv = np.asarray(rec.buffer_min_sv)
    assert sv.size == 101 and np.all(np.diff(sv) >= 0)


def test_deep_training_loss_nonincreasing_first_ten_epochs(deep_run):
    first = np.asarray(deep_run.epoch_losses[:10])
    assert np.all(np.diff(first) <= 0), f"epoch losses {first}"


def test_deep_training_reduces_loss_over_session(deep_run):
    sessions = np.asarray(deep_run.epoch_losses).reshape(-1, 50)
    assert np.all(sessions[:, -1] < sessions[:, 0])


def test_tube_value_bounded():
    rec = run_agent(ExperimentConfig(), AGENT1, controller="tube")
    assert np.all(np.isfinite(rec.V_m)) and rec.V_m.max() < 10.0


def test_reference_is_shared_and_starts_at_x0():
    cfg = ExperimentConfig()
    setup = build_setup(cfg)
    ref = governor_reference(cfg, setup, AGENT1.x0)
    assert ref is governor_reference(cfg, setup, AGENT1.x0)
    np.testing.assert_array_equal(ref.x_ref[0], AGENT1.x0)


def test_background_training_mode_runs():
    rec = run_agent(replace(SHORT, deterministic_training=False), AGENT1, controller="deep")
    assert rec.constraints_ok


def test_csv_round_trip(tmp_path):
    rec = run_agent(SHORT, AGENT1, controller="shallow")
    path = outputs.write_run_csv(rec, tmp_path / "r.csv")
    back = outputs.read_run_csv(path)
    cols = outputs.record_columns(rec)
    for k in outputs.RUN_HEADER:
        np.testing.assert_array_equal(back[k], cols[k])


def test_empty_record_header_only(tmp_path):
    path = outputs.write_run_csv(empty_record(), tmp_path / "e.csv")
    rows = list(csv.reader(path.open()))
    assert rows == [list(outputs.RUN_HEADER)]


def test_byte_identical_outputs(tmp_path):
    blobs = []
    for k in range(2):
        recs = [run_agent(SHORT, a, controller="deep", agent_index=i)
                for i, a in enumerate(SHORT.agents)]
        paths = outputs.emit_outputs(recs, None, tmp_path / str(k), plots=False)
        blobs.append([p.read_bytes() for p in paths])
    assert blobs[0] == blobs[1]


def test_plot_labels(tmp_path):
    rec = run_agent(SHORT, AGENT1, controller="tube")
    fig = outputs.plot_agent([rec], tmp_path / "p.svg")
    assert fig.axes[0].get_ylabel() == "Roll angle (deg.)"
    assert fig.axes[1].get_ylabel() == "Roll rate (deg./sec.)"
    assert fig.axes[1].get_xlabel() == "Time steps"
    assert (tmp_path / "p.svg").read_text().lstrip().startswith("<?xml")


def test_summary_csv(tmp_path):
    rep = run_experiment(replace(SHORT, seeds=(0,)))
    path = outputs.write_summary_csv(rep, tmp_path / "s.csv")
    rows = list(csv.DictReader(path.open()))
    assert len(rows) == 3 * 2 * 2
    assert all(float(r["median_mse"]) >= 0 for r in rows)


def test_cli_run_and_errors(tmp_path, capsys):
    cfgfile = tmp_path / "c.ini"
    cfgfile.write_text("[experiment]\nsteps = 30\n")
    assert cli.main(["run", "--config", str(cfgfile), "--out-dir", str(tmp_path / "o"),
                     "--mode", "shallow", "--seed", "3"]) == 0
    assert (tmp_path / "o" / "run_shallow_agent1_seed3.csv").exists()
    assert (tmp_path / "o" / "agent1_seed3.svg").exists()
    bad = tmp_path / "bad.ini"
    bad.write_text("[mpc]\nhorizon = -1\n")
    assert cli.main(["run", "--config", str(bad)]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_cli_bench_short(tmp_path, capsys):
    cfgfile = tmp_path / "c.ini"
    cfgfile.write_text("[experiment]\nsteps = 30\nseeds = 0\n[output]\nplots = off\n")
    assert cli.main(["bench", "--config", str(cfgfile), "--out-dir", str(tmp_path / "b")]) == 0
    assert (tmp_path / "b" / "summary.csv").exists()
    assert "deep/shallow" in capsys.readouterr().out
