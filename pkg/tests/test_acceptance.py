"""Acceptance suite: every criterion at its stated tolerance.

Each test prints one ``[PASS]``/``[FAIL]`` line (visible with ``pytest -s``)
and then asserts the verdict.
"""

import time

import pytest

from deepmpc.harness import verify
from deepmpc.harness.config import ExperimentConfig
from deepmpc.harness.runner import run_experiment


@pytest.fixture(scope="module")
def cfg():
    return ExperimentConfig()


@pytest.fixture(scope="module")
def benchmark(cfg):
    t0 = time.perf_counter()
    report = run_experiment(cfg)
    return report, time.perf_counter() - t0


def _report(result: verify.CheckResult):
    print(result.line())
    assert result.passed, result.line()


def test_acceptance_01_mse_ratios_and_runtime(benchmark):
    report, elapsed = benchmark
    r = verify.check_ratios(report)
    ok = r.passed and elapsed <= 300.0
    _report(verify.CheckResult("1 benchmark ratios", ok, r.detail + f"; runtime {elapsed:.1f} s (<= 300)"))


def test_acceptance_02_constraints(benchmark):
    r = verify.check_constraints(benchmark[0].records)
    _report(verify.CheckResult("2 " + r.name, r.passed, r.detail))


def test_acceptance_03_adaptive_bound(benchmark):
    r = verify.check_adaptive_bound(benchmark[0].records, slack=1e-12)
    _report(verify.CheckResult("3 " + r.name, r.passed, r.detail))


def test_acceptance_04_mean_square_adaptation(cfg):
    r = verify.check_mean_square_bound(cfg)
    _report(verify.CheckResult("4 " + r.name, r.passed, r.detail))


def test_acceptance_05_projection_inequality():
    r = verify.check_projection(n=10_000)
    _report(verify.CheckResult("5 " + r.name, r.passed, r.detail))


def test_acceptance_06_value_decrease(cfg):
    r = verify.check_value_decrease(cfg, tol=1e-7)
    _report(verify.CheckResult("6 " + r.name, r.passed, r.detail))


def test_acceptance_07_qp_oracle(benchmark):
    r = verify.check_qp_oracle(n=200, records=benchmark[0].records)
    _report(verify.CheckResult("7 " + r.name, r.passed, r.detail))


def test_acceptance_08_pseudoinverse_cancellation():
    r = verify.check_assumption2()
    _report(verify.CheckResult("8 " + r.name, r.passed, r.detail))


def test_acceptance_09_gradients():
    r = verify.check_gradients()
    _report(verify.CheckResult("9 " + r.name, r.passed, r.detail))


def test_acceptance_10_numerics():
    r = verify.check_numerics(n_draws=1_000_000)
    _report(verify.CheckResult("10 " + r.name, r.passed, r.detail))


def test_acceptance_11_replay_monotone(benchmark, cfg):
    r = verify.check_replay_monotone(benchmark[0].records, cfg)
    _report(verify.CheckResult("11 " + r.name, r.passed, r.detail))


def test_acceptance_12_determinism(cfg):
    r = verify.check_determinism(cfg)
    _report(verify.CheckResult("12 " + r.name, r.passed, r.detail))
