"""Experiment harness: configuration, closed-loop runs, outputs and CLI."""

from deepmpc.harness.config import Agent, ExperimentConfig, load_config
from deepmpc.harness.runner import (AgentRunRecord, MetricsReport, compute_mse, run_agent,
                                    run_experiment)

__all__ = ["Agent", "AgentRunRecord", "ExperimentConfig", "MetricsReport", "compute_mse",
           "load_config", "run_agent", "run_experiment"]
