"""Config-driven experiment runner and command-line front end."""

from .config import ExperimentConfig, parse_config, parse_text
from .runner import ExperimentResult, run_experiment
from .shipped import list_experiments, load_experiment

__all__ = ["ExperimentConfig", "ExperimentResult", "list_experiments", "load_experiment",
           "parse_config", "parse_text", "run_experiment"]
