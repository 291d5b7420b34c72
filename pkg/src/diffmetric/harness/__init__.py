"""Configuration, data handling, experiment orchestration and the CLI."""
from .config import ExperimentConfig, parse_config
from .data import generate_synthetic, load_dataset, write_dataset
from .experiment import compare_trajectories, emit_outputs, run_experiment
