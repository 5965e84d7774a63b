from uniformpf.harness.config import ConfigError, ExperimentConfig, build_model, load_config
from uniformpf.harness.plotting import SchemaError, emit_plot_script
from uniformpf.harness.runner import run_experiment, sweep_uniformity, write_trajectories

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "SchemaError",
    "build_model",
    "emit_plot_script",
    "load_config",
    "run_experiment",
    "sweep_uniformity",
    "write_trajectories",
]
