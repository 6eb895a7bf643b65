"""Experiment orchestration: config files, checkpoints, runs, reports, CLI."""
from .analysis import PosteriorSamples, compare_speedup, iters_to_threshold, posterior_stats, psnr
from .checkpoint import load_checkpoint, loads_checkpoint, save_checkpoint, checkpoint_bytes
from .config import ExperimentConfig, format_config, image_preset, load_config, parse_config
from .emit import emit_csv, emit_image_svg, emit_matrix_csv, emit_svg
from .pipeline import (
    Experiment,
    load_supervised,
    run_compare,
    run_experiment,
    run_report,
    run_seed,
    run_supervised,
    run_unsupervised,
)

__all__ = [
    "PosteriorSamples", "compare_speedup", "iters_to_threshold", "posterior_stats", "psnr",
    "load_checkpoint", "loads_checkpoint", "save_checkpoint", "checkpoint_bytes",
    "ExperimentConfig", "format_config", "image_preset", "load_config", "parse_config",
    "emit_csv", "emit_image_svg", "emit_matrix_csv", "emit_svg",
    "Experiment", "load_supervised", "run_compare", "run_experiment", "run_report", "run_seed",
    "run_supervised", "run_unsupervised",
]
