"""Scene synthesis, benchmarking and the command-line front end."""

from .bench import BenchReport, dense_self_attention, loglog_slope, run_bench
from .config import ConfigError, RunConfig
from .synth import scene_with_voxels, synth_scene

__all__ = [
    "BenchReport",
    "ConfigError",
    "RunConfig",
    "dense_self_attention",
    "loglog_slope",
    "run_bench",
    "scene_with_voxels",
    "synth_scene",
]
