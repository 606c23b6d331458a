"""Mission-based domain-incremental learning for aerial place recognition."""

from dilvpr.geo_grid import GridMap
from dilvpr.model import ModelParams, Sample
from dilvpr.lifelong import MethodConfig, run_sequence
from dilvpr.synthbench import BenchConfig, generate

__all__ = [
    "BenchConfig",
    "GridMap",
    "MethodConfig",
    "ModelParams",
    "Sample",
    "generate",
    "run_sequence",
]
