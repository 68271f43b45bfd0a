"""Episode runner, benchmark suites, data collection and trajectory files."""

from .bench import BenchmarkResult, average_rate, round_half_up, run_benchmark
from .collect import DatasetStats, GridSweep, collect_dataset, compute_stats, success_rate
from .config import ROLES, RunConfig, load_config
from .episode import Agents, EpisodeResult, run_episode
from .trajectory import (
    FORMAT_VERSION,
    TrajectoryRecord,
    TrajectorySink,
    read_trajectory,
    replay_trajectory,
    write_trajectory,
)

__all__ = [
    "Agents",
    "BenchmarkResult",
    "DatasetStats",
    "EpisodeResult",
    "FORMAT_VERSION",
    "GridSweep",
    "ROLES",
    "RunConfig",
    "TrajectoryRecord",
    "TrajectorySink",
    "average_rate",
    "collect_dataset",
    "compute_stats",
    "load_config",
    "read_trajectory",
    "replay_trajectory",
    "round_half_up",
    "run_benchmark",
    "run_episode",
    "success_rate",
    "write_trajectory",
]
