"""Automated data collection: reset, run, check, re-execute, record."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterator, Optional, Sequence, Union

from ..clock import SimClock
from ..controller import ActionCache
from ..errors import PlacementFailure
from ..simworld import RuleBasedReset, Scenario, SimEnv, grid_positions, reset_scene, spawn_scene
from .config import RunConfig
from .episode import Agents, EpisodeResult, run_episode
from .trajectory import TrajectorySink, record_from_episode, write_trajectory

log = logging.getLogger(__name__)

REEXECUTE_ATTEMPTS = 3


@dataclass(frozen=True)
class DatasetStats:
    total: int
    valid: int
    success_rate: float
    total_duration: float
    mean_episode_duration: float
    interventions: int
    mean_time_between_interventions: Optional[float]

    def __post_init__(self):
        if not 0 <= self.valid <= self.total:
            raise ValueError("need 0 <= valid <= total")

    def merge(self, other: "DatasetStats") -> "DatasetStats":
        """Combine two collections; the result does not depend on order."""
        total = self.total + other.total
        episode_time = self.mean_episode_duration * self.total + other.mean_episode_duration * other.total
        return stats_from_counts(
            total,
            self.valid + other.valid,
            self.total_duration + other.total_duration,
            episode_time,
            self.interventions + other.interventions,
        )

    def lines(self) -> list[str]:
        gap = self.mean_time_between_interventions
        return [
            f"trajectories      {self.total}",
            f"valid             {self.valid}",
            f"success rate      {self.success_rate:.2f} %",
            f"total duration    {self.total_duration:.1f} s",
            f"mean episode      {self.mean_episode_duration:.1f} s",
            f"interventions     {self.interventions}",
            f"intervention gap  {'-' if gap is None else f'{gap:.1f} s'}",
        ]


def success_rate(valid: int, total: int) -> float:
    """100 * valid / total rounded half-up to two decimals."""
    if total <= 0:
        raise ValueError("total must be positive")
    return float((Decimal(100 * valid) / Decimal(total)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def stats_from_counts(total: int, valid: int, duration: float, episode_time: float, interventions: int) -> DatasetStats:
    return DatasetStats(
        total=total,
        valid=valid,
        success_rate=success_rate(valid, total),
        total_duration=duration,
        mean_episode_duration=episode_time / total,
        interventions=interventions,
        # total duration over intervention count; None without interventions
        mean_time_between_interventions=duration / interventions if interventions else None,
    )


def compute_stats(results: Sequence[EpisodeResult], interventions: int, duration: float) -> DatasetStats:
    if not results:
        raise ValueError("results must be nonempty")
    valid = sum(1 for r in results if r.success)
    return stats_from_counts(len(results), valid, duration, sum(r.wall_time for r in results), interventions)


@dataclass(frozen=True)
class GridSweep:
    """Rule-based reset: move ``label`` through a list of table positions."""

    label: str
    positions: tuple[tuple[float, float], ...]

    @classmethod
    def over(cls, label: str, region, nx: int, ny: int) -> "GridSweep":
        return cls(label, tuple(grid_positions(region, nx, ny)))

    @classmethod
    def for_scenario(cls, scenario: Scenario, nx: int = 5, ny: int = 5) -> "GridSweep":
        """Sweep the goal subject over its own spawn region."""
        t = scenario.template(scenario.goal.subject_label)
        if t.placement.rule != "uniform_region":
            raise ValueError(f"{t.label} has no spawn region to sweep")
        return cls.over(t.label, t.placement.region, nx, ny)


ResetPolicy = Union[str, GridSweep]


def _resets(scenario: Scenario, policy: ResetPolicy, base_seed: int) -> Iterator[tuple[int, object]]:
    """Yield ``(seed, world)`` per reset; rule-based positions are visited once."""
    if policy == "random":
        k = 0
        while True:
            seed = base_seed + k
            yield seed, spawn_scene(scenario, seed)
            k += 1
    elif isinstance(policy, GridSweep):
        base = spawn_scene(scenario, base_seed)
        for k, pos in enumerate(policy.positions):
            seed = base_seed + k
            try:
                yield seed, reset_scene(base, scenario, RuleBasedReset.of({policy.label: pos}), seed)
            except PlacementFailure as e:
                log.warning("skipping position %s: %s", pos, e)
    else:
        raise ValueError(f"unknown reset policy {policy!r}")


def collect_dataset(
    scenario: Scenario,
    reset_policy: ResetPolicy,
    target_count: Optional[int],
    config: RunConfig,
    sink: TrajectorySink,
    *,
    clock=None,
    cache: Optional[ActionCache] = None,
    attempts: int = REEXECUTE_ATTEMPTS,
    max_resets: Optional[int] = None,
) -> DatasetStats:
    """Collect until ``target_count`` valid trajectories (or the reset policy
    runs out). Failed episodes are re-executed from the same reset up to
    ``attempts`` times; a reach failure counts one intervention and moves on
    to the next reset. Only successful episodes are written."""
    if target_count is not None and target_count < 1:
        raise ValueError("target_count must be >= 1")
    if reset_policy == "random" and target_count is None and max_resets is None:
        raise ValueError("random resets need target_count or max_resets")
    clock = clock or SimClock()
    agents = Agents(config, clock)
    cache = cache if cache is not None else ActionCache(config.cache_path or None)
    task = config.task or scenario.task
    results: list[EpisodeResult] = []
    interventions = valid = 0
    t0 = clock.now()

    for n, (seed, world) in enumerate(_resets(scenario, reset_policy, config.seed)):
        if (target_count is not None and valid >= target_count) or (max_resets is not None and n >= max_resets):
            break
        for attempt in range(attempts):
            env = SimEnv(
                scenario, seed, config.noise, config.unreachable, world=world, clock=clock, step_time=config.step_time
            )
            result = run_episode(task, scenario, config, seed=seed, env=env, agents=agents, cache=cache, clock=clock)
            results.append(result)
            if result.intervention:
                interventions += 1
                log.info("reset %d: intervention (%s); restoring the scene", n, result.error)
                break
            if result.success:
                valid += 1
                write_trajectory(record_from_episode(f"{scenario.name}-{n:04d}-a{attempt}", scenario.name, result), sink)
                break
            log.info("reset %d attempt %d failed (%s); re-executing", n, attempt + 1, result.termination)
        else:
            log.warning("reset %d: giving up after %d attempts", n, attempts)

    if not results:
        raise ValueError("the reset policy produced no episodes")
    return compute_stats(results, interventions, clock.now() - t0)
