"""Benchmark suites: N episodes per task, repeated, averaged."""

from __future__ import annotations

import dataclasses
import json
from collections import Counter
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Sequence

from ..clock import SimClock
from ..controller import ActionCache
from ..simworld import BUILTIN_SCENARIOS
from .config import RunConfig
from .episode import Agents, run_episode


def round_half_up(value, places: int) -> float:
    q = Decimal(1).scaleb(-places)
    return float(Decimal(str(value)).quantize(q, rounding=ROUND_HALF_UP))


def average_rate(rates: Sequence[float], places: int = 1) -> float:
    """Mean of percentage rates, rounded half-up (51.25 -> 51.3)."""
    if not rates:
        raise ValueError("need at least one rate")
    total = sum(Decimal(str(r)) for r in rates)
    return round_half_up(total / len(rates), places)


def episode_seed(base: int, repeat: int, episode: int, episodes_per_task: int) -> int:
    return base + repeat * episodes_per_task + episode


@dataclass
class BenchmarkResult:
    episodes_per_task: int
    repeats: int
    per_repeat: dict[str, list[float]] = field(default_factory=dict)
    backend_calls: int = 0
    cache_hits: int = 0
    errors: Counter = field(default_factory=Counter)

    @property
    def per_task(self) -> dict[str, float]:
        return {name: float(sum(r) / len(r)) for name, r in self.per_repeat.items()}

    @property
    def average(self) -> float:
        return average_rate(list(self.per_task.values()))

    def table(self) -> str:
        names = list(self.per_repeat)
        width = max([len("average")] + [len(n) for n in names])
        head = f"{'task':<{width}}  " + "  ".join(f"rep{r + 1:>3}" for r in range(self.repeats)) + "    mean"
        lines = [head, "-" * len(head)]
        for n in names:
            reps = "  ".join(f"{v:6.1f}" for v in self.per_repeat[n])
            lines.append(f"{n:<{width}}  {reps}  {round_half_up(self.per_task[n], 1):6.1f}")
        lines.append("-" * len(head))
        lines.append(f"{'average':<{width}}  " + " " * (8 * self.repeats) + f"{self.average:6.1f}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "episodes_per_task": self.episodes_per_task,
            "repeats": self.repeats,
            "per_repeat": self.per_repeat,
            "per_task": self.per_task,
            "average": self.average,
            "backend_calls": self.backend_calls,
            "cache_hits": self.cache_hits,
            "errors": dict(self.errors),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def run_benchmark(
    scenario_list: Sequence[str], episodes_per_task: int, repeats: int, config: RunConfig
) -> BenchmarkResult:
    """Per-task rate is the mean over repeats of 100 * successes / episodes.

    The action cache is shared within a repeat and cleared between repeats.
    """
    if episodes_per_task < 1 or repeats < 1:
        raise ValueError("episodes_per_task and repeats must be >= 1")
    names = list(BUILTIN_SCENARIOS) if list(scenario_list) == ["all"] else list(scenario_list)
    clock = SimClock()
    agents = Agents(config, clock)
    cache = ActionCache()
    result = BenchmarkResult(episodes_per_task, repeats, {n: [] for n in names})
    scenarios = {}
    for n in names:
        scenarios[n] = dataclasses.replace(config, scenario=n).load_scenario()
    for r in range(repeats):
        cache.clear()
        for n in names:
            sc = scenarios[n]
            task = config.task or sc.task
            wins = 0
            for e in range(episodes_per_task):
                seed = episode_seed(config.seed, r, e, episodes_per_task)
                ep = run_episode(task, sc, config, seed=seed, agents=agents, cache=cache, clock=clock)
                wins += ep.success
                result.backend_calls += ep.backend_call_count
                result.cache_hits += ep.cache_hits
                if ep.error:
                    result.errors[ep.error.split(":", 1)[0]] += 1
            result.per_repeat[n].append(100.0 * wins / episodes_per_task)
    return result

