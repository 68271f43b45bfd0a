"""Per-episode trajectory files (JSON lines) and their replay.

A file holds a header record, one record per executed waypoint and a final
record with the end state. Files are written to a temporary name and then
renamed, so a reader never sees a partial episode.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from ..controller import WaypointAction
from ..errors import SinkError
from ..geometry import CameraModel
from ..simworld import Region, WorldState, execute_action, worlds_equal

FORMAT_VERSION = 1


@dataclass
class TrajectoryRecord:
    episode_id: str
    scenario: str
    task: str
    seed: int
    steps: list[dict]
    initial_state: dict
    final_state: dict
    success: bool


@dataclass
class TrajectorySink:
    """Directory of ``<episode_id>.jsonl`` files sharing one header."""

    directory: Path
    camera: CameraModel
    thresholds: dict = field(default_factory=dict)
    written: list[Path] = field(default_factory=list)

    def __post_init__(self):
        self.directory = Path(self.directory)

    def header(self, record: TrajectoryRecord) -> dict:
        return {
            "record": "header",
            "format_version": FORMAT_VERSION,
            "scenario": record.scenario,
            "camera": self.camera.to_dict(),
            "thresholds": self.thresholds,
            "episode_id": record.episode_id,
            "task": record.task,
            "seed": record.seed,
            "initial_state": record.initial_state,
        }


def write_trajectory(record: TrajectoryRecord, sink: TrajectorySink) -> Path:
    times = [s["timestamp"] for s in record.steps]
    if times != sorted(times):
        raise ValueError("steps must be ordered by timestamp")
    lines = [sink.header(record)]
    lines += [{"record": "step", "index": i, **s} for i, s in enumerate(record.steps)]
    lines.append({"record": "final", "final_state": record.final_state, "success": record.success})
    text = "".join(json.dumps(line, sort_keys=True) + "\n" for line in lines)
    target = sink.directory / f"{record.episode_id}.jsonl"
    try:
        sink.directory.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=sink.directory, prefix=".tmp-", suffix=".jsonl")
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, target)
    except OSError as e:
        raise SinkError(f"cannot write {target}: {e}") from e
    sink.written.append(target)
    return target


def read_trajectory(path: str | os.PathLike) -> tuple[dict, TrajectoryRecord]:
    try:
        lines = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    except (OSError, json.JSONDecodeError) as e:
        raise SinkError(f"cannot read trajectory {path}: {e}") from e
    if not lines or lines[0].get("record") != "header" or lines[-1].get("record") != "final":
        raise SinkError(f"{path} is not a complete trajectory file")
    header, final = lines[0], lines[-1]
    if header["format_version"] != FORMAT_VERSION:
        raise SinkError(f"unsupported format version {header['format_version']}")
    steps = []
    for line in lines[1:-1]:
        step = dict(line)
        step.pop("record")
        step.pop("index")
        steps.append(step)
    record = TrajectoryRecord(
        episode_id=header["episode_id"],
        scenario=header["scenario"],
        task=header["task"],
        seed=header["seed"],
        steps=steps,
        initial_state=header["initial_state"],
        final_state=final["final_state"],
        success=final["success"],
    )
    return header, record


def replay_trajectory(
    path: str | os.PathLike, tol: float = 0.0, unreachable: tuple[Region, ...] = ()
) -> list[str]:
    """Re-execute the recorded actions from the recorded initial state.

    Returns the differences between the replayed and recorded final states
    (empty when they agree).
    """
    _, record = read_trajectory(path)
    world = WorldState.from_dict(record.initial_state)
    for step in record.steps:
        world = execute_action(world, WaypointAction.from_dict(step["action"]), unreachable)
    return worlds_equal(world, WorldState.from_dict(record.final_state), tol)


def record_from_episode(episode_id: str, scenario: str, result) -> TrajectoryRecord:
    assert result.initial_world is not None and result.final_world is not None
    return TrajectoryRecord(
        episode_id=episode_id,
        scenario=scenario,
        task=result.task_text,
        seed=result.seed,
        steps=result.steps,
        initial_state=result.initial_world.to_dict(),
        final_state=result.final_world.to_dict(),
        success=result.success,
    )


def default_thresholds(scenario, grasp_radius: float) -> dict:
    return {
        "success": {f"{g.subject_label}->{g.target_label}": g.threshold for g in scenario.goals},
        "grasp_radius": grasp_radius,
    }

