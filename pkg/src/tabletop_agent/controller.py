"""Controller agent: sub-task + object records -> Cartesian waypoints.

Action sequences are generated by a language model in a *symbolic* form
(object index + pose field + offset) and then bound to the current object
records. The symbolic form is what gets cached, so a cached sequence can be
replayed against a scene where the objects have moved.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

from .errors import FormatError, InvalidPair, ReachFailure, UnboundIndex
from .gateway import ModelRequest, render_prompt
from .gateway.schemas import GRIPPER_COMMANDS, ORIENTATION_REFS, POSE_FIELDS, SKILLS
from .geometry import Quat, Vec3, quat_from_yaw, quat_multiply, top_down
from .perception import ObjectRecord

log = logging.getLogger(__name__)

APPROACH_HEIGHT = 0.10
# whether a skill may use a zero-score fallback grasp
SKILL_ALLOWS_FALLBACK = {"pick_place": True, "drag": True, "rotate": False}


@dataclass(frozen=True)
class WaypointAction:
    position: Vec3
    orientation: Quat
    gripper: str
    annotation: str = ""

    def __post_init__(self):
        if not all(math.isfinite(c) for c in self.position):
            raise ValueError("waypoint position must be finite")
        if abs(math.sqrt(sum(c * c for c in self.orientation)) - 1.0) > 1e-9:
            raise ValueError("waypoint orientation must be a unit quaternion")
        if self.gripper not in GRIPPER_COMMANDS:
            raise ValueError(f"unknown gripper command {self.gripper!r}")

    def to_dict(self) -> dict:
        return {
            "position": list(self.position),
            "quaternion": list(self.orientation),
            "gripper": self.gripper,
            "annotation": self.annotation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WaypointAction":
        return cls(tuple(d["position"]), tuple(d["quaternion"]), d["gripper"], d.get("annotation", ""))


@dataclass(frozen=True)
class ActionSequence:
    steps: tuple[WaypointAction, ...]
    source: str = "generated"

    def __post_init__(self):
        if not self.steps:
            raise ValueError("an action sequence needs at least one step")
        if self.steps[0].gripper == "close":
            raise ValueError("the first step must not close the gripper")


@dataclass(frozen=True)
class SymbolicStep:
    object_index: int
    field: str
    offset: Vec3
    orientation_ref: str
    gripper: str
    annotation: str = ""
    yaw: float = 0.0

    def __post_init__(self):
        if self.object_index < 1:
            raise ValueError("object_index starts at 1")
        if self.field not in POSE_FIELDS or self.orientation_ref not in ORIENTATION_REFS:
            raise ValueError("bad pose reference")
        if self.gripper not in GRIPPER_COMMANDS:
            raise ValueError(f"unknown gripper command {self.gripper!r}")
        if not all(math.isfinite(c) for c in self.offset) or not math.isfinite(self.yaw):
            raise ValueError("offsets must be finite")

    def to_dict(self) -> dict:
        d = {
            "object_index": self.object_index,
            "field": self.field,
            "offset": list(self.offset),
            "orientation_ref": self.orientation_ref,
            "gripper": self.gripper,
            "annotation": self.annotation,
        }
        if self.yaw:
            d["yaw"] = self.yaw
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SymbolicStep":
        return cls(
            object_index=int(d["object_index"]),
            field=d["field"],
            offset=tuple(float(c) for c in d["offset"]),
            orientation_ref=d["orientation_ref"],
            gripper=d["gripper"],
            annotation=d.get("annotation", ""),
            yaw=float(d.get("yaw", 0.0)),
        )


@dataclass(frozen=True)
class ParameterizedActionSequence:
    skill_name: str
    steps: tuple[SymbolicStep, ...]

    def __post_init__(self):
        if self.skill_name not in SKILLS:
            raise ValueError(f"unknown skill {self.skill_name!r}")
        if not self.steps:
            raise ValueError("a sequence needs at least one step")

    def to_payload(self) -> dict:
        return {"skill": self.skill_name, "steps": [s.to_dict() for s in self.steps]}

    @classmethod
    def from_payload(cls, payload: dict) -> "ParameterizedActionSequence":
        return cls(payload["skill"], tuple(SymbolicStep.from_dict(s) for s in payload["steps"]))

    @property
    def max_index(self) -> int:
        return max(s.object_index for s in self.steps)


def _step(i, fld, dz, orient, grip, note, yaw=0.0, dx=0.0, dy=0.0) -> SymbolicStep:
    return SymbolicStep(i, fld, (dx, dy, dz), orient, grip, note, yaw)


def skill_library(h: float = APPROACH_HEIGHT) -> dict[str, ParameterizedActionSequence]:
    """One exemplar trajectory per skill; object 1 is the manipulated object."""
    quarter = math.pi / 2
    return {
        "pick_place": ParameterizedActionSequence(
            "pick_place",
            (
                _step(1, "grasp", h, "grasp", "open", "move above the {1}"),
                _step(1, "grasp", 0.0, "grasp", "close", "grasp the {1}"),
                _step(1, "grasp", h, "grasp", "hold", "lift the {1}"),
                _step(2, "center", h, "keep", "hold", "move above the {2}"),
                _step(2, "center", h, "keep", "open", "release the {1} onto the {2}"),
            ),
        ),
        "drag": ParameterizedActionSequence(
            "drag",
            (
                _step(1, "center", h, "top_down", "open", "move above the {1}"),
                _step(1, "center", 0.0, "keep", "close", "press onto the {1}"),
                _step(1, "center", 0.0, "keep", "hold", "drag the {1} to the left", dy=0.10),
                _step(1, "center", 0.0, "keep", "open", "let go of the {1}", dy=0.10),
                _step(1, "center", h, "keep", "open", "retreat from the {1}", dy=0.10),
            ),
        ),
        "rotate": ParameterizedActionSequence(
            "rotate",
            (
                _step(1, "grasp", h, "grasp", "open", "move above the {1}"),
                _step(1, "grasp", 0.0, "grasp", "close", "grasp the {1}"),
                _step(1, "grasp", 0.02, "grasp", "hold", "rotate the {1} by 90 degrees", yaw=quarter),
                _step(1, "grasp", 0.0, "grasp", "open", "set down the {1}", yaw=quarter),
                _step(1, "grasp", h, "grasp", "open", "retreat from the {1}", yaw=quarter),
            ),
        ),
    }


_SKILL_BLURB = {
    "pick_place": "pick up object 1 and place it on object 2",
    "drag": "drag object 1 along the table without lifting it",
    "rotate": "rotate object 1 in place about the vertical axis",
}


def skill_exemplars(h: float = APPROACH_HEIGHT) -> str:
    blocks = []
    for name, seq in skill_library(h).items():
        blocks.append(f"Skill: {name} ({_SKILL_BLURB[name]})\n{json.dumps(seq.to_payload())}")
    return "\n\n".join(blocks)


def _fmt(v: Sequence[float]) -> str:
    return "(" + ", ".join(f"{c:.4f}" for c in v) + ")"


def serialize_objects(objects: Sequence[ObjectRecord]) -> str:
    """Text-only listing of object centers and grasps, numbered from 1."""
    lines = []
    for n, rec in enumerate(objects, start=1):
        g = rec.grasp
        if g.fallback:
            grasp = "grasp=none"
        else:
            grasp = f"grasp={_fmt(g.position)} quat={_fmt(g.orientation)} width={g.width:.3f} score={g.score:.2f}"
        lines.append(f"[{n}] {rec.label} (instance {rec.instance_index}): center={_fmt(rec.center)}; {grasp}")
    return "\n".join(lines)


def canonical_prompt(text: str) -> str:
    """Trim and collapse whitespace; case is preserved."""
    return " ".join(text.split())


_ANNOTATION_SLOT = re.compile(r"\{(\d+)\}")


def _render_annotation(template: str, objects: Sequence[ObjectRecord]) -> str:
    def sub(m):
        i = int(m.group(1))
        if not 1 <= i <= len(objects):
            raise UnboundIndex(f"annotation references object {i} but only {len(objects)} in scope")
        return objects[i - 1].label

    return _ANNOTATION_SLOT.sub(sub, template)


def bind_parameters(param_seq: ParameterizedActionSequence, objects: Sequence[ObjectRecord]) -> ActionSequence:
    """Resolve symbolic pose references against concrete object records."""
    steps = []
    prev: Optional[Quat] = None
    for s in param_seq.steps:
        if s.object_index > len(objects):
            raise UnboundIndex(f"step references object {s.object_index} but only {len(objects)} in scope")
        rec = objects[s.object_index - 1]
        base = rec.grasp.position if s.field == "grasp" else rec.center
        position = (base[0] + s.offset[0], base[1] + s.offset[1], base[2] + s.offset[2])
        if s.orientation_ref == "grasp":
            q = rec.grasp.orientation
        elif s.orientation_ref == "top_down":
            q = top_down()
        elif s.field == "grasp":
            q = rec.grasp.orientation
        else:
            q = prev if prev is not None else top_down()
        if s.yaw:
            q = quat_multiply(quat_from_yaw(s.yaw), q)
        steps.append(WaypointAction(position, q, s.gripper, _render_annotation(s.annotation, objects)))
        prev = q
    return ActionSequence(tuple(steps))


def check_valid_pairs(param_seq: ParameterizedActionSequence, objects: Sequence[ObjectRecord]) -> None:
    """Reject grasp references to objects that only have a fallback grasp,
    unless the skill tolerates it."""
    if SKILL_ALLOWS_FALLBACK[param_seq.skill_name]:
        return
    for s in param_seq.steps:
        if s.field == "grasp" and s.object_index <= len(objects) and objects[s.object_index - 1].grasp.fallback:
            raise InvalidPair(
                f"{param_seq.skill_name} pairs a grasp with object {s.object_index} "
                f"({objects[s.object_index - 1].label}) which has no grasp"
            )


def _generate(subtask, objects, backend, h):
    if not objects:
        raise ValueError("generation needs at least one object record")
    labels = {o.label for o in objects}
    missing = [k for k in getattr(subtask, "keywords", ()) if k not in labels]
    if missing:
        raise ValueError(f"no object records for keywords {missing}")
    prompt = render_prompt(
        "generate_actions_v1",
        subtask=subtask.text,
        objects=serialize_objects(objects),
        exemplars=skill_exemplars(h),
    )
    response = backend.complete(ModelRequest(messages=(("system", prompt),), schema_id="actions_v1"))
    param = ParameterizedActionSequence.from_payload(response.parsed_payload)
    if param.max_index > len(objects):
        raise UnboundIndex(f"reply references object {param.max_index} but only {len(objects)} in scope")
    check_valid_pairs(param, objects)
    return bind_parameters(param, objects), param, response.attempt_count


def generate_action_sequence(
    subtask, objects: Sequence[ObjectRecord], backend, approach_height: float = APPROACH_HEIGHT
) -> tuple[ActionSequence, ParameterizedActionSequence]:
    seq, param, _ = _generate(subtask, objects, backend, approach_height)
    return seq, param


class ActionCache:
    """Exact-match cache from canonical sub-task prompt to symbolic sequence.

    With a ``path`` the cache is loaded on construction and rewritten after
    every store.
    """

    def __init__(self, path: Optional[str | os.PathLike] = None):
        self.path = Path(path) if path else None
        self.entries: dict[str, ParameterizedActionSequence] = {}
        self.hit_count = 0
        self.miss_count = 0
        self._lock = threading.RLock()
        if self.path and self.path.exists():
            self._load()

    def __len__(self) -> int:
        return len(self.entries)

    def lookup(self, subtask_prompt: str) -> Optional[ParameterizedActionSequence]:
        key = canonical_prompt(subtask_prompt)
        with self._lock:
            seq = self.entries.get(key)
            if seq is None:
                self.miss_count += 1
            else:
                self.hit_count += 1
            return seq

    def store(self, subtask_prompt: str, param_seq: ParameterizedActionSequence) -> "ActionCache":
        with self._lock:
            self.entries[canonical_prompt(subtask_prompt)] = param_seq
            if self.path:
                self.save()
        return self

    def clear(self) -> None:
        with self._lock:
            self.entries.clear()
            self.hit_count = self.miss_count = 0

    def to_records(self) -> list[dict]:
        with self._lock:
            return [
                {"prompt": p, "skill_name": s.skill_name, "steps": [st.to_dict() for st in s.steps]}
                for p, s in self.entries.items()
            ]

    def save(self, path: Optional[str | os.PathLike] = None) -> None:
        target = Path(path) if path else self.path
        if target is None:
            raise ValueError("no cache path configured")
        target.parent.mkdir(parents=True, exist_ok=True)
        data = json.dumps(self.to_records(), indent=1)
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=".cache-", suffix=".json")
        with os.fdopen(fd, "w") as f:
            f.write(data)
        os.replace(tmp, target)

    def _load(self) -> None:
        records = json.loads(self.path.read_text())
        for r in records:
            self.entries[r["prompt"]] = ParameterizedActionSequence(
                r["skill_name"], tuple(SymbolicStep.from_dict(s) for s in r["steps"])
            )

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ActionCache":
        return cls(path)


def cache_lookup(cache: ActionCache, subtask_prompt: str) -> Optional[ParameterizedActionSequence]:
    return cache.lookup(subtask_prompt)


def cache_store(cache: ActionCache, subtask_prompt: str, param_seq: ParameterizedActionSequence) -> ActionCache:
    return cache.store(subtask_prompt, param_seq)


class Executor(Protocol):
    def execute(self, action: WaypointAction) -> tuple[bool, str]: ...


@dataclass
class StepOutcome:
    action: WaypointAction
    ok: bool
    detail: str = ""


@dataclass
class ExecutionReport:
    subtask_id: int
    success: bool
    source: str
    backend_calls: int = 0
    steps: list[StepOutcome] = field(default_factory=list)
    error: str = ""
    intervention: bool = False
    actions: Optional[ActionSequence] = None
    param_seq: Optional[ParameterizedActionSequence] = None

    def summary(self) -> str:
        if self.success:
            return f"sub-task {self.subtask_id} succeeded ({self.source}, {len(self.steps)} steps)"
        return f"sub-task {self.subtask_id} failed ({self.source}): {self.error}"


def execute_subtask(
    subtask,
    objects: Sequence[ObjectRecord],
    cache: ActionCache,
    backend,
    executor: Executor,
    approach_height: float = APPROACH_HEIGHT,
) -> ExecutionReport:
    """Cache hit: bind and run with no model call. Miss: generate, run, and
    cache the symbolic form if every step succeeded."""
    prompt = canonical_prompt(subtask.text)
    param = cache.lookup(prompt)
    report = ExecutionReport(subtask.id, False, "cache" if param is not None else "generated")
    try:
        if param is not None:
            seq = bind_parameters(param, objects)
        else:
            seq, param, report.backend_calls = _generate(subtask, objects, backend, approach_height)
    except FormatError as e:
        report.backend_calls = getattr(e, "attempts", 0)
        report.error = f"{type(e).__name__}: {e}"
        return report
    except (UnboundIndex, InvalidPair, ValueError) as e:
        report.backend_calls = report.backend_calls or (1 if report.source == "generated" else 0)
        report.error = f"{type(e).__name__}: {e}"
        return report
    report.actions = ActionSequence(seq.steps, report.source)
    report.param_seq = param

    for action in seq.steps:
        try:
            ok, detail = executor.execute(action)
        except ReachFailure as e:
            report.steps.append(StepOutcome(action, False, str(e)))
            report.error = f"ReachFailure: {e}"
            report.intervention = True
            return report
        report.steps.append(StepOutcome(action, ok, detail))
        if not ok:
            report.error = detail
            return report
    report.success = True
    if report.source == "generated":
        cache.store(prompt, param)
    return report
