"""Reasoning agent: status evaluation, one-step-at-a-time planning with a
history memory, and keyword extraction for the detector."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

from .errors import EpisodeClosed, FormatError, LoopDetected
from .gateway import ModelRequest, render_prompt
from .perception import SceneDescription, normalize_label

log = logging.getLogger(__name__)

DEFAULT_LOOP_LIMIT = 2
SUBTASK_STATUSES = ("pending", "succeeded", "failed")


@dataclass
class SubTask:
    id: int
    text: str
    keywords: list[str] = field(default_factory=list)
    status: str = "pending"
    descriptors: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.id < 1:
            raise ValueError("sub-task ids start at 1")
        if not self.text.strip():
            raise ValueError("sub-task text must be nonempty")
        if self.status not in SUBTASK_STATUSES:
            raise ValueError(f"unknown status {self.status!r}")


def normalize_subtask(text: str) -> str:
    return " ".join(text.lower().split())


@dataclass
class PlanningMemory:
    """Per-episode history of (sub-task, outcome). Append-only."""

    history: list[tuple[SubTask, str]] = field(default_factory=list)
    repeat_counts: Counter = field(default_factory=Counter)
    closed: bool = False

    def record(self, subtask: SubTask, outcome: str, detail: str = "") -> None:
        if self.closed:
            raise EpisodeClosed("episode already reached a terminal verdict")
        if outcome not in ("succeeded", "failed"):
            raise ValueError(f"outcome must be succeeded or failed, got {outcome!r}")
        subtask.status = outcome
        self.history.append((subtask, outcome))
        self.repeat_counts[normalize_subtask(subtask.text)] += 1

    @property
    def next_id(self) -> int:
        return len(self.history) + 1

    def serialize(self) -> str:
        if not self.history:
            return "(none yet)"
        return "\n".join(f"{st.id}. {st.text} -> {outcome}" for st, outcome in self.history)


@dataclass(frozen=True)
class StatusDecision:
    verdict: str
    rationale_text: str = ""

    @property
    def terminal(self) -> bool:
        return self.verdict != "proceed"


_VERDICT_MAP = {"proceed": "proceed", "complete": "task_complete", "failed": "task_failed"}


def _check_open(memory: PlanningMemory) -> None:
    if memory.closed:
        raise EpisodeClosed("episode already reached a terminal verdict")


def evaluate_status(
    scene_desc: SceneDescription, task_text: str, memory: PlanningMemory, backend, last_report: str = ""
) -> StatusDecision:
    """Ask the model whether to proceed. A terminal verdict closes ``memory``.

    An unparseable reply after all retries is treated as task failure.
    """
    _check_open(memory)
    prompt = render_prompt(
        "status_eval_v1",
        task=task_text,
        scene=scene_desc.text,
        report=last_report or "(no sub-task executed yet)",
        history=memory.serialize(),
    )
    try:
        payload = backend.complete(ModelRequest(messages=(("system", prompt),), schema_id="status_v1")).parsed_payload
        decision = StatusDecision(_VERDICT_MAP[payload["verdict"]], payload.get("rationale", ""))
    except FormatError as e:
        decision = StatusDecision("task_failed", f"status reply unusable: {e}")
    if decision.terminal:
        memory.closed = True
    return decision


def loop_guard(memory: PlanningMemory, candidate: SubTask, limit: int = DEFAULT_LOOP_LIMIT) -> bool:
    """True (accept) unless the candidate text already failed ``limit`` times."""
    if limit < 1:
        raise ValueError("limit must be >= 1")
    key = normalize_subtask(candidate.text)
    failures = sum(1 for st, outcome in memory.history if outcome != "succeeded" and normalize_subtask(st.text) == key)
    return failures < limit


def extract_keywords(subtask_text: str, backend) -> list[str]:
    if not subtask_text.strip():
        raise ValueError("sub-task text must be nonempty")
    prompt = render_prompt("extract_keywords_v1", subtask=subtask_text)
    payload = backend.complete(ModelRequest(messages=(("system", prompt),), schema_id="keywords_v1")).parsed_payload
    out: dict[str, None] = {}
    for kw in payload["keywords"]:
        n = normalize_label(kw)
        if n:
            out.setdefault(n, None)
    if not out:
        raise FormatError("keyword list is empty after normalization", "$/keywords")
    return list(out)


def plan_next_subtask(
    scene_desc: SceneDescription,
    task_text: str,
    memory: PlanningMemory,
    backend,
    keyword_backend=None,
    loop_limit: int = DEFAULT_LOOP_LIMIT,
) -> SubTask:
    """Plan exactly one next sub-task and fill in its detector keywords.

    Raises :class:`LoopDetected` (and closes ``memory``) if the planner keeps
    proposing a sub-task that already failed ``loop_limit`` times.
    """
    _check_open(memory)
    prompt = render_prompt("plan_subtask_v1", task=task_text, scene=scene_desc.text, history=memory.serialize())
    payload = backend.complete(ModelRequest(messages=(("system", prompt),), schema_id="subtask_v1")).parsed_payload
    candidate = SubTask(
        memory.next_id,
        " ".join(payload["subtask"].split()),
        descriptors={normalize_label(k): v for k, v in payload["descriptors"].items()},
    )
    if not loop_guard(memory, candidate, loop_limit):
        memory.closed = True
        raise LoopDetected(f"sub-task {candidate.text!r} already failed {loop_limit} times")
    candidate.keywords = extract_keywords(candidate.text, keyword_backend or backend)
    return candidate
