"""Simulator-conditioned stand-in for the language models.

:class:`OracleResponder` answers every prompt the agents send by reading
the prompt sections and, where a model would look at the scene, the live
simulator state. It lets the whole pipeline run offline and deterministically.
"""

from __future__ import annotations

import json
import re
from typing import Callable

from .controller import skill_library
from .gateway import ModelRequest
from .perception import normalize_label
from .simworld import SimEnv, check_success, resting_on

_SECTION = re.compile(r"^### ([A-Z ]+)\n(.*?)(?=^### |\Z)", re.S | re.M)
_NOUN = re.compile(
    r"\bthe\s+([a-z][a-z ]*?)(?=\s+(?:and|on|onto|in|into|to|from|with|at|it|by|of|then)\b|\s*[.,;]|\s*$)"
)
_OBJECT_LINE = re.compile(r"^\[(\d+)\] (.+?) \(instance (\d+)\): .*?; (grasp=.*)$", re.M)
_CANDIDATE = re.compile(r"^\[(\d+)\] pixel=\(([-\d.]+), ([-\d.]+)\)$", re.M)


def prompt_sections(text: str) -> dict[str, str]:
    return {m.group(1).strip(): m.group(2).strip() for m in _SECTION.finditer(text)}


def noun_phrases(text: str) -> list[str]:
    """Object phrases introduced by "the", in order of mention."""
    out: dict[str, None] = {}
    for m in _NOUN.finditer(text.lower()):
        out.setdefault(normalize_label(m.group(1)), None)
    return list(out)


def _verb(kind: str) -> str:
    return "stack it on" if kind == "stacked" else "place it on"


class OracleResponder:
    """Callable ``ModelRequest -> reply text`` bound to a :class:`SimEnv`.

    ``env_ref`` returns the environment of the episode currently running, so
    one responder can serve consecutive episodes.
    """

    def __init__(self, env_ref: Callable[[], SimEnv]):
        self.env_ref = env_ref

    def __call__(self, request: ModelRequest) -> str:
        base = request.schema_id.split(":", 1)[0]
        prompt = "\n".join(text for role, text in request.messages if role == "system")
        sections = prompt_sections(prompt)
        handler = getattr(self, "_" + base.removesuffix("_v1"))
        return handler(sections, request)

    # one handler per schema base id

    def _scene(self, sections, request) -> str:
        env = self.env_ref()
        world = env.world
        met = {g.subject_label: g.target_label for g in env.scenario.goals if check_success(world, g)}
        sentences = []
        for o in world.objects:
            if o.label in met:
                sentences.append(f"The {o.label} is on the {met[o.label]}.")
                continue
            support = resting_on(world, o.label)
            sentences.append(f"The {o.label} is on the {support or 'table'}.")
        return json.dumps({"description": " ".join(sentences), "objects": [o.label for o in world.objects]})

    def _status(self, sections, request) -> str:
        scene = sections.get("SCENE", "")
        goals = self.env_ref().scenario.goals
        if all(f"The {g.subject_label} is on the {g.target_label}." in scene for g in goals):
            return json.dumps({"verdict": "complete", "rationale": "every goal relation holds in the scene"})
        return json.dumps({"verdict": "proceed", "rationale": "the goal relation does not hold yet"})

    def _subtask(self, sections, request) -> str:
        scene = sections.get("SCENE", "")
        for g in self.env_ref().scenario.goals:
            if f"The {g.subject_label} is on the {g.target_label}." not in scene:
                return json.dumps({"subtask": f"pick up the {g.subject_label} and {_verb(g.kind)} the {g.target_label}"})
        # nothing left to do; a real planner would still answer
        g = self.env_ref().scenario.goal
        return json.dumps({"subtask": f"pick up the {g.subject_label} and {_verb(g.kind)} the {g.target_label}"})

    def _keywords(self, sections, request) -> str:
        return json.dumps({"keywords": noun_phrases(sections.get("SUBTASK", ""))})

    def _select_index(self, sections, request) -> str:
        descriptor = sections.get("DESCRIPTOR", "").lower()
        cands = [(int(n), float(u)) for n, u, _ in _CANDIDATE.findall(sections.get("CANDIDATES", ""))]
        by_u = sorted(cands, key=lambda c: c[1])
        if "left" in descriptor:
            return str(by_u[0][0])
        if "right" in descriptor:
            return str(by_u[-1][0])
        if "middle" in descriptor or "center" in descriptor:
            return str(by_u[len(by_u) // 2][0])
        return "1"

    def _actions(self, sections, request) -> str:
        subtask = sections.get("SUBTASK", "").lower()
        objects = [(int(n), normalize_label(label)) for n, label, _, _ in _OBJECT_LINE.findall(sections.get("OBJECTS", ""))]
        index = {}
        for n, label in objects:
            index.setdefault(label, n)
        mentioned = [index[p] for p in noun_phrases(subtask) if p in index]
        if "rotate" in subtask:
            skill = "rotate"
        elif "drag" in subtask or "push" in subtask:
            skill = "drag"
        else:
            skill = "pick_place"
        exemplar = skill_library()[skill]
        slots = {1: mentioned[0] if mentioned else 1, 2: mentioned[1] if len(mentioned) > 1 else 1}
        steps = []
        for s in exemplar.steps:
            d = s.to_dict()
            d["object_index"] = slots[s.object_index]
            d["annotation"] = re.sub(r"\{(\d)\}", lambda m: "{%d}" % slots[int(m.group(1))], s.annotation)
            steps.append(d)
        return json.dumps({"skill": skill, "steps": steps})

