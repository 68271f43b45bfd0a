"""Reply schemas and the validator used for every model call.

Each schema id maps to a JSON Schema plus an optional semantic post-check.
Parametrised families use ``<base>:<arg>`` ids, e.g. ``select_index_v1:3``
accepts an integer in ``[1, 3]``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Any, Callable, Optional

from jsonschema import Draft202012Validator
from jsonschema.exceptions import best_match

from ..errors import FormatError, IndexOutOfRange

SKILLS = ("pick_place", "drag", "rotate")
GRIPPER_COMMANDS = ("open", "close", "hold")
POSE_FIELDS = ("center", "grasp")
ORIENTATION_REFS = ("grasp", "top_down", "keep")
VERDICTS = ("proceed", "complete", "failed")

_FENCE = re.compile(r"^```[a-zA-Z]*\s*\n?(.*?)\n?```$", re.S)


@dataclass(frozen=True)
class Schema:
    schema_id: str
    parse: Callable[[str], Any]
    serialize: Callable[[Any], str]


_REGISTRY: dict[str, Schema] = {}
_FAMILIES: dict[str, Callable[[str], Schema]] = {}


def register(schema: Schema) -> Schema:
    _REGISTRY[schema.schema_id] = schema
    return schema


def register_family(base_id: str, factory: Callable[[str], Schema]) -> None:
    _FAMILIES[base_id] = factory


def get_schema(schema_id: str) -> Schema:
    if schema_id in _REGISTRY:
        return _REGISTRY[schema_id]
    base, sep, arg = schema_id.partition(":")
    if sep and base in _FAMILIES:
        return register(_FAMILIES[base](arg))
    raise KeyError(f"schema {schema_id!r} is not registered")


def is_registered(schema_id: str) -> bool:
    try:
        get_schema(schema_id)
    except (KeyError, ValueError):
        return False
    return True


def validate_response(raw: str, schema_id: str) -> Any:
    """Parse ``raw`` against ``schema_id`` or raise :class:`FormatError`."""
    return get_schema(schema_id).parse(raw)


def serialize_payload(payload: Any, schema_id: str) -> str:
    return get_schema(schema_id).serialize(payload)


def _reject_constant(name: str) -> float:
    raise ValueError(f"non-finite number {name}")


def _load_json(raw: str) -> Any:
    text = raw.strip()
    m = _FENCE.match(text)
    if m:
        text = m.group(1).strip()
    try:
        return json.loads(text, parse_constant=_reject_constant)
    except ValueError as e:
        raise FormatError(f"reply is not valid JSON ({e})", "$") from None


def _json_schema(schema_id: str, spec: dict, post: Optional[Callable[[Any], Any]] = None) -> Schema:
    validator = Draft202012Validator(spec)

    def parse(raw: str) -> Any:
        obj = _load_json(raw)
        err = best_match(validator.iter_errors(obj))
        if err is not None:
            loc = "$" + "".join(f"/{p}" for p in err.absolute_path)
            raise FormatError(err.message, loc)
        return post(obj) if post else obj

    def serialize(payload: Any) -> str:
        return json.dumps(payload, sort_keys=True)

    return Schema(schema_id, parse, serialize)


_STRING_LIST = {"type": "array", "items": {"type": "string", "minLength": 1}}

register(
    _json_schema(
        "scene_v1",
        {
            "type": "object",
            "required": ["description", "objects"],
            "properties": {"description": {"type": "string"}, "objects": _STRING_LIST},
        },
    )
)

_STATUS_SCHEMA = _json_schema(
    "status_v1",
    {
        "type": "object",
        "required": ["verdict"],
        "properties": {"verdict": {"enum": list(VERDICTS)}, "rationale": {"type": "string"}},
    },
    post=lambda o: {"verdict": o["verdict"], "rationale": o.get("rationale", "")},
)


def _parse_status(raw: str) -> dict:
    # a bare verdict word is accepted as shorthand
    word = raw.strip().strip('."').lower()
    if word in VERDICTS:
        return {"verdict": word, "rationale": ""}
    return _STATUS_SCHEMA.parse(raw)


register(Schema("status_v1", _parse_status, _STATUS_SCHEMA.serialize))

register(
    _json_schema(
        "subtask_v1",
        {
            "type": "object",
            "required": ["subtask"],
            "properties": {
                "subtask": {"type": "string", "pattern": r"\S"},
                "descriptors": {"type": "object", "additionalProperties": {"type": "string"}},
            },
        },
        post=lambda o: {"subtask": o["subtask"], "descriptors": dict(o.get("descriptors", {}))},
    )
)

register(
    _json_schema(
        "keywords_v1",
        {
            "type": "object",
            "required": ["keywords"],
            "properties": {"keywords": {**_STRING_LIST, "minItems": 1}},
        },
    )
)

_STEP = {
    "type": "object",
    "required": ["object_index", "field", "offset", "orientation_ref", "gripper", "annotation"],
    "properties": {
        "object_index": {"type": "integer", "minimum": 1},
        "field": {"enum": list(POSE_FIELDS)},
        "offset": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        "orientation_ref": {"enum": list(ORIENTATION_REFS)},
        "gripper": {"enum": list(GRIPPER_COMMANDS)},
        "annotation": {"type": "string"},
        "yaw": {"type": "number"},
    },
}


def _check_actions(obj: dict) -> dict:
    if obj["steps"][0]["gripper"] == "close":
        raise FormatError("first step must not close the gripper", "$/steps/0/gripper")
    return obj


register(
    _json_schema(
        "actions_v1",
        {
            "type": "object",
            "required": ["skill", "steps"],
            "properties": {
                "skill": {"enum": list(SKILLS)},
                "steps": {"type": "array", "items": _STEP, "minItems": 1},
            },
        },
        post=_check_actions,
    )
)


def _select_index_family(arg: str) -> Schema:
    n = int(arg)
    if n < 1:
        raise ValueError("select_index needs at least one candidate")
    schema_id = f"select_index_v1:{n}"

    def parse(raw: str) -> int:
        text = raw.strip().strip(".")
        if not re.fullmatch(r"[+-]?\d+", text):
            raise FormatError(f"expected a single integer in [1, {n}], got {raw.strip()[:40]!r}", "$")
        value = int(text)
        if not 1 <= value <= n:
            raise IndexOutOfRange(f"index {value} outside [1, {n}]", "$")
        return value

    return Schema(schema_id, parse, str)


register_family("select_index_v1", _select_index_family)
