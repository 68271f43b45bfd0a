"""Prompt assets, loaded by id from the package ``prompts`` directory."""

from __future__ import annotations

import functools
import re
from importlib import resources

_SLOT = re.compile(r"\{([a-z_]+)\}")


@functools.lru_cache(maxsize=None)
def load_prompt(prompt_id: str) -> str:
    path = resources.files("tabletop_agent").joinpath("prompts").joinpath(f"{prompt_id}.txt")
    if not path.is_file():
        raise FileNotFoundError(f"no prompt asset {prompt_id!r}")
    return path.read_text(encoding="utf-8")


def prompt_slots(prompt_id: str) -> set[str]:
    return set(_SLOT.findall(load_prompt(prompt_id)))


def render_prompt(prompt_id: str, **slots: str) -> str:
    """Fill ``{slot}`` placeholders. Other braces (JSON examples) are left alone."""
    template = load_prompt(prompt_id)
    missing = prompt_slots(prompt_id) - set(slots)
    if missing:
        raise KeyError(f"prompt {prompt_id} is missing slots {sorted(missing)}")
    return _SLOT.sub(lambda m: str(slots.get(m.group(1), m.group(0))), template)
