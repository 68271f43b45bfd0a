"""Uniform access to language and vision model backends."""

from .backends import (
    Backend,
    FunctionBackend,
    LiveBackend,
    ScriptedBackend,
    build_body,
    canonical_request,
    complete,
    extract_content,
    open_backend,
    scripted_key,
)
from .prompts import load_prompt, render_prompt
from .schemas import get_schema, register, serialize_payload, validate_response
from .types import BackendProfile, CallCounter, ImageAttachment, ModelRequest, ModelResponse

__all__ = [
    "Backend",
    "BackendProfile",
    "CallCounter",
    "FunctionBackend",
    "ImageAttachment",
    "LiveBackend",
    "ModelRequest",
    "ModelResponse",
    "ScriptedBackend",
    "build_body",
    "canonical_request",
    "complete",
    "extract_content",
    "get_schema",
    "load_prompt",
    "open_backend",
    "register",
    "render_prompt",
    "scripted_key",
    "serialize_payload",
    "validate_response",
]
