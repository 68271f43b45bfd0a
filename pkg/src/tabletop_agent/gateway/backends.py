"""Model backends: live HTTP chat-completion, transcript replay and
in-process responders, all sharing one retry-and-validate loop."""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import threading
from pathlib import Path
from typing import Any, Callable, Optional

import requests

from ..clock import SystemClock
from ..errors import ConfigError, FormatError, ScriptMiss, TransportError
from .schemas import get_schema, validate_response
from .types import BackendProfile, CallCounter, ModelRequest, ModelResponse

log = logging.getLogger(__name__)

CORRECTION_SUFFIX = "reply with only the required format"


def canonical_request(request: ModelRequest) -> str:
    """Canonical JSON text for a request; temperature is deliberately left out."""
    return json.dumps(
        {
            "messages": [[role, text] for role, text in request.messages],
            "schema": request.schema_id,
            "images": [img.digest for img in request.images],
        },
        sort_keys=True,
        ensure_ascii=False,
    )


def scripted_key(request: ModelRequest) -> str:
    return hashlib.sha256(canonical_request(request).encode("utf-8")).hexdigest()


def correction_message(err: FormatError) -> str:
    return f"Your previous reply was rejected: {err}. Please {CORRECTION_SUFFIX}."


class Backend:
    """Base class. Subclasses implement :meth:`_send` returning raw reply text."""

    def __init__(
        self,
        max_retries: int = 2,
        counter: Optional[CallCounter] = None,
        clock=None,
        simulated_latency: float = 0.0,
    ):
        if max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        self.max_retries = max_retries
        self.counter = counter if counter is not None else CallCounter()
        self.clock = clock or SystemClock()
        self.simulated_latency = simulated_latency

    def _send(self, request: ModelRequest, original: ModelRequest, attempt: int) -> str:
        raise NotImplementedError

    def complete(self, request: ModelRequest) -> ModelResponse:
        get_schema(request.schema_id)  # unregistered schema is a programming error
        start = self.clock.now()
        current = request
        last_error: Optional[FormatError] = None
        for attempt in range(self.max_retries + 1):
            self.counter.record(request.schema_id)
            raw = self._send(current, request, attempt)
            if self.simulated_latency:
                self.clock.advance(self.simulated_latency)
            try:
                payload = validate_response(raw, request.schema_id)
            except FormatError as e:
                log.debug("format error on %s attempt %d: %s", request.schema_id, attempt + 1, e)
                last_error = e
                current = current.with_message("user", correction_message(e))
                continue
            return ModelResponse(raw, payload, attempt + 1, self.clock.now() - start)
        assert last_error is not None
        last_error.attempts = self.max_retries + 1
        raise last_error


class ScriptedBackend(Backend):
    """Replays a transcript: a list of ``{key, replies}`` records.

    Records may use ``schema`` instead of ``key`` to match any request with
    that schema id; exact keys take precedence. Replies are consumed in order
    per key occurrence (retries included); the last reply repeats once the
    list is exhausted.
    """

    def __init__(self, records: list[dict], **kw):
        super().__init__(**kw)
        self._by_key: dict[str, list[str]] = {}
        self._by_schema: dict[str, list[str]] = {}
        for rec in records:
            replies = list(rec.get("replies", []))
            if not replies or not all(isinstance(r, str) for r in replies):
                raise ConfigError("transcript record needs a non-empty list of string replies")
            if "key" in rec:
                self._by_key[rec["key"]] = replies
            elif "schema" in rec:
                self._by_schema[rec["schema"]] = replies
            else:
                raise ConfigError("transcript record needs 'key' or 'schema'")
        self._cursor: dict[str, int] = {}
        self._lock = threading.Lock()

    @classmethod
    def load(cls, path: str | Path, **kw) -> "ScriptedBackend":
        try:
            records = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read transcript {path}: {e}") from e
        if not isinstance(records, list):
            raise ConfigError("transcript must be a list of records")
        return cls(records, **kw)

    def _send(self, request, original, attempt):
        key = scripted_key(original)
        if key in self._by_key:
            slot, replies = key, self._by_key[key]
        elif original.schema_id in self._by_schema:
            slot, replies = "schema:" + original.schema_id, self._by_schema[original.schema_id]
        else:
            raise ScriptMiss(f"no scripted reply for schema {original.schema_id} key {key[:12]}")
        with self._lock:
            i = self._cursor.get(slot, 0)
            self._cursor[slot] = i + 1
        return replies[min(i, len(replies) - 1)]


class FunctionBackend(Backend):
    """Backend whose replies come from a Python callable ``request -> text``."""

    def __init__(self, responder: Callable[[ModelRequest], str], **kw):
        super().__init__(**kw)
        self.responder = responder

    def _send(self, request, original, attempt):
        return self.responder(request)


def extract_content(data: Any) -> str:
    """Pull the reply text out of a chat-completion response body.

    Path: ``choices[0].message.content``; content may be a string or a list
    of ``{"type": "text", "text": ...}`` parts.
    """
    try:
        content = data["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise TransportError("response has no choices[0].message.content") from None
    if isinstance(content, str):
        return content
    if isinstance(content, list):
        return "".join(p.get("text", "") for p in content if isinstance(p, dict))
    raise TransportError(f"unsupported content type {type(content).__name__}")


def build_body(request: ModelRequest, model: str) -> dict:
    messages: list[dict] = [{"role": role, "content": text} for role, text in request.messages]
    if request.images:
        # images ride on the last user message
        user_idx = [i for i, m in enumerate(messages) if m["role"] == "user"]
        idx = user_idx[-1] if user_idx else len(messages) - 1
        parts: list[dict] = [{"type": "text", "text": messages[idx]["content"]}]
        for img in request.images:
            b64 = base64.b64encode(img.to_png()).decode("ascii")
            parts.append({"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}})
        messages[idx] = {"role": messages[idx]["role"], "content": parts}
    return {"model": model, "messages": messages, "temperature": request.temperature}


class LiveBackend(Backend):
    def __init__(self, profile: BackendProfile, session: Optional[requests.Session] = None, **kw):
        super().__init__(max_retries=profile.max_retries, **kw)
        self.profile = profile
        self.session = session or requests.Session()

    def _send(self, request, original, attempt):
        headers = {"Content-Type": "application/json"}
        if self.profile.api_key_env:
            key = os.environ.get(self.profile.api_key_env)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        body = build_body(request, self.profile.model_name)
        try:
            resp = self.session.post(self.profile.endpoint_url, json=body, headers=headers, timeout=self.profile.timeout)
        except requests.RequestException as e:
            # the message may echo headers; keep only the exception type
            raise TransportError(f"{type(e).__name__} contacting {self.profile.endpoint_url}") from None
        if resp.status_code >= 400:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:300]}")
        try:
            data = resp.json()
        except ValueError:
            raise TransportError("response body is not JSON") from None
        return extract_content(data)


_OPEN: dict[BackendProfile, Backend] = {}
_OPEN_LOCK = threading.Lock()


def open_backend(
    profile: BackendProfile,
    counter: Optional[CallCounter] = None,
    clock=None,
    oracle: Optional[Callable[[ModelRequest], str]] = None,
) -> Backend:
    kw: dict[str, Any] = dict(counter=counter, clock=clock, simulated_latency=profile.simulated_latency)
    if profile.kind == "live":
        return LiveBackend(profile, **kw)
    if profile.transcript == "oracle":
        if oracle is None:
            raise ConfigError("the oracle backend needs a simulator-bound responder")
        return FunctionBackend(oracle, max_retries=profile.max_retries, **kw)
    return ScriptedBackend.load(profile.transcript, max_retries=profile.max_retries, **kw)


def complete(request: ModelRequest, backend: Backend | BackendProfile) -> ModelResponse:
    """Run one request. A profile is resolved to a process-wide backend handle."""
    if isinstance(backend, BackendProfile):
        with _OPEN_LOCK:
            if backend not in _OPEN:
                _OPEN[backend] = open_backend(backend)
            backend = _OPEN[backend]
    return backend.complete(request)
