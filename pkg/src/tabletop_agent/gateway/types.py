from __future__ import annotations

import hashlib
import io
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..errors import ConfigError

ROLES = ("system", "user")
NDARRAY_MEDIA_TYPE = "application/x-ndarray"


@dataclass(frozen=True)
class ImageAttachment:
    """Image bytes plus enough metadata to decode them.

    Raw arrays are kept unencoded (``application/x-ndarray``) so that digests
    are cheap; they are encoded to PNG only when sent over the wire.
    """

    data: bytes
    media_type: str = "image/png"
    shape: tuple[int, ...] = ()
    dtype: str = ""

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ImageAttachment":
        arr = np.ascontiguousarray(arr)
        return cls(data=arr.tobytes(), media_type=NDARRAY_MEDIA_TYPE, shape=arr.shape, dtype=str(arr.dtype))

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.media_type}|{self.shape}|{self.dtype}|".encode())
        h.update(self.data)
        return h.hexdigest()

    def to_array(self) -> np.ndarray:
        if self.media_type == NDARRAY_MEDIA_TYPE:
            return np.frombuffer(self.data, dtype=self.dtype).reshape(self.shape)
        from PIL import Image

        return np.asarray(Image.open(io.BytesIO(self.data)))

    def to_png(self) -> bytes:
        if self.media_type == "image/png":
            return self.data
        from PIL import Image

        arr = self.to_array()
        if arr.dtype != np.uint8:
            # silhouette / depth maps: rescale into 8 bit for transport
            a = arr.astype(float)
            finite = np.isfinite(a)
            lo = a[finite].min() if finite.any() else 0.0
            hi = a[finite].max() if finite.any() else 1.0
            a = np.where(finite, (a - lo) / max(hi - lo, 1e-12) * 255.0, 0.0)
            arr = a.astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(arr).save(buf, format="PNG")
        return buf.getvalue()


@dataclass(frozen=True)
class ModelRequest:
    messages: tuple[tuple[str, str], ...]
    schema_id: str
    images: tuple[ImageAttachment, ...] = ()
    temperature: float = 0.0

    def __post_init__(self):
        if not self.messages:
            raise ValueError("a request needs at least one message")
        for role, text in self.messages:
            if role not in ROLES:
                raise ValueError(f"unknown role {role!r}")
            if not isinstance(text, str):
                raise TypeError("message text must be a string")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    def with_message(self, role: str, text: str) -> "ModelRequest":
        return ModelRequest(self.messages + ((role, text),), self.schema_id, self.images, self.temperature)

    @property
    def text(self) -> str:
        return "\n".join(t for _, t in self.messages)


@dataclass
class ModelResponse:
    raw_text: str
    parsed_payload: Any
    attempt_count: int
    latency: float


@dataclass(frozen=True)
class BackendProfile:
    """How to reach one model backend.

    ``kind="scripted"`` needs ``transcript``: a path to a transcript file, or
    the literal ``"oracle"`` for the simulator-conditioned responder.
    """

    kind: str
    model_name: str = ""
    endpoint_url: str = ""
    transcript: str = ""
    timeout: float = 60.0
    max_retries: int = 2
    api_key_env: str = ""
    simulated_latency: float = 0.0

    def __post_init__(self):
        if self.kind not in ("live", "scripted"):
            raise ConfigError(f"unknown backend kind {self.kind!r}")
        if self.kind == "live" and not self.endpoint_url:
            raise ConfigError("live backend requires endpoint_url")
        if self.kind == "scripted" and not self.transcript:
            raise ConfigError("scripted backend requires a transcript path")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if self.timeout <= 0:
            raise ConfigError("timeout must be positive")

    @classmethod
    def parse(cls, spec: str, **kw) -> "BackendProfile":
        """Parse the short CLI form ``scripted:<path|oracle>`` or ``live:<url>``."""
        kind, _, rest = spec.partition(":")
        if kind == "scripted":
            return cls(kind="scripted", transcript=rest, **kw)
        if kind == "live":
            return cls(kind="live", endpoint_url=rest, **kw)
        raise ConfigError(f"cannot parse backend spec {spec!r}")


@dataclass
class CallCounter:
    """Thread-safe count of transport-level model calls."""

    total: int = 0
    by_schema: Counter = field(default_factory=Counter)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def record(self, schema_id: str) -> None:
        base = schema_id.split(":", 1)[0]
        with self._lock:
            self.total += 1
            self.by_schema[base] += 1

    def snapshot(self) -> tuple[int, dict[str, int]]:
        with self._lock:
            return self.total, dict(self.by_schema)

