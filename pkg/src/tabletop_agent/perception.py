"""Scene and object perception.

Turns camera observations into text scene descriptions and into per-object
records (3D center plus grasp pose) that the controller can reference by
index.
"""

from __future__ import annotations

import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional, Protocol, Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .errors import BadDepth, DetectorUnavailable, EmptyResult, TransportError
from .gateway import ImageAttachment, ModelRequest, render_prompt
from .geometry import CameraModel, Quat, Vec3, pixel_to_base, top_down

log = logging.getLogger(__name__)

DEFAULT_GRASP_RADIUS = 0.05
DETECT_PREFIX = "every "
MARKER_RADIUS = 12

_STOPWORDS = frozenset(
    "a an the of on onto in into to from and or with at by it its is are be up down "
    "then this that these those for from over under near next".split()
)


def normalize_label(label: str) -> str:
    return " ".join(label.lower().split())


def content_words(text: str) -> set[str]:
    return {w for w in re.findall(r"[a-z0-9]+", text.lower()) if w not in _STOPWORDS}


@dataclass(frozen=True)
class SceneDescription:
    text: str
    mentioned_objects: tuple[str, ...]
    source_prompt_id: str = ""

    def __post_init__(self):
        seen: dict[str, None] = {}
        for label in self.mentioned_objects:
            n = normalize_label(label)
            if n:
                seen.setdefault(n, None)
        object.__setattr__(self, "mentioned_objects", tuple(seen))


@dataclass(frozen=True)
class Detection:
    label: str
    bbox: tuple[float, float, float, float]
    confidence: float = 1.0

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate bbox {self.bbox}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")


@dataclass(frozen=True)
class GraspCandidate:
    position: Vec3
    orientation: Quat
    width: float = 0.0
    score: float = 0.0
    fallback: bool = False

    def __post_init__(self):
        if abs(math.sqrt(sum(c * c for c in self.orientation)) - 1.0) > 1e-9:
            raise ValueError("grasp orientation must be a unit quaternion")
        if self.width < 0:
            raise ValueError("grasp width must be >= 0")


@dataclass(frozen=True)
class ObjectRecord:
    label: str
    instance_index: int
    center: Vec3
    grasp: GraspCandidate
    bbox: tuple[float, float, float, float]

    def __post_init__(self):
        if self.instance_index < 1:
            raise ValueError("instance_index starts at 1")
        if not all(math.isfinite(c) for c in self.center):
            raise ValueError("object center must be finite")


@dataclass(frozen=True)
class DescriptionScore:
    recall: float
    relevance: float


@dataclass
class PerceptionResult:
    records: list[ObjectRecord]
    warnings: list[str] = field(default_factory=list)


class Detector(Protocol):
    def detect(self, image: Any, phrase: str) -> list[dict]: ...


class GraspSource(Protocol):
    def grasps(self, observation: Any) -> list[GraspCandidate]: ...


def _attachment(image: Any) -> ImageAttachment:
    return image if isinstance(image, ImageAttachment) else ImageAttachment.from_array(np.asarray(image))


def describe_scene(image, task_text: str, prompt_id: str, backend) -> SceneDescription:
    request = ModelRequest(
        messages=(("system", render_prompt(prompt_id, task=task_text)),),
        schema_id="scene_v1",
        images=(_attachment(image),),
    )
    payload = backend.complete(request).parsed_payload
    return SceneDescription(payload["description"], tuple(payload["objects"]), prompt_id)


def score_scene_description(
    desc: SceneDescription, ground_truth_labels: Iterable[str], task_text: str
) -> DescriptionScore:
    """Recall against the true object set and relevance to the task.

    A mentioned label is task-relevant when all of its content words occur
    among the task's content words (so "green block" matches "stack the green
    block ...").
    """
    truth = {normalize_label(t) for t in ground_truth_labels}
    if not truth:
        raise ValueError("ground truth label set must be nonempty")
    mentioned = set(desc.mentioned_objects)
    recall = len(mentioned & truth) / len(truth)
    task_words = content_words(task_text)
    relevant = [m for m in mentioned if content_words(m) and content_words(m) <= task_words]
    relevance = len(relevant) / max(1, len(mentioned))
    return DescriptionScore(recall, relevance)


def _clip_bbox(bbox: Sequence[float], width: int, height: int) -> Optional[tuple[float, float, float, float]]:
    x0, y0, x1, y1 = (float(c) for c in bbox)
    x0, x1 = max(0.0, x0), min(float(width - 1), x1)
    y0, y1 = max(0.0, y0), min(float(height - 1), y1)
    if x0 >= x1 or y0 >= y1:
        return None
    return (x0, y0, x1, y1)


def detect_objects(image, labels: Sequence[str], detector: Detector, max_workers: int = 1) -> list[Detection]:
    """Query the detector once per label with the phrase ``"every <label>"``.

    Boxes are clipped to the image and tagged with the unprefixed label.
    Raises :class:`EmptyResult` for the first label (in request order) that
    yields no box.
    """
    if not labels:
        raise ValueError("labels must be nonempty")
    height, width = np.asarray(image).shape[:2]

    def query(label: str) -> list[dict]:
        try:
            return list(detector.detect(image, DETECT_PREFIX + label))
        except (TransportError, ConnectionError, OSError) as e:
            raise DetectorUnavailable(str(e)) from e

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            raw = list(pool.map(query, labels))
    else:
        raw = [query(label) for label in labels]

    out: list[Detection] = []
    for label, boxes in zip(labels, raw):
        found = 0
        for box in boxes:
            clipped = _clip_bbox(box["bbox"], width, height)
            if clipped is None:
                continue
            out.append(Detection(label, clipped, float(box.get("confidence", 1.0))))
            found += 1
        if not found:
            raise EmptyResult(label)
    return out


def bbox_center(bbox: Sequence[float]) -> tuple[float, float]:
    x0, y0, x1, y1 = bbox
    return ((x0 + x1) / 2.0, (y0 + y1) / 2.0)


def annotate_instances(image: np.ndarray, pixels: Sequence[tuple[float, float]]) -> np.ndarray:
    """Copy of ``image`` with discs numbered 1..N drawn at ``pixels``."""
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    canvas = Image.fromarray(arr.astype(np.uint8)).convert("RGB")
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default()
    r = MARKER_RADIUS
    for n, (u, v) in enumerate(pixels, start=1):
        draw.ellipse((u - r, v - r, u + r, v + r), fill=(200, 30, 30))
        draw.text((u, v), str(n), fill=(255, 255, 255), font=font, anchor="mm")
    return np.asarray(canvas)


def disambiguate_instances(image, candidates: Sequence[ObjectRecord], descriptor_text: str, backend) -> int:
    """Ask a vision model which numbered candidate matches the descriptor."""
    if len(candidates) < 2:
        raise ValueError("disambiguation needs at least two candidates")
    if len({c.label for c in candidates}) != 1:
        raise ValueError("candidates must share one label")
    pixels = [bbox_center(c.bbox) for c in candidates]
    annotated = annotate_instances(np.asarray(image), pixels)
    listing = "\n".join(f"[{n}] pixel=({u:.1f}, {v:.1f})" for n, (u, v) in enumerate(pixels, start=1))
    prompt = render_prompt(
        "select_instance_v1", count=str(len(candidates)), descriptor=descriptor_text, candidates=listing
    )
    request = ModelRequest(
        messages=(("system", prompt),),
        schema_id=f"select_index_v1:{len(candidates)}",
        images=(ImageAttachment.from_array(annotated),),
    )
    return int(backend.complete(request).parsed_payload)


def fallback_grasp(center: Sequence[float]) -> GraspCandidate:
    return GraspCandidate(tuple(float(c) for c in center), top_down(), 0.0, 0.0, fallback=True)


def match_grasp(
    center: Sequence[float], candidates: Sequence[GraspCandidate], radius: float = DEFAULT_GRASP_RADIUS
) -> GraspCandidate:
    """Best-scoring candidate within ``radius`` of ``center``.

    Ties go to the smaller distance, then the lower list index. An empty
    neighborhood yields a zero-score top-down grasp at ``center``.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    c = tuple(float(x) for x in center)
    best = None
    best_key = None
    for i, g in enumerate(candidates):
        # math.dist is correctly rounded, so radius-boundary membership is stable
        d = math.dist(g.position, c)
        if d > radius:
            continue
        key = (-g.score, d, i)
        if best_key is None or key < best_key:
            best, best_key = g, key
    if best is None:
        log.info("no grasp within %.3f m of %s; using top-down fallback", radius, tuple(center))
        return fallback_grasp(center)
    return best


def _depth_at(depth: np.ndarray, u: float, v: float) -> float:
    h, w = depth.shape
    iu = min(max(int(math.floor(u + 0.5)), 0), w - 1)
    iv = min(max(int(math.floor(v + 0.5)), 0), h - 1)
    return float(depth[iv, iu])


def perceive_objects(
    observation,
    object_labels: Sequence[str],
    cam: CameraModel,
    detector: Detector,
    grasp_source: GraspSource,
    backend=None,
    descriptor_map: Optional[Mapping[str, str]] = None,
    radius: float = DEFAULT_GRASP_RADIUS,
) -> PerceptionResult:
    """Detection, projection and grasp matching for the requested labels.

    ``observation`` needs ``image`` (H x W x 3) and ``depth`` (H x W meters).
    Records come back in request order, instances sorted left to right in
    the image and numbered from 1. With a descriptor for a label that has
    several instances, only the instance picked by the model is kept.
    """
    labels = list(dict.fromkeys(normalize_label(l) for l in object_labels))
    descriptors = {normalize_label(k): v for k, v in (descriptor_map or {}).items()}
    detections = detect_objects(observation.image, labels, detector)
    grasps = list(grasp_source.grasps(observation))
    depth = np.asarray(observation.depth)

    result = PerceptionResult([])
    for label in labels:
        dets = sorted((d for d in detections if d.label == label), key=lambda d: bbox_center(d.bbox))
        located = []
        for det in dets:
            u, v = bbox_center(det.bbox)
            try:
                center = pixel_to_base((u, v), _depth_at(depth, u, v), cam)
            except BadDepth as e:
                msg = f"skipped {label} at pixel ({u:.1f}, {v:.1f}): {e}"
                log.warning(msg)
                result.warnings.append(msg)
                continue
            located.append((det, center))
        records = [
            ObjectRecord(label, n, center, match_grasp(center, grasps, radius), det.bbox)
            for n, (det, center) in enumerate(located, start=1)
        ]
        if len(records) >= 2 and label in descriptors and backend is not None:
            chosen = disambiguate_instances(observation.image, records, descriptors[label], backend)
            records = [records[chosen - 1]]
        result.records.extend(records)
    return result
