"""Deterministic 2.5D tabletop simulator.

Objects are boxes resting on the table or on each other. Poses are given at
the *bottom* center of each box. The gripper teleports between waypoints;
closing near an object's grasp point attaches it rigidly, opening drops it
onto whatever surface lies below its center. Rimmed containers (sink,
basket) expose a floor below their rim.
"""

from __future__ import annotations

import functools
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, MissingObject, PlacementFailure, ReachFailure
from .geometry import (
    CameraModel,
    Quat,
    Vec3,
    base_to_pixel,
    quat_conjugate,
    quat_from_yaw,
    quat_multiply,
    quat_to_matrix,
    top_down,
    yaw_of,
)
from .perception import GraspCandidate, normalize_label

MAX_PLACEMENT_ATTEMPTS = 1000
ATTACH_RADIUS = 0.03
STACK_TOLERANCE = 0.01
HOME_POSITION: Vec3 = (0.3, 0.0, 0.3)
IDENTITY: Quat = (1.0, 0.0, 0.0, 0.0)
BUILTIN_SCENARIOS = ("stack_blocks", "carrot_on_plate", "spoon_on_towel", "eggplant_sink_to_basket")


@dataclass(frozen=True)
class SimObject:
    label: str
    position: Vec3
    extent: Vec3
    orientation: Quat = IDENTITY
    graspable: bool = True
    container: bool = False
    wall: float = 0.0
    floor: float = 0.0

    def __post_init__(self):
        if min(self.extent) <= 0:
            raise ValueError("extent components must be positive")

    @property
    def yaw(self) -> float:
        return yaw_of(self.orientation)

    @property
    def rimmed(self) -> bool:
        return self.wall > 0

    @property
    def top_z(self) -> float:
        return self.position[2] + 2.0 * self.extent[2]

    @property
    def support_z(self) -> float:
        """Height at which something dropped on this object comes to rest."""
        return self.position[2] + self.floor if self.rimmed else self.top_z

    @property
    def grasp_point(self) -> Vec3:
        x, y, _ = self.position
        return (x, y, self.top_z)

    @property
    def surface_center(self) -> Vec3:
        """Center of the surface seen from above at the object's center."""
        x, y, _ = self.position
        return (x, y, self.support_z)

    def local_xy(self, x, y):
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx, dy = x - self.position[0], y - self.position[1]
        return c * dx + s * dy, -s * dx + c * dy

    def contains_xy(self, x: float, y: float) -> bool:
        lx, ly = self.local_xy(x, y)
        return abs(lx) <= self.extent[0] and abs(ly) <= self.extent[1]

    def footprint(self) -> tuple[float, float, float, float]:
        """Axis-aligned bounds ``(x0, y0, x1, y1)`` of the rotated footprint."""
        c, s = abs(math.cos(self.yaw)), abs(math.sin(self.yaw))
        hx = c * self.extent[0] + s * self.extent[1]
        hy = s * self.extent[0] + c * self.extent[1]
        x, y, _ = self.position
        return (x - hx, y - hy, x + hx, y + hy)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "position": list(self.position),
            "orientation": list(self.orientation),
            "extent": list(self.extent),
            "graspable": self.graspable,
            "container": self.container,
            "wall": self.wall,
            "floor": self.floor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimObject":
        return cls(
            label=d["label"],
            position=tuple(d["position"]),
            orientation=tuple(d["orientation"]),
            extent=tuple(d["extent"]),
            graspable=d["graspable"],
            container=d["container"],
            wall=d.get("wall", 0.0),
            floor=d.get("floor", 0.0),
        )


@dataclass(frozen=True)
class WorldState:
    objects: tuple[SimObject, ...]
    gripper_position: Vec3 = HOME_POSITION
    gripper_orientation: Quat = top_down()
    gripper_state: str = "open"
    attached: Optional[int] = None
    attach_offset: Vec3 = (0.0, 0.0, 0.0)
    attach_rotation: Quat = IDENTITY
    rng_seed: int = 0
    step_count: int = 0
    scenario: str = ""

    def __post_init__(self):
        if self.attached is not None and self.gripper_state != "closed":
            raise ValueError("an attached object requires a closed gripper")

    def index(self, label: str) -> int:
        label = normalize_label(label)
        for i, o in enumerate(self.objects):
            if o.label == label:
                return i
        raise MissingObject(label)

    def obj(self, label: str) -> SimObject:
        return self.objects[self.index(label)]

    def to_dict(self) -> dict:
        return {
            "objects": [o.to_dict() for o in self.objects],
            "gripper_position": list(self.gripper_position),
            "gripper_orientation": list(self.gripper_orientation),
            "gripper_state": self.gripper_state,
            "attached": self.attached,
            "attach_offset": list(self.attach_offset),
            "attach_rotation": list(self.attach_rotation),
            "rng_seed": self.rng_seed,
            "step_count": self.step_count,
            "scenario": self.scenario,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldState":
        return cls(
            objects=tuple(SimObject.from_dict(o) for o in d["objects"]),
            gripper_position=tuple(d["gripper_position"]),
            gripper_orientation=tuple(d["gripper_orientation"]),
            gripper_state=d["gripper_state"],
            attached=d["attached"],
            attach_offset=tuple(d["attach_offset"]),
            attach_rotation=tuple(d["attach_rotation"]),
            rng_seed=d["rng_seed"],
            step_count=d["step_count"],
            scenario=d.get("scenario", ""),
        )


# -- scenarios ---------------------------------------------------------------


@dataclass(frozen=True)
class Placement:
    rule: str = "fixed"
    position: tuple[float, float] = (0.0, 0.0)
    region: tuple[tuple[float, float], tuple[float, float]] = ((0.0, 0.0), (0.0, 0.0))
    start: tuple[float, float] = (0.0, 0.0)
    end: tuple[float, float] = (0.0, 0.0)
    on: Optional[str] = None
    yaw: float = 0.0

    def __post_init__(self):
        if self.rule not in ("fixed", "uniform_region", "line"):
            raise ValueError(f"unknown placement rule {self.rule!r}")

    def sample(self, rng: np.random.Generator) -> tuple[float, float]:
        if self.rule == "fixed":
            return self.position
        if self.rule == "uniform_region":
            (x0, x1), (y0, y1) = self.region
            return (float(rng.uniform(x0, x1)), float(rng.uniform(y0, y1)))
        t = float(rng.uniform(0.0, 1.0))
        return (
            self.start[0] + t * (self.end[0] - self.start[0]),
            self.start[1] + t * (self.end[1] - self.start[1]),
        )


@dataclass(frozen=True)
class ObjectTemplate:
    label: str
    extent: Vec3
    placement: Placement
    graspable: bool = True
    container: bool = False
    wall: float = 0.0
    floor: float = 0.0


@dataclass(frozen=True)
class GoalSpec:
    kind: str
    subject_label: str
    target_label: str
    threshold: float = 0.15
    planar: bool = True

    def __post_init__(self):
        if self.kind not in ("on_target", "stacked", "in_region"):
            raise ValueError(f"unknown goal kind {self.kind!r}")
        if self.threshold <= 0:
            raise ValueError("goal threshold must be positive")


@dataclass(frozen=True)
class Region:
    """Axis-aligned box in the base frame, used for unreachable zones."""

    lo: Vec3
    hi: Vec3

    def contains(self, p: Sequence[float]) -> bool:
        return all(l <= c <= h for l, c, h in zip(self.lo, p, self.hi))

    @classmethod
    def column(cls, x: float, y: float, half: float, z_max: float = 10.0) -> "Region":
        """Vertical column of half-width ``half`` around ``(x, y)``."""
        return cls((x - half, y - half, -1.0), (x + half, y + half, z_max))


@dataclass(frozen=True)
class Scenario:
    name: str
    task: str
    objects: tuple[ObjectTemplate, ...]
    goals: tuple[GoalSpec, ...]
    camera: CameraModel
    workspace: tuple[tuple[float, float], tuple[float, float]] = ((0.0, 0.7), (-0.4, 0.4))

    def __post_init__(self):
        labels = {t.label for t in self.objects}
        for g in self.goals:
            if g.subject_label not in labels or g.target_label not in labels:
                raise ValueError(f"goal references unknown labels: {g}")
        if not self.goals:
            raise ValueError("scenario needs a goal")

    @property
    def goal(self) -> GoalSpec:
        return self.goals[0]

    def template(self, label: str) -> ObjectTemplate:
        for t in self.objects:
            if t.label == label:
                return t
        raise MissingObject(label)

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        try:
            objects = []
            for o in d["objects"]:
                p = dict(o.get("placement", {"rule": "fixed"}))
                for k in ("position", "start", "end"):
                    if k in p:
                        p[k] = tuple(p[k])
                if "region" in p:
                    p["region"] = tuple(tuple(r) for r in p["region"])
                objects.append(
                    ObjectTemplate(
                        label=normalize_label(o["label"]),
                        extent=tuple(o["extent"]),
                        placement=Placement(**p),
                        graspable=o.get("graspable", True),
                        container=o.get("container", False),
                        wall=o.get("wall", 0.0),
                        floor=o.get("floor", 0.0),
                    )
                )
            goal_list = d["goal"] if isinstance(d["goal"], list) else [d["goal"]]
            goals = tuple(
                GoalSpec(
                    kind=g["kind"],
                    subject_label=normalize_label(g["subject"]),
                    target_label=normalize_label(g["target"]),
                    threshold=g.get("threshold", 0.15),
                    planar=g.get("planar", True),
                )
                for g in goal_list
            )
            ws = d.get("workspace")
            return cls(
                name=d["name"],
                task=d.get("task", ""),
                objects=tuple(objects),
                goals=goals,
                camera=CameraModel.from_dict(d["camera"]),
                workspace=tuple(tuple(r) for r in ws) if ws else ((0.0, 0.7), (-0.4, 0.4)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"bad scenario: {e}") from e

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Scenario":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read scenario {path}: {e}") from e


def load_scenario(name_or_path: str) -> Scenario:
    """Built-in scenario by name, or a scenario file path."""
    if name_or_path in BUILTIN_SCENARIOS:
        text = resources.files("tabletop_agent").joinpath("scenarios").joinpath(f"{name_or_path}.json").read_text()
        return Scenario.from_dict(json.loads(text))
    return Scenario.load(name_or_path)


# -- placement ---------------------------------------------------------------


def _support_height(objects: Sequence[SimObject], x: float, y: float, exclude: Sequence[int] = ()) -> float:
    h = 0.0
    for i, o in enumerate(objects):
        if i in exclude:
            continue
        if o.contains_xy(x, y):
            h = max(h, o.support_z)
    return h


def _support_index(objects: Sequence[SimObject], x: float, y: float, exclude: Sequence[int] = ()) -> Optional[int]:
    best, best_h = None, -1.0
    for i, o in enumerate(objects):
        if i in exclude or not o.contains_xy(x, y):
            continue
        if o.support_z > best_h:
            best, best_h = i, o.support_z
    return best


def footprints_overlap(a: SimObject, b: SimObject) -> bool:
    ax0, ay0, ax1, ay1 = a.footprint()
    bx0, by0, bx1, by1 = b.footprint()
    return not (ax1 < bx0 or bx1 < ax0 or ay1 < by0 or by1 < ay0)


def _exempt(a: str, b: str, on: Mapping[str, Optional[str]]) -> bool:
    return on.get(a) == b or on.get(b) == a


def _make(t: ObjectTemplate, x: float, y: float, z: float) -> SimObject:
    return SimObject(
        label=t.label,
        position=(x, y, z),
        extent=t.extent,
        orientation=quat_from_yaw(t.placement.yaw),
        graspable=t.graspable,
        container=t.container,
        wall=t.wall,
        floor=t.floor,
    )


def spawn_scene(scenario: Scenario, seed: int) -> WorldState:
    rng = np.random.default_rng(seed)
    on = {t.label: t.placement.on for t in scenario.objects}
    placed: list[SimObject] = []
    for t in scenario.objects:
        attempts = 1 if t.placement.rule == "fixed" else MAX_PLACEMENT_ATTEMPTS
        for _ in range(attempts):
            x, y = t.placement.sample(rng)
            cand = _make(t, x, y, _support_height(placed, x, y))
            if not any(footprints_overlap(cand, p) and not _exempt(cand.label, p.label, on) for p in placed):
                placed.append(cand)
                break
        else:
            raise PlacementFailure(f"could not place {t.label} after {attempts} attempts")
    return WorldState(objects=tuple(placed), rng_seed=seed, scenario=scenario.name)


@dataclass(frozen=True)
class RuleBasedReset:
    """Place the named objects at explicit ``(x, y)`` coordinates."""

    coords: tuple[tuple[str, tuple[float, float]], ...]

    @classmethod
    def of(cls, coords: Mapping[str, Sequence[float]]) -> "RuleBasedReset":
        return cls(tuple((normalize_label(k), (float(v[0]), float(v[1]))) for k, v in coords.items()))


def reset_scene(
    world: WorldState, scenario: Scenario, policy: Union[str, RuleBasedReset], seed: int
) -> WorldState:
    """Random re-spawn, or rule-based placement of selected objects."""
    if policy == "random":
        return spawn_scene(scenario, seed)
    if not isinstance(policy, RuleBasedReset):
        raise ValueError(f"unknown reset policy {policy!r}")
    on = {t.label: t.placement.on for t in scenario.objects}
    (wx0, wx1), (wy0, wy1) = scenario.workspace
    objects = list(world.objects)
    # the gripper lets go during a reset
    if world.attached is not None:
        k = world.attached
        o = objects[k]
        z = _support_height(objects, o.position[0], o.position[1], exclude=[k])
        objects[k] = replace(o, position=(o.position[0], o.position[1], z), orientation=quat_from_yaw(o.yaw))
    for label, (x, y) in policy.coords:
        if not (wx0 <= x <= wx1 and wy0 <= y <= wy1):
            raise PlacementFailure(f"{label} target ({x}, {y}) is outside the workspace")
        i = world.index(label)
        o = objects[i]
        moved = replace(o, position=(x, y, 0.0), orientation=quat_from_yaw(o.yaw))
        others = [j for j in range(len(objects)) if j != i]
        for j in others:
            if footprints_overlap(moved, objects[j]) and not _exempt(label, objects[j].label, on):
                raise PlacementFailure(f"{label} at ({x}, {y}) overlaps {objects[j].label}")
        objects[i] = replace(moved, position=(x, y, _support_height(objects, x, y, exclude=[i])))
    return WorldState(objects=tuple(objects), rng_seed=seed, scenario=world.scenario)


def grid_positions(region, nx: int, ny: int) -> list[tuple[float, float]]:
    """Row-major ``nx`` x ``ny`` grid spanning ``region = ((x0, x1), (y0, y1))``."""
    (x0, x1), (y0, y1) = region
    xs = np.linspace(x0, x1, nx) if nx > 1 else np.array([(x0 + x1) / 2.0])
    ys = np.linspace(y0, y1, ny) if ny > 1 else np.array([(y0 + y1) / 2.0])
    return [(float(x), float(y)) for x in xs for y in ys]


# -- rendering ---------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSpec:
    center_jitter_sigma_m: float = 0.0
    drop_prob: float = 0.0
    depth_hole_prob: float = 0.0

    def __post_init__(self):
        if self.center_jitter_sigma_m < 0:
            raise ValueError("jitter sigma must be >= 0")
        for p in (self.drop_prob, self.depth_hole_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")

    @property
    def noiseless(self) -> bool:
        return self == NoiseSpec()


@dataclass(frozen=True)
class Observation:
    depth: np.ndarray = field(repr=False)
    silhouette: np.ndarray = field(repr=False)
    image: np.ndarray = field(repr=False)

    @property
    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.silhouette).tobytes()).hexdigest()


_PALETTE = np.array(
    [
        [230, 120, 30],
        [240, 240, 240],
        [40, 160, 60],
        [220, 200, 40],
        [120, 60, 160],
        [60, 120, 220],
        [160, 160, 160],
        [200, 60, 90],
    ],
    dtype=np.uint8,
)
_BACKGROUND = np.array([90, 70, 50], dtype=np.uint8)


@functools.lru_cache(maxsize=8)
def _ray_directions(cam: CameraModel) -> np.ndarray:
    v, u = np.mgrid[0 : cam.height, 0 : cam.width].astype(float)
    d_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1)
    return d_cam @ cam.R.T


def _surfaces(o: SimObject):
    """(height, inside(lx, ly)) pairs making up what the camera can see."""
    ex, ey, _ = o.extent
    if not o.rimmed:
        return [(o.top_z, lambda lx, ly: (np.abs(lx) <= ex) & (np.abs(ly) <= ey))]
    ix, iy = ex - o.wall, ey - o.wall

    def inner(lx, ly):
        return (np.abs(lx) <= ix) & (np.abs(ly) <= iy)

    def rim(lx, ly):
        return (np.abs(lx) <= ex) & (np.abs(ly) <= ey) & ~inner(lx, ly)

    return [(o.top_z, rim), (o.support_z, inner)]


@functools.lru_cache(maxsize=32)
def _render(objects: tuple[SimObject, ...], cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    dirs = _ray_directions(cam)
    t = cam.t
    dx, dy, dz = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        s_table = (0.0 - t[2]) / dz
    depth = np.where(s_table > 0, s_table, np.inf)
    sil = np.full(depth.shape, -1, dtype=np.int16)
    for k, o in enumerate(objects):
        c, s = math.cos(o.yaw), math.sin(o.yaw)
        for h, inside in _surfaces(o):
            with np.errstate(divide="ignore", invalid="ignore"):
                ray_s = (h - t[2]) / dz
            px = t[0] + ray_s * dx - o.position[0]
            py = t[1] + ray_s * dy - o.position[1]
            lx, ly = c * px + s * py, -s * px + c * py
            hit = (ray_s > 0) & (ray_s < depth) & inside(lx, ly)
            depth = np.where(hit, ray_s, depth)
            sil[hit] = k
    depth.setflags(write=False)
    sil.setflags(write=False)
    return depth, sil


def silhouette_image(sil: np.ndarray) -> np.ndarray:
    img = np.empty(sil.shape + (3,), dtype=np.uint8)
    img[...] = _BACKGROUND
    fg = sil >= 0
    img[fg] = _PALETTE[sil[fg] % len(_PALETTE)]
    return img


def render_observation(
    world: WorldState, cam: CameraModel, noise: Optional[NoiseSpec] = None, call_index: int = 0
) -> Observation:
    """Depth of the nearest horizontal surface per pixel plus an object-index map.

    Only top surfaces (and container floors) are rendered; box sides are not.
    Depth is the camera-frame z distance. ``-1`` marks background.
    """
    depth, sil = _render(world.objects, cam)
    if noise is not None and noise.depth_hole_prob > 0:
        rng = np.random.default_rng([world.rng_seed, call_index, 1])
        depth = np.where(rng.random(depth.shape) < noise.depth_hole_prob, np.nan, depth)
    return Observation(depth=depth, silhouette=sil, image=silhouette_image(sil))


def _top_corners(o: SimObject) -> list[Vec3]:
    c, s = math.cos(o.yaw), math.sin(o.yaw)
    ex, ey, _ = o.extent
    out = []
    for sx in (-1, 1):
        for sy in (-1, 1):
            lx, ly = sx * ex, sy * ey
            out.append((o.position[0] + c * lx - s * ly, o.position[1] + s * lx + c * ly, o.top_z))
    return out


def project_bbox(o: SimObject, cam: CameraModel) -> tuple[float, float, float, float]:
    pts = [base_to_pixel(p, cam) for p in _top_corners(o)]
    us = [p[0] for p in pts]
    vs = [p[1] for p in pts]
    return (min(us), min(vs), max(us), max(vs))


def oracle_detect(
    world: WorldState,
    cam: CameraModel,
    label: str,
    noise: Optional[NoiseSpec] = None,
    call_index: int = 0,
) -> list[dict]:
    """Ground-truth boxes for every visible object named ``label``.

    Noise jitters the box center (sigma given in meters at the object's
    depth) and drops boxes, drawn from ``(world seed, call_index)``.
    """
    noise = noise or NoiseSpec()
    label = normalize_label(label)
    _, sil = _render(world.objects, cam)
    rng = np.random.default_rng([world.rng_seed, call_index, 2])
    out = []
    for k, o in enumerate(world.objects):
        if o.label != label or not (sil == k).any():
            continue
        x0, y0, x1, y1 = project_bbox(o, cam)
        if noise.center_jitter_sigma_m > 0:
            z = base_to_pixel(o.surface_center, cam)[2]
            du = rng.normal(0.0, noise.center_jitter_sigma_m * cam.fx / z)
            dv = rng.normal(0.0, noise.center_jitter_sigma_m * cam.fy / z)
            x0, x1, y0, y1 = x0 + du, x1 + du, y0 + dv, y1 + dv
        if noise.drop_prob > 0 and rng.random() < noise.drop_prob:
            continue
        out.append({"bbox": (x0, y0, x1, y1), "confidence": 1.0})
    return out


def oracle_grasps(world: WorldState, label_filter: Optional[Sequence[str]] = None) -> list[GraspCandidate]:
    """One true top-down grasp per graspable object plus two low-score decoys."""
    wanted = None if label_filter is None else {normalize_label(l) for l in label_filter}
    out = []
    for k, o in enumerate(world.objects):
        if not o.graspable or o.container or (wanted is not None and o.label not in wanted):
            continue
        rng = np.random.default_rng([world.rng_seed, k, 3])
        gx, gy, gz = o.grasp_point
        width = 2.0 * min(o.extent[0], o.extent[1])
        out.append(GraspCandidate((gx, gy, gz), top_down(o.yaw), width, float(0.5 + 0.5 * rng.random())))
        for _ in range(2):
            ang = float(rng.uniform(0.0, 2.0 * math.pi))
            dist = float(rng.uniform(0.10, 0.15))
            pos = (gx + dist * math.cos(ang), gy + dist * math.sin(ang), gz)
            out.append(GraspCandidate(pos, top_down(o.yaw + ang), width, float(rng.uniform(0.0, 0.5))))
    return out


# -- execution ---------------------------------------------------------------


def execute_action(world: WorldState, action, unreachable: Sequence[Region] = ()) -> WorldState:
    """Apply one waypoint: move the gripper, then apply the gripper command.

    ``action`` needs ``position``, ``orientation`` and ``gripper``.
    """
    target = tuple(float(c) for c in action.position)
    quat = tuple(float(c) for c in action.orientation)
    for region in unreachable:
        if region.contains(target):
            raise ReachFailure(f"waypoint {target} lies in an unreachable region")

    objects = list(world.objects)
    attached = world.attached
    if attached is not None:
        R = quat_to_matrix(quat)
        p = np.asarray(target) + R @ np.asarray(world.attach_offset)
        objects[attached] = replace(
            objects[attached],
            position=(float(p[0]), float(p[1]), float(p[2])),
            orientation=quat_multiply(quat, world.attach_rotation),
        )
    state = world.gripper_state
    offset, rel = world.attach_offset, world.attach_rotation

    if action.gripper == "close":
        state = "closed"
        if attached is None:
            best, best_d = None, ATTACH_RADIUS
            for k, o in enumerate(objects):
                if not o.graspable:
                    continue
                d = math.dist(o.grasp_point, target)
                if d <= best_d:
                    best, best_d = k, d
            if best is not None:
                attached = best
                o = objects[best]
                R = quat_to_matrix(quat)
                off = R.T @ (np.asarray(o.position) - np.asarray(target))
                offset = (float(off[0]), float(off[1]), float(off[2]))
                rel = quat_multiply(quat_conjugate(quat), o.orientation)
    elif action.gripper == "open":
        state = "open"
        if attached is not None:
            o = objects[attached]
            x, y, _ = o.position
            z = _support_height(objects, x, y, exclude=[attached])
            objects[attached] = replace(o, position=(x, y, z), orientation=quat_from_yaw(o.yaw))
            attached = None
            offset, rel = (0.0, 0.0, 0.0), IDENTITY
    elif action.gripper != "hold":
        raise ValueError(f"unknown gripper command {action.gripper!r}")

    return replace(
        world,
        objects=tuple(objects),
        gripper_position=target,
        gripper_orientation=quat,
        gripper_state=state,
        attached=attached,
        attach_offset=offset,
        attach_rotation=rel,
        step_count=world.step_count + 1,
    )


def check_success(world: WorldState, goal: GoalSpec) -> bool:
    si, ti = world.index(goal.subject_label), world.index(goal.target_label)
    subj, tgt = world.objects[si], world.objects[ti]
    if world.attached == si:
        return False
    if goal.kind == "in_region":
        return tgt.contains_xy(subj.position[0], subj.position[1])
    a, b = subj.surface_center, tgt.surface_center
    if goal.planar:
        dist = math.hypot(a[0] - b[0], a[1] - b[1])
    else:
        dist = math.dist(subj.position, tgt.surface_center)
    if not dist < goal.threshold:
        return False
    if goal.kind == "stacked":
        return abs(subj.position[2] - tgt.top_z) <= STACK_TOLERANCE
    return True


def resting_on(world: WorldState, label: str) -> Optional[str]:
    """Label of the object ``label`` rests on, or None for the table."""
    i = world.index(label)
    if world.attached == i:
        return None
    o = world.objects[i]
    j = _support_index(world.objects, o.position[0], o.position[1], exclude=[i])
    if j is None or abs(world.objects[j].support_z - o.position[2]) > 1e-9:
        return None
    return world.objects[j].label


def worlds_equal(a: WorldState, b: WorldState, tol: float = 0.0) -> list[str]:
    """Field-level differences between two states (empty when equal)."""
    da, db = a.to_dict(), b.to_dict()
    diffs: list[str] = []

    def walk(x: Any, y: Any, path: str):
        if isinstance(x, dict) and isinstance(y, dict):
            for k in sorted(set(x) | set(y)):
                walk(x.get(k), y.get(k), f"{path}.{k}" if path else k)
        elif isinstance(x, list) and isinstance(y, list) and len(x) == len(y):
            for i, (p, q) in enumerate(zip(x, y)):
                walk(p, q, f"{path}[{i}]")
        elif isinstance(x, float) and isinstance(y, (int, float)) and not isinstance(y, bool):
            if abs(x - y) > tol:
                diffs.append(f"{path}: {x!r} != {y!r}")
        elif x != y:
            diffs.append(f"{path}: {x!r} != {y!r}")

    walk(da, db, "")
    return diffs


class SimEnv:
    """One simulated episode: current world plus the adapters perception and
    the controller talk to (detector, grasp source, executor)."""

    def __init__(
        self,
        scenario: Scenario,
        seed: int = 0,
        noise: Optional[NoiseSpec] = None,
        unreachable: Sequence[Region] = (),
        world: Optional[WorldState] = None,
        clock=None,
        step_time: float = 1.0,
    ):
        self.scenario = scenario
        self.cam = scenario.camera
        self.noise = noise or NoiseSpec()
        self.unreachable = tuple(unreachable)
        self.world = world if world is not None else spawn_scene(scenario, seed)
        self.initial_world = self.world
        self.clock = clock
        self.step_time = step_time
        self.detector_queries: list[str] = []
        self.steps: list[dict] = []
        self._detect_calls = 0
        self._render_calls = 0

    def observe(self) -> Observation:
        self._render_calls += 1
        return render_observation(self.world, self.cam, self.noise, self._render_calls)

    def detect(self, image, phrase: str) -> list[dict]:
        self.detector_queries.append(phrase)
        label = phrase[len("every ") :] if phrase.startswith("every ") else phrase
        self._detect_calls += 1
        return oracle_detect(self.world, self.cam, label, self.noise, self._detect_calls)

    def grasps(self, observation=None) -> list[GraspCandidate]:
        return oracle_grasps(self.world)

    def execute(self, action) -> tuple[bool, str]:
        """Run one waypoint. Raises ReachFailure; reports a missed grasp."""
        before = self.world
        t = self.clock.now() if self.clock else float(len(self.steps))
        self.world = execute_action(self.world, action, self.unreachable)
        if self.clock:
            self.clock.advance(self.step_time)
        self.steps.append(
            {
                "timestamp": t,
                "observation_digest": hashlib.sha256(
                    np.ascontiguousarray(_render(before.objects, self.cam)[1]).tobytes()
                ).hexdigest(),
                "gripper_position": list(self.world.gripper_position),
                "gripper_orientation": list(self.world.gripper_orientation),
                "gripper_state": self.world.gripper_state,
                "action": action.to_dict(),
                "annotation": action.annotation,
            }
        )
        if action.gripper == "close" and before.attached is None and self.world.attached is None:
            return False, "grasp missed: nothing within reach of the gripper"
        return True, ""

    def success(self) -> bool:
        return all(check_success(self.world, g) for g in self.scenario.goals)
