"""Small builders shared by the test modules."""

import json
import math

from tabletop_agent.gateway import FunctionBackend, ScriptedBackend
from tabletop_agent.geometry import CameraModel, top_down
from tabletop_agent.perception import GraspCandidate, ObjectRecord, fallback_grasp
from tabletop_agent.simworld import Scenario

IDENTITY = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

CAMERA_DICT = {
    "fx": 300.0, "fy": 300.0, "cx": 160.0, "cy": 120.0, "width": 320, "height": 240,
    "rotation": [0, -1, 0, -1, 0, 0, 0, 0, -1],
    "translation": [0.35, 0.0, 1.0],
}


def scripted(**replies_by_schema):
    """Scripted backend with one wildcard record per schema id."""
    records = [{"schema": k, "replies": v if isinstance(v, list) else [v]} for k, v in replies_by_schema.items()]
    return ScriptedBackend(records)


def recording(responder):
    """FunctionBackend that also keeps every request it saw."""
    seen = []

    def fn(request):
        seen.append(request)
        return responder(request)

    backend = FunctionBackend(fn)
    backend.seen = seen
    return backend


def record(label, center, grasp=None, index=1, yaw=0.0):
    if grasp is None:
        g = fallback_grasp(center)
    elif grasp == "top":
        g = GraspCandidate(tuple(center), top_down(yaw), 0.03, 0.9)
    else:
        g = grasp
    u = 100.0 + 10 * index
    return ObjectRecord(label, index, tuple(center), g, (u - 5, 50.0, u + 5, 60.0))


def scenario_from(objects, goals, task="", name="custom"):
    return Scenario.from_dict(
        {"name": name, "task": task, "objects": objects, "goal": goals, "camera": CAMERA_DICT}
    )


def peppers_scenario(n=3):
    objects = [
        {"label": "pepper", "extent": [0.025, 0.025, 0.02],
         "placement": {"rule": "fixed", "position": [0.35, -0.15 + 0.1 * k]}}
        for k in range(n)
    ]
    objects.append({"label": "plate", "extent": [0.06, 0.06, 0.01], "graspable": False, "container": True,
                    "placement": {"rule": "fixed", "position": [0.5, 0.2]}})
    return scenario_from(objects, {"kind": "on_target", "subject": "pepper", "target": "plate"},
                         task="place the middle pepper on the plate", name="peppers")


def identity_camera(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=200, height=100):
    return CameraModel(fx, fy, cx, cy, width, height, IDENTITY, (0.0, 0.0, 0.0))


def dumps(obj):
    return json.dumps(obj)


def planar(a, b):
    return math.hypot(a[0] - b[0], a[1] - b[1])
