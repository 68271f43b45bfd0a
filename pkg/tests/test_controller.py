import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tabletop_agent.controller import (
    ActionCache,
    ActionSequence,
    ParameterizedActionSequence,
    SymbolicStep,
    WaypointAction,
    bind_parameters,
    cache_lookup,
    cache_store,
    canonical_prompt,
    execute_subtask,
    generate_action_sequence,
    serialize_objects,
    skill_exemplars,
    skill_library,
)
from tabletop_agent.errors import InvalidPair, ReachFailure, UnboundIndex
from tabletop_agent.gateway import FunctionBackend
from tabletop_agent.geometry import quat_from_yaw, quat_multiply, top_down
from tabletop_agent.oracle import OracleResponder
from tabletop_agent.perception import GraspCandidate, perceive_objects
from tabletop_agent.reasoning import SubTask
from tabletop_agent.simworld import SimEnv

from helpers import recording, record, scripted

PICK = skill_library()["pick_place"]
SUB = SubTask(1, "pick up the carrot and place it on the plate", ["carrot", "plate"])


def scene(carrot=(0.3, -0.1, 0.03), plate=(0.35, 0.15, 0.01)):
    return [record("carrot", carrot, "top"), record("plate", plate, index=1)]


def oracle_backend(objects_text_ok=True):
    # the oracle only reads prompt sections for action generation
    return FunctionBackend(OracleResponder(lambda: None))


class Recorder:
    def __init__(self, fail_at=None, reach_at=None):
        self.actions = []
        self.fail_at, self.reach_at = fail_at, reach_at

    def execute(self, action):
        i = len(self.actions)
        self.actions.append(action)
        if i == self.reach_at:
            raise ReachFailure("out of reach")
        if i == self.fail_at:
            return False, "grasp missed"
        return True, ""


# -- binding -------------------------------------------------------------------


def test_center_offset_is_vector_addition():
    seq = ParameterizedActionSequence("drag", (SymbolicStep(1, "center", (0, 0, 0.1), "top_down", "open"),))
    (a,) = bind_parameters(seq, [record("block", (0.2, 0.0, 0.05))]).steps
    assert a.position == pytest.approx((0.2, 0.0, 0.15), abs=1e-15)
    assert a.orientation == top_down()


def test_keep_on_grasp_field_uses_the_grasp_quaternion_exactly():
    q = quat_multiply(quat_from_yaw(0.4), top_down())
    g = GraspCandidate((0.3, 0.1, 0.04), q, 0.03, 0.8)
    seq = ParameterizedActionSequence("pick_place", (SymbolicStep(1, "grasp", (0, 0, 0), "keep", "open"),))
    (a,) = bind_parameters(seq, [record("cup", (0.3, 0.1, 0.04), g)]).steps
    assert a.orientation == q


def test_keep_on_center_field_carries_previous_orientation():
    actions = bind_parameters(PICK, scene()).steps
    grasp_q = scene()[0].grasp.orientation
    assert actions[3].orientation == grasp_q and actions[4].orientation == grasp_q


def test_pick_place_poses_follow_the_records():
    objs = scene()
    actions = bind_parameters(PICK, objs).steps
    g, p = objs[0].grasp.position, objs[1].center
    expected = [
        (g[0], g[1], g[2] + 0.1, "open"),
        (g[0], g[1], g[2], "close"),
        (g[0], g[1], g[2] + 0.1, "hold"),
        (p[0], p[1], p[2] + 0.1, "hold"),
        (p[0], p[1], p[2] + 0.1, "open"),
    ]
    for a, (x, y, z, grip) in zip(actions, expected):
        assert a.position == pytest.approx((x, y, z), abs=1e-15)
        assert a.gripper == grip
    assert actions[-1].annotation == "release the carrot onto the plate"


def test_unbound_index():
    seq = ParameterizedActionSequence("pick_place", (SymbolicStep(7, "center", (0, 0, 0), "top_down", "open"),))
    with pytest.raises(UnboundIndex):
        bind_parameters(seq, scene())


def test_rotate_yaw_is_applied():
    rot = skill_library()["rotate"]
    actions = bind_parameters(rot, scene()).steps
    assert actions[2].orientation == pytest.approx(quat_multiply(quat_from_yaw(math.pi / 2), top_down()))


@settings(max_examples=200)
@given(
    st.tuples(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(-0.1, 0.1)),
    st.tuples(st.floats(0.1, 0.5), st.floats(-0.3, 0.3), st.floats(0.0, 0.1)),
)
def test_binding_is_linear_in_translation(v, base):
    def objs(shift):
        c = tuple(b + s for b, s in zip(base, shift))
        p = (base[0] + 0.1 + shift[0], base[1] + 0.2 + shift[1], 0.01 + shift[2])
        return [record("carrot", c, "top"), record("plate", p)]

    a = bind_parameters(PICK, objs((0.0, 0.0, 0.0))).steps
    b = bind_parameters(PICK, objs(v)).steps
    for x, y in zip(a, b):
        for i in range(3):
            assert abs((y.position[i] - x.position[i]) - v[i]) <= 1e-12
        assert x.orientation == y.orientation


# -- generation -------------------------------------------------------------------


def test_prompt_has_one_exemplar_per_skill():
    backend = recording(OracleResponder(lambda: None))
    generate_action_sequence(SUB, scene(), backend)
    prompt = backend.seen[0].text
    assert prompt.count("Skill: ") == 3
    for name in ("pick_place", "drag", "rotate"):
        assert f"Skill: {name}" in prompt
    assert "[1] carrot" in prompt and "[2] plate" in prompt


def test_generated_sequence_matches_the_exemplar_binding():
    seq, param = generate_action_sequence(SUB, scene(), oracle_backend())
    assert param == PICK
    assert seq == bind_parameters(PICK, scene())


def test_reply_with_out_of_scope_index():
    payload = {"skill": "pick_place", "steps": [{**PICK.steps[0].to_dict(), "object_index": 7}]}
    with pytest.raises(UnboundIndex):
        generate_action_sequence(SUB, scene(), scripted(actions_v1=json.dumps(payload)))


def test_rotate_refuses_a_fallback_grasp():
    rot = skill_library()["rotate"]
    objs = [record("cup", (0.3, 0.0, 0.05))]  # fallback grasp only
    with pytest.raises(InvalidPair):
        generate_action_sequence(SubTask(1, "rotate the cup", ["cup"]), objs, scripted(actions_v1=json.dumps(rot.to_payload())))
    # pick_place tolerates it
    objs = objs + [record("plate", (0.4, 0.1, 0.01), index=1)]
    seq, _ = generate_action_sequence(
        SubTask(1, "pick up the cup and place it on the plate", ["cup", "plate"]),
        objs,
        scripted(actions_v1=json.dumps(PICK.to_payload())),
    )
    assert len(seq.steps) == 5 and seq.steps[1].position == objs[0].center


def test_objects_listing_marks_missing_grasps():
    text = serialize_objects(scene())
    assert "[1] carrot (instance 1)" in text and "grasp=none" in text.splitlines()[1]


def test_exemplars_parse_under_the_action_schema():
    from tabletop_agent.gateway import validate_response

    for block in skill_exemplars().split("\n\n"):
        payload = json.loads(block.splitlines()[1])
        validate_response(json.dumps(payload), "actions_v1")


# -- cache ------------------------------------------------------------------------


def test_store_then_lookup_hits():
    cache = ActionCache()
    cache_store(cache, SUB.text, PICK)
    assert cache_lookup(cache, SUB.text) == PICK
    assert (cache.hit_count, cache.miss_count) == (1, 0)


def test_one_character_difference_misses_and_case_matters():
    cache = ActionCache().store(SUB.text, PICK)
    assert cache.lookup(SUB.text + "s") is None
    assert cache.lookup(SUB.text.upper()) is None
    assert cache.miss_count == 2


@pytest.mark.parametrize("variant", ["  {t}", "{t}  ", "\t{t}\n", "{t}", " \n {t} \t "])
def test_whitespace_variants_share_one_key(variant):
    cache = ActionCache().store(SUB.text, PICK)
    assert cache.lookup(variant.format(t=SUB.text)) == PICK
    assert canonical_prompt("a   b\tc") == "a b c"


def test_second_store_wins():
    drag = skill_library()["drag"]
    cache = ActionCache().store(SUB.text, PICK).store(SUB.text, drag)
    assert cache.lookup(SUB.text) == drag and len(cache) == 1


def test_cache_file_round_trip(tmp_path):
    path = tmp_path / "cache.json"
    cache = ActionCache(path)
    cache.store(SUB.text, PICK)
    cache.store("rotate the cup", skill_library()["rotate"])
    assert path.exists()  # written after each store
    reloaded = ActionCache.load(path)
    assert reloaded.lookup(SUB.text) == PICK
    assert reloaded.lookup("rotate the cup") == skill_library()["rotate"]


# -- execution ------------------------------------------------------------------


def test_first_run_generates_second_run_hits_the_cache():
    cache, backend = ActionCache(), oracle_backend()
    r1 = execute_subtask(SUB, scene(), cache, backend, Recorder())
    assert (r1.success, r1.source, r1.backend_calls, len(cache)) == (True, "generated", 1, 1)
    r2 = execute_subtask(SUB, scene(), cache, backend, Recorder())
    assert (r2.success, r2.source, r2.backend_calls) == (True, "cache", 0)
    assert backend.counter.total == 1
    assert r2.actions.steps == r1.actions.steps


def test_moved_objects_are_rebound():
    cache, backend = ActionCache(), oracle_backend()
    r1 = execute_subtask(SUB, scene(), cache, backend, Recorder())
    moved = scene(carrot=(0.25, -0.2, 0.03), plate=(0.4, 0.1, 0.01))
    r2 = execute_subtask(SUB, moved, cache, backend, Recorder())
    dc = [b - a for a, b in zip(scene()[0].grasp.position, moved[0].grasp.position)]
    dp = [b - a for a, b in zip(scene()[1].center, moved[1].center)]
    for i, (a, b) in enumerate(zip(r1.actions.steps, r2.actions.steps)):
        delta = dc if i < 3 else dp
        assert all(abs((q - p) - d) <= 1e-12 for p, q, d in zip(a.position, b.position, delta))


def test_failed_subtask_does_not_pollute_the_cache():
    cache = ActionCache()
    report = execute_subtask(SUB, scene(), cache, oracle_backend(), Recorder(fail_at=1))
    assert not report.success and report.error == "grasp missed"
    assert len(report.steps) == 2  # stops at the first failed step
    assert len(cache) == 0


def test_reach_failure_is_an_intervention():
    cache = ActionCache()
    report = execute_subtask(SUB, scene(), cache, oracle_backend(), Recorder(reach_at=0))
    assert report.intervention and not report.success and "ReachFailure" in report.error
    assert len(cache) == 0


def test_format_failure_is_reported_not_raised():
    backend = scripted(actions_v1="not json")
    report = execute_subtask(SUB, scene(), ActionCache(), backend, Recorder())
    assert not report.success and report.backend_calls == 3 and "FormatError" in report.error


def test_cache_equivalence_on_identical_records(carrot_scenario):
    env = SimEnv(carrot_scenario, seed=4)
    objs = perceive_objects(env.observe(), ["carrot", "plate"], env.cam, env, env).records
    generated, param = generate_action_sequence(SUB, objs, oracle_backend())
    cache = ActionCache().store(SUB.text, param)
    assert bind_parameters(cache.lookup(SUB.text), objs) == generated


def test_sim_execution_succeeds(carrot_scenario):
    env = SimEnv(carrot_scenario, seed=4)
    objs = perceive_objects(env.observe(), ["carrot", "plate"], env.cam, env, env).records
    report = execute_subtask(SUB, objs, ActionCache(), oracle_backend(), env)
    assert report.success and env.success()


# -- value types -----------------------------------------------------------------


def test_waypoint_validation_and_round_trip():
    a = WaypointAction((0.1, 0.2, 0.3), top_down(0.5), "hold", "lift")
    assert WaypointAction.from_dict(json.loads(json.dumps(a.to_dict()))) == a
    with pytest.raises(ValueError):
        WaypointAction((0.1, 0.2, float("nan")), top_down(), "open")
    with pytest.raises(ValueError):
        WaypointAction((0, 0, 0), (1.0, 1.0, 0.0, 0.0), "open")
    with pytest.raises(ValueError):
        WaypointAction((0, 0, 0), top_down(), "squeeze")
    with pytest.raises(ValueError):
        ActionSequence((WaypointAction((0, 0, 0), top_down(), "close"),))


def test_symbolic_step_validation():
    with pytest.raises(ValueError):
        SymbolicStep(0, "center", (0, 0, 0), "keep", "open")
    with pytest.raises(ValueError):
        SymbolicStep(1, "middle", (0, 0, 0), "keep", "open")
    with pytest.raises(ValueError):
        ParameterizedActionSequence("juggle", PICK.steps)
