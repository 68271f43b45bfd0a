import dataclasses
import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tabletop_agent.errors import ConfigError, PlacementFailure, ReachFailure
from tabletop_agent.geometry import CameraModel, pixel_to_base, top_down
from tabletop_agent.perception import bbox_center
from tabletop_agent.simworld import (
    BUILTIN_SCENARIOS,
    GoalSpec,
    NoiseSpec,
    Region,
    RuleBasedReset,
    SimEnv,
    SimObject,
    WorldState,
    check_success,
    execute_action,
    footprints_overlap,
    grid_positions,
    load_scenario,
    oracle_detect,
    oracle_grasps,
    render_observation,
    reset_scene,
    resting_on,
    spawn_scene,
    worlds_equal,
)

from helpers import CAMERA_DICT, planar, scenario_from

CAM = CameraModel.from_dict(CAMERA_DICT)


def step(position, gripper, yaw=0.0):
    return SimpleNamespace(position=position, orientation=top_down(yaw), gripper=gripper)


def block(label, x, y, z=0.0, half=0.02, **kw):
    return SimObject(label, (x, y, z), (half, half, half), **kw)


def world_of(*objects, **kw):
    return WorldState(objects=tuple(objects), **kw)


# -- spawning ---------------------------------------------------------------


@pytest.mark.parametrize("name", BUILTIN_SCENARIOS)
def test_spawn_is_deterministic_and_overlap_free(name):
    sc = load_scenario(name)
    on = {t.label: t.placement.on for t in sc.objects}
    for seed in range(20):
        w = spawn_scene(sc, seed)
        assert w == spawn_scene(sc, seed)
        # brute force over every pair
        for i, a in enumerate(w.objects):
            for b in w.objects[i + 1 :]:
                if on.get(a.label) == b.label or on.get(b.label) == a.label:
                    continue
                ax0, ay0, ax1, ay1 = a.footprint()
                bx0, by0, bx1, by1 = b.footprint()
                separated = ax1 < bx0 or bx1 < ax0 or ay1 < by0 or by1 < ay0
                assert separated, (name, seed, a.label, b.label)


def test_different_seeds_differ():
    sc = load_scenario("carrot_on_plate")
    assert len({spawn_scene(sc, s).objects[1].position for s in range(10)}) == 10


def test_line_placement_is_collinear():
    sc = scenario_from(
        [
            {"label": "cup", "extent": [0.02, 0.02, 0.02],
             "placement": {"rule": "line", "start": [0.2, -0.2], "end": [0.5, 0.1]}},
            {"label": "plate", "extent": [0.05, 0.05, 0.01], "graspable": False,
             "placement": {"rule": "fixed", "position": [0.2, 0.3]}},
        ],
        {"kind": "on_target", "subject": "cup", "target": "plate"},
    )
    for seed in range(50):
        x, y, _ = spawn_scene(sc, seed).obj("cup").position
        # cross product of (end - start) and (p - start)
        assert abs(0.3 * (y + 0.2) - 0.3 * (x - 0.2)) < 1e-12
        assert 0.2 <= x <= 0.5


def test_stacked_placement_rests_on_the_support():
    w = spawn_scene(load_scenario("eggplant_sink_to_basket"), 0)
    assert resting_on(w, "eggplant") == "sink"


def test_impossible_placement_fails():
    sc = scenario_from(
        [
            {"label": "a", "extent": [0.05, 0.05, 0.02], "placement": {"rule": "fixed", "position": [0.3, 0.0]}},
            {"label": "b", "extent": [0.05, 0.05, 0.02], "placement": {"rule": "fixed", "position": [0.32, 0.0]}},
        ],
        {"kind": "on_target", "subject": "a", "target": "b"},
    )
    with pytest.raises(PlacementFailure):
        spawn_scene(sc, 0)


def test_bad_scenario_file(tmp_path):
    p = tmp_path / "s.json"
    p.write_text('{"name": "x"}')
    with pytest.raises(ConfigError):
        load_scenario(str(p))


# -- rendering ---------------------------------------------------------------


def test_empty_scene_depth_is_camera_height():
    obs = render_observation(world_of(), CAM)
    assert np.allclose(obs.depth, 1.0, atol=1e-12)
    assert (obs.silhouette == -1).all()


def test_box_depth_is_distance_to_its_top():
    b = block("cube", 0.35, 0.0, half=0.03)
    obs = render_observation(world_of(b), CAM)
    assert obs.depth[120, 160] == pytest.approx(1.0 - b.top_z, abs=1e-12)
    assert obs.silhouette[120, 160] == 0
    p = pixel_to_base((160, 120), float(obs.depth[120, 160]), CAM)
    assert max(abs(a - b) for a, b in zip(p, (0.35, 0.0, b.top_z))) < 1e-6


@pytest.mark.parametrize("name", BUILTIN_SCENARIOS)
def test_back_projected_box_centers_hit_the_surface(name):
    sc = load_scenario(name)
    w = spawn_scene(sc, 2)
    obs = render_observation(w, sc.camera)
    for o in w.objects:
        if o.rimmed:
            continue
        boxes = oracle_detect(w, sc.camera, o.label)
        if not boxes:
            continue
        u, v = bbox_center(boxes[0]["bbox"])
        p = pixel_to_base((u, v), float(obs.depth[round(v), round(u)]), sc.camera)
        if obs.silhouette[round(v), round(u)] != w.objects.index(o):
            continue  # covered by something stacked on top
        assert planar(p, o.surface_center) < 1e-2  # pixel rounding at 300 px/m
        assert abs(p[2] - o.top_z) < 1e-6


def test_depth_holes_are_seeded():
    w = world_of(block("cube", 0.35, 0.0))
    noise = NoiseSpec(depth_hole_prob=0.1)
    a = render_observation(w, CAM, noise, 3).depth
    b = render_observation(w, CAM, noise, 3).depth
    assert np.array_equal(np.isnan(a), np.isnan(b)) and 0.05 < np.isnan(a).mean() < 0.15


# -- detection and grasps -----------------------------------------------------------


def test_detector_noise_extremes():
    w = world_of(block("cube", 0.35, 0.0))
    assert oracle_detect(w, CAM, "cube", NoiseSpec(drop_prob=1.0)) == []
    exact = oracle_detect(w, CAM, "cube", NoiseSpec())
    assert exact == oracle_detect(w, CAM, "cube", NoiseSpec(center_jitter_sigma_m=0.0, drop_prob=0.0))
    u, v = bbox_center(exact[0]["bbox"])
    assert (u, v) == pytest.approx((160.0, 120.0), abs=1e-9)
    jittered = oracle_detect(w, CAM, "cube", NoiseSpec(center_jitter_sigma_m=0.02), call_index=1)
    assert bbox_center(jittered[0]["bbox"]) != (u, v)


def test_hidden_objects_are_not_detected():
    big = block("box", 0.35, 0.0, half=0.05)
    small = block("coin", 0.35, 0.0, z=-0.05, half=0.01)  # entirely under the box
    assert oracle_detect(world_of(big, small), CAM, "coin") == []


def test_grasps_three_per_graspable_object():
    w = spawn_scene(load_scenario("carrot_on_plate"), 1)
    cands = oracle_grasps(w)
    assert len(cands) == 3  # plate is a container
    best = max(cands, key=lambda g: g.score)
    assert best.position == w.obj("carrot").grasp_point
    assert all(planar(g.position, best.position) >= 0.1 for g in cands if g is not best)
    assert cands == oracle_grasps(w)


# -- execution -------------------------------------------------------------------


def carrot_world():
    return world_of(
        block("carrot", 0.3, -0.1, half=0.015),
        SimObject("plate", (0.35, 0.15, 0.0), (0.08, 0.08, 0.01), graspable=False, container=True),
    )


def pick_and_place(world, src, dst):
    for a in (
        step((src[0], src[1], src[2] + 0.1), "open"),
        step(src, "close"),
        step((src[0], src[1], src[2] + 0.1), "hold"),
        step((dst[0], dst[1], dst[2] + 0.1), "hold"),
        step((dst[0], dst[1], dst[2] + 0.1), "open"),
    ):
        world = execute_action(world, a)
    return world


def test_pick_and_place_attaches_then_settles():
    w = carrot_world()
    g = w.obj("carrot").grasp_point
    w1 = execute_action(w, step(g, "close"))
    assert w1.attached == 0 and w1.gripper_state == "closed"
    w2 = execute_action(w1, step((0.3, -0.1, 0.2), "hold"))
    assert w2.obj("carrot").position == pytest.approx((0.3, -0.1, 0.2 - 0.03))
    final = pick_and_place(w, g, w.obj("plate").surface_center)
    assert final.attached is None
    assert final.obj("carrot").position == pytest.approx((0.35, 0.15, w.obj("plate").top_z))
    assert resting_on(final, "carrot") == "plate"
    assert check_success(final, GoalSpec("on_target", "carrot", "plate"))


def test_close_far_from_anything_grasps_nothing():
    w = execute_action(carrot_world(), step((0.1, 0.3, 0.05), "close"))
    assert w.attached is None and w.gripper_state == "closed"


def test_reach_failure_leaves_the_world_alone():
    w = carrot_world()
    with pytest.raises(ReachFailure):
        execute_action(w, step((0.3, -0.1, 0.1), "open"), [Region.column(0.3, -0.1, 0.01)])
    assert worlds_equal(w, carrot_world()) == []


def test_sim_env_reports_a_missed_grasp():
    env = SimEnv(load_scenario("carrot_on_plate"), seed=0, world=carrot_world())
    ok, msg = env.execute(SimpleNamespace(**vars(step((0.1, 0.3, 0.05), "close")), annotation="", to_dict=lambda: {}))
    assert not ok and "missed" in msg


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0.1, 0.6), st.floats(-0.3, 0.3), st.floats(0.0, 0.2),
                          st.sampled_from(["open", "close", "hold"])), max_size=12))
def test_at_most_one_attachment_and_objects_are_conserved(moves):
    w = carrot_world()
    labels = [o.label for o in w.objects]
    for x, y, z, g in moves:
        w = execute_action(w, step((x, y, z), g))
        assert [o.label for o in w.objects] == labels
        if w.attached is not None:
            assert w.gripper_state == "closed"
    assert w.step_count == len(moves)


# -- success -------------------------------------------------------------------


@pytest.mark.parametrize("d, expected", [(0.149, True), (0.151, False), (0.15, False), (0.0, True)])
def test_success_threshold_is_strict(d, expected):
    # plate at the origin so the planar distance is exactly d
    w = world_of(block("carrot", d, 0.0), block("plate", 0.0, 0.0, graspable=False))
    assert check_success(w, GoalSpec("on_target", "carrot", "plate", threshold=0.15)) is expected


def test_held_object_is_never_a_success():
    w = world_of(block("carrot", 0.2, 0.0), block("plate", 0.2, 0.0), gripper_state="closed", attached=0)
    assert not check_success(w, GoalSpec("on_target", "carrot", "plate"))


def test_stacked_needs_contact():
    base = block("yellow block", 0.3, 0.0)
    on_top = block("green block", 0.3, 0.0, z=base.top_z)
    floating = block("green block", 0.3, 0.0, z=base.top_z + 0.05)
    goal = GoalSpec("stacked", "green block", "yellow block")
    assert check_success(world_of(on_top, base), goal)
    assert not check_success(world_of(floating, base), goal)


def test_in_region_goal():
    basket = SimObject("basket", (0.3, 0.0, 0.0), (0.06, 0.06, 0.04), graspable=False, container=True, wall=0.01)
    goal = GoalSpec("in_region", "eggplant", "basket")
    assert check_success(world_of(block("eggplant", 0.33, 0.0), basket), goal)
    assert not check_success(world_of(block("eggplant", 0.37, 0.0), basket), goal)


# -- resets -------------------------------------------------------------------


def test_grid_has_25_distinct_positions():
    pts = grid_positions(((0.2, 0.5), (-0.25, -0.05)), 5, 5)
    assert len(set(pts)) == 25
    assert pts[0] == (0.2, -0.25) and pts[-1] == (0.5, -0.05)


def test_rule_based_reset_places_at_each_grid_cell():
    sc = load_scenario("carrot_on_plate")
    w0 = spawn_scene(sc, 0)
    plate = w0.obj("plate")
    for x, y in grid_positions(((0.2, 0.5), (-0.25, -0.05)), 5, 5):
        w = reset_scene(w0, sc, RuleBasedReset.of({"carrot": (x, y)}), 0)
        assert w.obj("carrot").position == (x, y, 0.0)
        assert w.obj("plate") == plate


def test_random_reset_is_reproducible():
    sc = load_scenario("carrot_on_plate")
    w0 = spawn_scene(sc, 0)
    assert reset_scene(w0, sc, "random", 9) == reset_scene(w0, sc, "random", 9)


def test_reset_rejects_overlap_and_outside_targets():
    sc = load_scenario("carrot_on_plate")
    w0 = spawn_scene(sc, 0)
    plate = w0.obj("plate").position
    with pytest.raises(PlacementFailure):
        reset_scene(w0, sc, RuleBasedReset.of({"carrot": plate[:2]}), 0)
    with pytest.raises(PlacementFailure):
        reset_scene(w0, sc, RuleBasedReset.of({"carrot": (2.0, 0.0)}), 0)
    with pytest.raises(ValueError):
        reset_scene(w0, sc, "shuffle", 0)


def test_reset_drops_a_held_object():
    sc = load_scenario("carrot_on_plate")
    w0 = spawn_scene(sc, 0)
    g = w0.obj("carrot").grasp_point
    held = execute_action(execute_action(w0, step(g, "close")), step((g[0], g[1], 0.25), "hold", yaw=0.3))
    assert held.obj("carrot").position[2] > 0.1
    w = reset_scene(held, sc, RuleBasedReset.of({"plate": w0.obj("plate").position[:2]}), 0)
    assert w.attached is None and w.obj("carrot").position[2] == 0.0
    assert w.obj("carrot").yaw == pytest.approx(0.3)


# -- comparison -------------------------------------------------------------------


def test_worlds_equal_lists_field_differences():
    a = carrot_world()
    b = dataclasses.replace(a, step_count=3)
    assert worlds_equal(a, a) == []
    assert worlds_equal(a, b) == ["step_count: 0 != 3"]
    moved = dataclasses.replace(a, objects=(block("carrot", 0.3 + 1e-9, -0.1, half=0.015), a.objects[1]))
    assert worlds_equal(a, moved, tol=1e-6) == []
    assert worlds_equal(a, moved) == [f"objects[0].position[0]: 0.3 != {0.3 + 1e-9!r}"]
    assert WorldState.from_dict(a.to_dict()) == a


def test_footprint_overlap_is_symmetric():
    a, b = block("a", 0.0, 0.0), block("b", 0.039, 0.0)
    assert footprints_overlap(a, b) and footprints_overlap(b, a)
    assert not footprints_overlap(a, block("c", 0.041, 0.0))
