import copy

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fusionloc.harness import measurements_csv, truth_csv
from fusionloc.imu import NavState, PreintegratedImu, predict
from fusionloc.simulator import (
    GRAVITY,
    Box,
    ScenarioError,
    initial_bias,
    load_scenario,
    los_check,
    noiseless,
    scenario_from_dict,
    synthesize,
)
from fusionloc.tdoa import tdoa_residual

BASE = {
    "name": "unit",
    "duration": 2.0,
    "anchors": {
        "positions": [[x, y, z] for x in (0.0, 10.0) for y in (0.0, 8.0) for z in (0.3, 3.0)],
    },
    "ultrasonic_anchors": [[2.0, 2.0, 3.0], [8.0, 2.0, 3.0], [5.0, 6.0, 3.0]],
    "trajectory": {
        "waypoints": [
            {"t": 0.0, "position": [5.0, 4.0, 1.0]},
            {"t": 2.0, "position": [5.0, 4.0, 1.0]},
        ]
    },
}


def scenario(**changes):
    d = copy.deepcopy(BASE)
    d.update(changes)
    return scenario_from_dict(d)


def test_static_noiseless_tag():
    scn = noiseless(scenario())
    truth, streams = synthesize(scn)
    for s in streams.imu:
        np.testing.assert_allclose(s.accel, -GRAVITY, atol=1e-12)
        np.testing.assert_array_equal(s.gyro, 0.0)
    p = truth.positions[0]
    assert len(streams.tdoa_epochs) == 40
    for _, ms in streams.tdoa_epochs:
        assert len(ms) == 7
        for m in ms:
            assert abs(tdoa_residual(p, m, scn.anchors)) < 1e-12


def test_reception_fraction():
    d = copy.deepcopy(BASE)
    d["duration"] = 60.0
    d["trajectory"]["waypoints"][1]["t"] = 60.0
    d["packet_reception_rate"] = 0.4
    fractions = []
    for seed in range(20):
        d["seed"] = seed
        _, streams = synthesize(scenario_from_dict(d))
        assert streams.tdoa_sent == 1200 * 7
        fractions.append(streams.tdoa_kept / streams.tdoa_sent)
    assert 0.35 <= np.mean(fractions) <= 0.45


def test_nlos_bias_is_one_sided():
    # a wall between the tag and the far anchors, clear of the reference
    wall = {"min": [7.0, -1.0, -1.0], "max": [7.2, 9.0, 4.0], "bias_mean": 0.8}
    scn = scenario(noise={"tdoa": 0.0}, nlos={"regions": [wall]}, duration=2.0)
    truth, streams = synthesize(scn)
    p = truth.positions[0]
    blocked_ids = {a for a in scn.anchors.ids if not los_check(p, scn.anchors.position(a), scn.nlos_regions)}
    assert blocked_ids == {4, 5, 6, 7}
    biases = {a: [] for a in scn.anchors.ids}
    for _, ms in streams.tdoa_epochs:
        for m in ms:
            biases[m.anchor_i].append(-tdoa_residual(p, m, scn.anchors))
    for a, b in biases.items():
        b = np.array(b)
        if a in blocked_ids:
            assert np.all(b >= 0.0) and b.mean() > 0.3
        else:
            np.testing.assert_allclose(b, 0.0, atol=1e-12)


def test_tag_inside_box_blocks_everything():
    box = Box(np.array([4.0, 3.0, 0.0]), np.array([6.0, 5.0, 2.0]))
    scn = scenario()
    p = np.array([5.0, 4.0, 1.0])
    assert not any(los_check(p, a, [box]) for a in scn.anchors.positions)


@pytest.mark.parametrize(
    "p, a, clear",
    [
        ([-1.0, -1.0, -1.0], [-1.0, 5.0, -1.0], True),  # beside the box
        ([-1.0, 0.5, 0.5], [2.0, 0.5, 0.5], False),  # through the center
        ([-1.0, 1.0, 0.5], [2.0, 1.0, 0.5], False),  # grazing the y = 1 face
        ([-1.0, 1.0, 1.0], [2.0, 1.0, 1.0], False),  # along an edge
        ([0.5, 0.5, 0.5], [3.0, 3.0, 3.0], False),  # starts inside
        ([-1.0, 1.0 + 1e-9, 0.5], [2.0, 1.0 + 1e-9, 0.5], True),  # just outside the face
        ([-1.0, -1.0, 0.5], [-0.5, -0.5, 0.5], True),  # stops short
    ],
)
def test_los_check(p, a, clear):
    box = Box(np.zeros(3), np.ones(3))
    assert los_check(p, a, [box]) is clear
    assert los_check(a, p, [box]) is clear


def test_los_without_boxes():
    assert los_check(np.zeros(3), np.ones(3), [])


@given(st.lists(st.floats(-3, 3), min_size=6, max_size=6))
def test_los_matches_dense_sampling(coords):
    p, a = np.array(coords[:3]), np.array(coords[3:])
    box = Box(np.array([-0.5, -0.5, -0.5]), np.array([0.7, 0.4, 0.9]))
    s = np.linspace(0.0, 1.0, 4001)[:, None]
    pts = p + s * (a - p)
    hit = np.any(np.all((pts >= box.lo - 1e-9) & (pts <= box.hi + 1e-9), axis=1))
    if los_check(p, a, [box]):
        # sampling can only miss a hit, never invent one
        assert not np.any(np.all((pts > box.lo + 1e-6) & (pts < box.hi - 1e-6), axis=1))
    else:
        # a blocked segment passes within the sampling step of the box
        step = np.linalg.norm(a - p) / 4000
        near = np.all((pts >= box.lo - step) & (pts <= box.hi + step), axis=1)
        assert hit or np.any(near)


def test_deterministic_streams():
    scn = load_scenario("office").with_overrides(duration=3.0, packet_reception_rate=0.7, seed=11)
    t1, s1 = synthesize(scn)
    t2, s2 = synthesize(scn)
    assert measurements_csv(s1) == measurements_csv(s2)
    assert truth_csv(t1) == truth_csv(t2)
    _, s3 = synthesize(scn.with_overrides(seed=12))
    assert measurements_csv(s3) != measurements_csv(s1)


def test_substreams_are_independent():
    scn = load_scenario("office").with_overrides(duration=3.0, seed=4)
    _, a = synthesize(scn)
    _, b = synthesize(scn.with_overrides(**{"noise.ultrasonic": 0.5}))
    assert [m for _, ms in a.tdoa_epochs for m in ms] == [m for _, ms in b.tdoa_epochs for m in ms]
    assert [s.accel.tolist() for s in a.imu] == [s.accel.tolist() for s in b.imu]


def test_velocity_matches_finite_differences():
    truth, _ = synthesize(load_scenario("office").with_overrides(duration=20.0))
    dt = truth.t[1] - truth.t[0]
    fd = (truth.positions[2:] - truth.positions[:-2]) / (2 * dt)
    err = np.abs(fd - truth.velocities[1:-1]).max()
    assert err < 10 * dt**2


@pytest.mark.parametrize("name", ["office", "warehouse", "staircase"])
def test_noiseless_imu_reproduces_truth(name):
    scn = noiseless(load_scenario(name).with_overrides(duration=10.0))
    truth, streams = synthesize(scn)
    s = NavState.from_arrays(truth.rotations[0], truth.positions[0], truth.velocities[0])
    s = NavState(s.pose, s.velocity, initial_bias(truth))
    dt = 1.0 / scn.imu_hz
    for k, sample in enumerate(streams.imu):
        s = predict(s, PreintegratedImu.start(s.bias).integrate(sample, dt), GRAVITY)
    assert np.linalg.norm(s.p - truth.positions[-1]) < 1e-3
    np.testing.assert_allclose(s.R, truth.rotations[-1], atol=1e-6)


def test_ultrasonic_only_in_los_and_range():
    scn = load_scenario("office").with_overrides(duration=20.0)
    truth, streams = synthesize(noiseless(scn).with_overrides(**{"nlos.regions": scn.source["nlos"]["regions"]}))
    assert streams.ultrasonic
    for m in streams.ultrasonic:
        p = truth.position_at([m.t])[0]
        a = scn.ultrasonic_anchors.position(m.anchor_id)
        assert los_check(p, a, scn.nlos_regions)
        assert m.range == pytest.approx(np.linalg.norm(p - a), abs=1e-12)
        assert m.range < scn.ultrasonic_max_range


def test_floor_stream_on_staircase():
    scn = load_scenario("staircase")
    truth, streams = synthesize(scn)
    assert set(streams.floor.values()) == {1.0, 4.0, 7.0}
    for t, h in streams.floor.items():
        assert abs(truth.position_at([t])[0, 2] - h) <= 0.03 + 1e-12
    z = truth.positions[:, 2]
    assert z.max() - z.min() >= 6.0 - 1e-9


def test_builtin_scenarios():
    office = load_scenario("office")
    assert len(office.anchors) == 8
    span = office.anchors.positions.max(axis=0) - office.anchors.positions.min(axis=0)
    np.testing.assert_allclose(span[:2], [20.0, 15.0])
    assert (office.imu_hz, office.uwb_hz, office.us_hz) == (200.0, 20.0, 10.0)
    warehouse = load_scenario("warehouse")
    assert len(warehouse.nlos_regions) < len(office.nlos_regions)
    vol = lambda b: np.prod(b.hi - b.lo)  # noqa: E731
    assert min(map(vol, warehouse.nlos_regions)) > max(map(vol, office.nlos_regions))


@pytest.mark.parametrize(
    "changes",
    [
        {"trajectory": {"waypoints": [{"t": 0.0, "position": [1, 1, 1]}, {"t": 0.0, "position": [2, 1, 1]}]}},
        {"trajectory": {"waypoints": [{"t": 0.0, "position": [1, 1, 1]}, {"t": 1.0, "position": [2, 1, 1]}]}},
        {"packet_reception_rate": 1.5},
        {"rates": {"imu_hz": 0}},
        {"duration": -1.0},
        {"anchors": {}},
        {"nlos": {"regions": [{"min": [1, 1, 1], "max": [0, 2, 2]}]}},
        {"bounds": {"min": [0, 0, 0], "max": [3, 3, 3]}},
    ],
)
def test_scenario_errors(changes):
    with pytest.raises(ScenarioError):
        synthesize(scenario(**changes))
