import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biodiscover.core import CameraSettings, ConfigError
from biodiscover.devicesim import (
    COMPACT_SENSOR,
    EVENTS,
    ClassRouting,
    DeviceState,
    EventLog,
    IllegalTransition,
    Phase,
    Rig,
    SensorConfig,
    SizeRouting,
    flush_and_route,
    frame_rate,
    light_factor,
    plan_trajectory,
    run_session,
    simulate_pass,
    transition,
)
from biodiscover.syndata import SinkModel, draw_instances, separable_pair

from conftest import FAST_SINK


@pytest.mark.parametrize("exposure,rate", [(500, 100.0), (1000, 100.0), (1500, 200 / 3), (2000, 50.0), (4000, 25.0)])
def test_frame_rate(exposure, rate):
    assert frame_rate(CameraSettings(exposure, 8.0)) == pytest.approx(rate)


def test_light_factor_linear_in_exposure_and_falls_with_f_number():
    s = COMPACT_SENSOR
    base = light_factor(CameraSettings(1000, 8.0), s)
    assert base == pytest.approx(1.0)
    assert light_factor(CameraSettings(2000, 8.0), s) == pytest.approx(2.0)
    assert light_factor(CameraSettings(1000, 3.8), s) > base > light_factor(CameraSettings(1000, 16.0), s)


@settings(max_examples=100, deadline=None)
@given(st.floats(50, 5000), st.integers(100, 2000), st.sampled_from([1000, 1500, 2000]))
def test_trajectory_capture_count(velocity, span, exposure):
    traj = plan_trajectory(velocity, span, CameraSettings(exposure, 8.0))
    rate = frame_rate(CameraSettings(exposure, 8.0))
    assert len(traj.capture_times) == math.floor(span / velocity * rate)
    # every capture happens while the specimen is still in view
    assert all(t < traj.exit_time for t in traj.capture_times)


def test_trajectory_rejects_nonpositive_velocity():
    with pytest.raises(ConfigError):
        plan_trajectory(0.0, 100, CameraSettings(1000, 8.0))


def test_sensor_validation():
    with pytest.raises(ConfigError):
        SensorConfig(height=400)
    with pytest.raises(ConfigError):
        SensorConfig(height=600, fov_top=200, fov_span=500)
    assert COMPACT_SENSOR.cuvette_columns == (8, 504)


def test_background_frame_does_not_trigger():
    rig = Rig(COMPACT_SENSOR)
    s = CameraSettings(1000, 3.8)
    rng = np.random.default_rng(0)
    from biodiscover.imgproc import detect

    for cam in (1, 2):
        raw, truth = rig.raw_frame(cam, None, (0, 0), s, rng)
        assert raw.dtype == np.uint8 and not truth.any()
        assert detect(raw, rig.background_model(cam, s)) is None


def test_pass_detects_every_capture_and_tracks_true_area():
    inst = draw_instances(separable_pair(), 1, 5, COMPACT_SENSOR, FAST_SINK)[0]
    settings_ = CameraSettings(1000, 8.0)
    raw_seen = []
    res = simulate_pass(inst, settings_, 1, Rig(COMPACT_SENSOR), on_raw=lambda i, c, r: raw_seen.append(i))
    n = len(res.trajectory.capture_times)
    assert n > 0
    assert len(raw_seen) == 2 * n
    assert res.missed == 0
    frames = res.all_frames()
    assert len(frames) == 2 * n
    for f in frames:
        assert f.width_px == 496 and f.pixels is None
        true = res.true_areas[f.image_id]
        assert abs(f.silhouette_area_px2 - true) <= 0.1 * true
    # both cameras trigger together
    times = {c: [f.capture_time for f in res.frames[c]] for c in (1, 2)}
    assert times[1] == times[2]


def test_pass_is_deterministic():
    inst = draw_instances(separable_pair(), 1, 2, COMPACT_SENSOR, FAST_SINK)[0]
    a = simulate_pass(inst, CameraSettings(2000, 16.0), 9, Rig(COMPACT_SENSOR), keep_pixels=True)
    b = simulate_pass(inst, CameraSettings(2000, 16.0), 9, Rig(COMPACT_SENSOR), keep_pixels=True)
    for fa, fb in zip(a.all_frames(), b.all_frames()):
        np.testing.assert_array_equal(fa.pixels, fb.pixels)


def test_dropped_frames_are_counted():
    sensor = SensorConfig(height=640, width=512, fov_top=72, fov_span=496, drop_prob=0.5)
    inst = draw_instances(separable_pair(), 1, 0, sensor, SinkModel(0.3, 0.0))[0]
    res = simulate_pass(inst, CameraSettings(1000, 8.0), 0, Rig(sensor))
    n = len(res.trajectory.capture_times)
    assert res.dropped > 0
    assert res.dropped + len(res.all_frames()) + res.missed == 2 * n


def _full_cycle(state):
    for ev in ("imaging_complete", "open_flush", "start_refill", "refill_done"):
        state = transition(state, ev, 0 if ev == "open_flush" else None)
    return state


def test_state_machine_happy_path():
    s = transition(DeviceState(), "drop")
    assert s.phase is Phase.IMAGING and s.occupancy == 1
    s = transition(s, "imaging_complete")
    s = transition(s, "drop")
    assert s.occupancy == 2 and not s.imaging_done
    s = _full_cycle(s)
    assert s == DeviceState(Phase.IDLE, 0, 0, False)


@pytest.mark.parametrize(
    "state,event",
    [
        (DeviceState(), "open_flush"),
        (DeviceState(), "imaging_complete"),
        (DeviceState(Phase.IMAGING, 1), "open_flush"),
        (DeviceState(Phase.IMAGING, 1), "drop"),
        (DeviceState(Phase.FLUSH_OPEN), "drop"),
        (DeviceState(Phase.REFILLING), "open_flush"),
    ],
)
def test_illegal_transitions_raise(state, event):
    with pytest.raises(IllegalTransition):
        transition(state, event)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(EVENTS), max_size=25))
def test_random_event_sequences_keep_invariants(events):
    state = DeviceState()
    for ev in events:
        try:
            nxt = transition(state, ev, 1)
        except IllegalTransition:
            continue
        # flushing happens only after imaging finished, and empties the cuvette
        if ev == "open_flush":
            assert state.phase is Phase.IMAGING and state.imaging_done and nxt.occupancy == 0
        if nxt.phase in (Phase.FLUSH_OPEN, Phase.REFILLING, Phase.IDLE):
            assert nxt.occupancy == 0
        assert nxt.occupancy >= 0
        state = nxt


def test_routing_rules(caplog):
    rule = ClassRouting({"Rubra separata": 2, "flies": 3}, default=0, groups={"Musca a": "flies"})
    assert rule.route("Rubra separata") == (2, True)
    assert rule.route("Musca a") == (3, True)
    assert rule.route("Unknown sp") == (0, False)
    size = SizeRouting(1000.0, small=4, large=5)
    assert size.route(area=999.9) == (4, True)
    assert size.route(area=1000.0) == (5, True)
    with pytest.raises(ConfigError):
        size.route(area=None)

    state = transition(transition(DeviceState(), "drop"), "imaging_complete")
    log = EventLog()
    with caplog.at_level("WARNING"):
        state, container, clock = flush_and_route(state, rule, predicted="Unknown sp", events=log)
    assert container == 0 and state.phase is Phase.IDLE
    assert clock == pytest.approx(2.5)
    assert [e["event"] for e in log.entries] == ["unmapped_class", "open_flush", "start_refill", "refill_done"]
    assert "default container" in caplog.text


def test_flush_before_imaging_is_illegal():
    with pytest.raises(IllegalTransition):
        flush_and_route(transition(DeviceState(), "drop"), SizeRouting(1.0))


def test_session_routes_by_species(tmp_path):
    specs = draw_instances(separable_pair(), 2, 0, COMPACT_SENSOR, FAST_SINK)
    rule = ClassRouting({"Rubra separata": 1, "Caerulea separata": 2}, default=0)
    records, events = run_session(specs, CameraSettings(1000, 8.0), rule, seed=0, rig=Rig(COMPACT_SENSOR))
    assert [r.container for r in records] == [1, 1, 2, 2]
    assert all(r.n_frames > 0 for r in records)
    kinds = [e["event"] for e in events.entries]
    assert kinds.count("drop") == 4 and kinds.count("refill_done") == 4
    times = [e["t"] for e in events.entries]
    assert times == sorted(times)
    events.write_jsonl(tmp_path / "ev.jsonl")
    lines = (tmp_path / "ev.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["phase"] == "Imaging"


def test_session_with_predictor_sees_pixels():
    specs = draw_instances(separable_pair(), 1, 1, COMPACT_SENSOR, FAST_SINK)
    seen = []

    def predict(frames):
        seen.append(all(f.pixels is not None for f in frames))
        return "Caerulea separata"

    records, _ = run_session(specs, CameraSettings(1000, 8.0), SizeRouting(1e9), rig=Rig(COMPACT_SENSOR), predict=predict)
    assert seen == [True, True]
    assert all(r.container == 0 for r in records)
