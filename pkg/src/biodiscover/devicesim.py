"""Discrete-time simulation of the imaging machine.

A specimen dropped into the cuvette sinks past two cameras mounted at 90
degrees. Both cameras capture at the same exposure-dependent rate until the
specimen leaves the field of view; each raw frame goes through background
detection and cropping exactly as on the device. Afterwards a valve flush
sends the specimen to a container picked by a routing rule.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .core import CAMERAS, CROP_WIDTH, BiodiscoverError, CameraSettings, ConfigError, FrameImage
from .imgproc import BackgroundModel, calibrate, crop, detect

log = logging.getLogger(__name__)

MAX_FPS = 100.0
REFERENCE_EXPOSURE_US = 1000


def frame_rate(settings: CameraSettings, max_fps: float = MAX_FPS) -> float:
    """Frames per second per camera: inversely proportional to exposure,
    capped at ``max_fps`` (reached at 1000 us)."""
    if settings.exposure_us <= 0:
        raise ConfigError("exposure must be positive")
    return min(max_fps, max_fps * REFERENCE_EXPOSURE_US / settings.exposure_us)


@dataclass(frozen=True)
class SensorConfig:
    """Raw sensor geometry and photometry of the virtual rig.

    The field of view is the band of rows ``fov_top .. fov_top + fov_span``
    that the specimen centre travels through while it is being imaged.
    """

    height: int = 1200
    width: int = 640
    cuvette_left: int | None = None
    fov_top: int = 100
    fov_span: int = 1000
    background_rgb: tuple[float, float, float] = (70.0, 72.0, 68.0)
    vignette: float = 0.06
    noise_sd: float = 1.5
    aperture_light_exponent: float = 0.5
    calibration_frames: int = 10
    tolerance_k: float = 4.0
    tolerance_floor: float = 8.0
    trigger_threshold: int = 50
    drop_prob: float = 0.0
    noise_seed: int = 12345

    def __post_init__(self):
        if self.width < CROP_WIDTH or self.height < CROP_WIDTH:
            raise ConfigError(f"sensor {self.height}x{self.width} smaller than the {CROP_WIDTH}-px crop")
        if self.fov_span <= 0 or self.fov_top < 0 or self.fov_top + self.fov_span > self.height:
            raise ConfigError("field of view must lie inside the sensor")
        if not 0 <= self.drop_prob < 1:
            raise ConfigError("drop_prob must be in [0, 1)")

    @property
    def cuvette_columns(self) -> tuple[int, int]:
        left = (self.width - CROP_WIDTH) // 2 if self.cuvette_left is None else self.cuvette_left
        return left, left + CROP_WIDTH

    @property
    def cuvette_center(self) -> float:
        left, right = self.cuvette_columns
        return (left + right - 1) / 2


# Smaller sensor used for large experiment sweeps; same optics otherwise.
COMPACT_SENSOR = SensorConfig(height=640, width=512, fov_top=72, fov_span=496)


def light_factor(settings: CameraSettings, sensor: SensorConfig) -> float:
    """Image brightness relative to 1000 us at f/8: linear in exposure."""
    return (settings.exposure_us / REFERENCE_EXPOSURE_US) * (8.0 / settings.aperture_f) ** sensor.aperture_light_exponent


@dataclass(frozen=True)
class SpecimenLayer:
    """Rendered specimen patch at reference light, positioned relative to the
    rounded specimen centre: pixel ``[i, j]`` lands on
    ``(round(row) + origin[0] + i, round(col) + origin[1] + j)``."""

    rgb: np.ndarray
    mask: np.ndarray
    origin: tuple[int, int]


class Renderable(Protocol):
    specimen_id: str
    velocity_px_s: float

    def lateral_offset(self, camera_id: int) -> float: ...

    def render(self, camera_id: int, t: float, settings: CameraSettings, rng: np.random.Generator) -> SpecimenLayer: ...


@dataclass(frozen=True)
class SinkTrajectory:
    entry_time: float
    velocity_px_s: float
    visible_span_px: int
    capture_times: tuple[float, ...]

    @property
    def exit_time(self) -> float:
        return self.entry_time + self.visible_span_px / self.velocity_px_s

    def to_dict(self) -> dict:
        return {
            "entry_time": self.entry_time,
            "velocity_px_s": self.velocity_px_s,
            "visible_span_px": self.visible_span_px,
            "n_captures": len(self.capture_times),
        }


def plan_trajectory(velocity_px_s: float, span_px: int, settings: CameraSettings, entry_time: float = 0.0) -> SinkTrajectory:
    if not velocity_px_s > 0:
        raise ConfigError(f"sinking velocity must be positive, got {velocity_px_s}")
    rate = frame_rate(settings)
    n = math.floor(span_px / velocity_px_s * rate)
    times = tuple(entry_time + k / rate for k in range(n))
    return SinkTrajectory(entry_time, float(velocity_px_s), int(span_px), times)


class Rig:
    """The two-camera imaging box: backgrounds, sensor noise and the
    calibrated background models per camera for the current settings."""

    def __init__(self, sensor: SensorConfig = SensorConfig()):
        self.sensor = sensor
        rng = np.random.default_rng(sensor.noise_seed)
        pad = 64
        self._pad = pad
        self._noise = rng.normal(0.0, sensor.noise_sd, (sensor.height + pad, sensor.width + pad, 3)).astype(np.float32)
        rows = (np.arange(sensor.height) - sensor.height / 2) / (sensor.height / 2)
        cols = (np.arange(sensor.width) - sensor.width / 2) / (sensor.width / 2)
        radial = rows[:, None] ** 2 + cols[None, :] ** 2
        base = np.asarray(sensor.background_rgb, dtype=np.float32)
        self._background = {
            cam: ((1.0 - sensor.vignette * radial)[..., None] * base * (1.0 + 0.02 * (cam - 1))).astype(np.float32)
            for cam in CAMERAS
        }
        self._cache_key = None
        self._models: dict[int, BackgroundModel] = {}
        self._lit: dict[int, np.ndarray] = {}

    def noise(self, rng: np.random.Generator) -> np.ndarray:
        oy, ox = rng.integers(0, self._pad, 2)
        return self._noise[oy : oy + self.sensor.height, ox : ox + self.sensor.width]

    def lit_background(self, camera_id: int, settings: CameraSettings) -> np.ndarray:
        self._prepare(settings)
        return self._lit[camera_id]

    def background_model(self, camera_id: int, settings: CameraSettings) -> BackgroundModel:
        self._prepare(settings)
        return self._models[camera_id]

    def _prepare(self, settings: CameraSettings) -> None:
        if self._cache_key == settings:
            return
        s = self.sensor
        light = light_factor(settings, s)
        rng = np.random.default_rng([s.noise_seed, settings.exposure_us, int(settings.aperture_f * 1000)])
        self._lit = {cam: self._background[cam] * light for cam in CAMERAS}
        self._models = {}
        for cam in CAMERAS:
            shots = [np.clip(self._lit[cam] + self.noise(rng), 0, 255).astype(np.uint8) for _ in range(s.calibration_frames)]
            self._models[cam] = calibrate(shots, s.tolerance_k, s.tolerance_floor, s.trigger_threshold)
        self._cache_key = settings

    def raw_frame(
        self,
        camera_id: int,
        layer: SpecimenLayer | None,
        center: tuple[float, float],
        settings: CameraSettings,
        rng: np.random.Generator,
        clip: bool = True,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Compose one raw frame. Returns ``(frame, true_mask)``; the frame is
        uint8 when ``clip`` is set, float32 otherwise."""
        s = self.sensor
        light = light_factor(settings, s)
        frame = self.lit_background(camera_id, settings) + self.noise(rng)
        truth = np.zeros((s.height, s.width), dtype=bool)
        if layer is not None:
            r0 = int(round(center[0])) + layer.origin[0]
            c0 = int(round(center[1])) + layer.origin[1]
            h, w = layer.mask.shape
            fr0, fc0 = max(r0, 0), max(c0, 0)
            fr1, fc1 = min(r0 + h, s.height), min(c0 + w, s.width)
            if fr0 < fr1 and fc0 < fc1:
                sub_mask = layer.mask[fr0 - r0 : fr1 - r0, fc0 - c0 : fc1 - c0]
                sub_rgb = layer.rgb[fr0 - r0 : fr1 - r0, fc0 - c0 : fc1 - c0]
                window = frame[fr0:fr1, fc0:fc1]
                noise = window - self._lit[camera_id][fr0:fr1, fc0:fc1]
                window[sub_mask] = sub_rgb[sub_mask] * light + noise[sub_mask]
                truth[fr0:fr1, fc0:fc1] = sub_mask
        if clip:
            frame = np.clip(frame, 0, 255).astype(np.uint8)
        return frame, truth


@dataclass
class PassResult:
    specimen_id: str
    frames: dict[int, list[FrameImage]]
    trajectory: SinkTrajectory
    true_areas: dict[str, int]
    missed: int = 0
    dropped: int = 0

    def all_frames(self) -> list[FrameImage]:
        return [f for cam in CAMERAS for f in self.frames.get(cam, [])]


FrameHook = Callable[[FrameImage, np.ndarray], None]


def simulate_pass(
    specimen: Renderable,
    settings: CameraSettings,
    seed: int | np.random.SeedSequence | None = 0,
    rig: Rig | None = None,
    keep_pixels: bool = False,
    on_frame: FrameHook | None = None,
    on_raw: Callable[[str, int, np.ndarray], None] | None = None,
) -> PassResult:
    """Image one specimen as it sinks through the field of view.

    Both cameras share trigger times. Every raw frame is passed through
    detection and cropping; frames where nothing triggers are counted as
    ``missed``. ``on_frame`` receives each cropped frame (with pixels and
    mask) together with the true silhouette mask of the raw frame;
    ``on_raw`` receives ``(image_id, camera_id, raw_frame)`` before detection.
    """
    rig = rig or Rig()
    sensor = rig.sensor
    rng = np.random.default_rng(seed)
    traj = plan_trajectory(specimen.velocity_px_s, sensor.fov_span, settings)
    frames: dict[int, list[FrameImage]] = {cam: [] for cam in CAMERAS}
    true_areas: dict[str, int] = {}
    missed = dropped = 0
    left, _ = sensor.cuvette_columns
    for k, t in enumerate(traj.capture_times):
        row = sensor.fov_top + specimen.velocity_px_s * (t - traj.entry_time)
        for cam in CAMERAS:
            layer = specimen.render(cam, t, settings, rng)
            col = sensor.cuvette_center + specimen.lateral_offset(cam)
            raw, truth = rig.raw_frame(cam, layer, (row, col), settings, rng)
            image_id = f"{specimen.specimen_id}_c{cam}_{k:04d}"
            if on_raw is not None:
                on_raw(image_id, cam, raw)
            if sensor.drop_prob and rng.random() < sensor.drop_prob:
                dropped += 1
                continue
            det = detect(raw, rig.background_model(cam, settings))
            if det is None:
                missed += 1
                continue
            frame = crop(
                raw, det.bbox, centroid=det.centroid, mask=det.mask, cuvette_left=left,
                image_id=image_id, camera_id=cam, capture_time=round(t, 9),
            )
            true_areas[image_id] = int(np.count_nonzero(truth))
            if on_frame is not None:
                on_frame(frame, truth)
            frames[cam].append(frame if keep_pixels else frame.without_pixels())
    return PassResult(specimen.specimen_id, frames, traj, true_areas, missed, dropped)


# -- flush, routing and the device state machine -----------------------------


class Phase(str, Enum):
    IDLE = "Idle"
    IMAGING = "Imaging"
    FLUSH_OPEN = "FlushOpen"
    REFILLING = "Refilling"


class IllegalTransition(BiodiscoverError):
    pass


@dataclass(frozen=True)
class DeviceState:
    phase: Phase = Phase.IDLE
    occupancy: int = 0
    container: int | None = None
    imaging_done: bool = False


EVENTS = ("drop", "imaging_complete", "open_flush", "start_refill", "refill_done")


def transition(state: DeviceState, event: str, container: int | None = None) -> DeviceState:
    """Apply one event; anything not in the flow diagram raises.

    Idle -drop-> Imaging -imaging_complete-> Imaging(done) -open_flush->
    FlushOpen -start_refill-> Refilling -refill_done-> Idle. Further specimens
    may be dropped into the cuvette once the previous one is imaged.
    """
    p = state.phase
    if event == "drop" and (p is Phase.IDLE or (p is Phase.IMAGING and state.imaging_done)):
        return replace(state, phase=Phase.IMAGING, occupancy=state.occupancy + 1, imaging_done=False)
    if event == "imaging_complete" and p is Phase.IMAGING and not state.imaging_done:
        return replace(state, imaging_done=True)
    if event == "open_flush" and p is Phase.IMAGING and state.imaging_done:
        return DeviceState(Phase.FLUSH_OPEN, 0, container, False)
    if event == "start_refill" and p is Phase.FLUSH_OPEN:
        return replace(state, phase=Phase.REFILLING)
    if event == "refill_done" and p is Phase.REFILLING:
        return replace(state, phase=Phase.IDLE)
    raise IllegalTransition(f"event {event!r} not allowed in {p.value} (imaging_done={state.imaging_done})")


@dataclass
class EventLog:
    entries: list[dict] = field(default_factory=list)

    def record(self, t: float, phase: Phase, event: str, container: int | None = None, **extra) -> None:
        entry = {"t": round(float(t), 6), "phase": phase.value, "event": event, "container": container}
        entry.update(extra)
        self.entries.append(entry)

    def write_jsonl(self, path: Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps(e) + "\n")


@dataclass(frozen=True)
class ClassRouting:
    """Route by predicted species, optionally via a species -> group map."""

    table: dict[str, int]
    default: int
    groups: dict[str, str] = field(default_factory=dict)

    def route(self, predicted: str | None = None, area: float | None = None) -> tuple[int, bool]:
        key = self.groups.get(predicted, predicted)
        if key in self.table:
            return self.table[key], True
        return self.default, False


@dataclass(frozen=True)
class SizeRouting:
    threshold_px2: float
    small: int = 0
    large: int = 1

    def route(self, predicted: str | None = None, area: float | None = None) -> tuple[int, bool]:
        if area is None or not math.isfinite(area):
            raise ConfigError("size routing needs the specimen's mean area")
        return (self.large if area >= self.threshold_px2 else self.small), True


def flush_and_route(
    state: DeviceState,
    rule: ClassRouting | SizeRouting,
    *,
    predicted: str | None = None,
    area: float | None = None,
    clock: float = 0.0,
    events: EventLog | None = None,
    flush_s: float = 0.5,
    refill_s: float = 2.0,
) -> tuple[DeviceState, int, float]:
    """Open the valve, route to a container, refill, and return to Idle.

    Returns ``(new_state, container, clock)``.
    """
    if state.phase is not Phase.IMAGING or not state.imaging_done:
        raise IllegalTransition(f"flush requires completed imaging, device is {state.phase.value}")
    events = events if events is not None else EventLog()
    container, mapped = rule.route(predicted, area)
    if not mapped:
        log.warning("no route for %r, using default container %d", predicted, container)
        events.record(clock, state.phase, "unmapped_class", container, predicted=predicted)
    state = transition(state, "open_flush", container)
    events.record(clock, state.phase, "open_flush", container)
    clock += flush_s
    state = transition(state, "start_refill")
    events.record(clock, state.phase, "start_refill", container)
    clock += refill_s
    state = transition(state, "refill_done")
    events.record(clock, state.phase, "refill_done", container)
    return state, container, clock


@dataclass
class SessionRecord:
    specimen_id: str
    true_species: str
    predicted: str | None
    n_frames: int
    mean_area_px2: float
    container: int


def run_session(
    specimens: list,
    settings: CameraSettings,
    rule: ClassRouting | SizeRouting,
    seed: int = 0,
    rig: Rig | None = None,
    predict: Callable[[list[FrameImage]], str] | None = None,
    events: EventLog | None = None,
) -> tuple[list[SessionRecord], EventLog]:
    """Drop specimens one at a time: image, classify, flush, route, refill.

    ``specimens`` are renderable instances exposing ``species``; without a
    ``predict`` callback routing uses the true species.
    """
    rig = rig or Rig()
    events = events if events is not None else EventLog()
    state = DeviceState()
    clock = 0.0
    records = []
    seeds = np.random.SeedSequence(seed).spawn(len(specimens))
    for spec, ss in zip(specimens, seeds):
        state = transition(state, "drop")
        events.record(clock, state.phase, "drop", specimen_id=spec.specimen_id)
        result = simulate_pass(spec, settings, ss, rig, keep_pixels=predict is not None)
        clock += result.trajectory.exit_time
        state = transition(state, "imaging_complete")
        frames = result.all_frames()
        events.record(clock, state.phase, "imaging_complete", n_frames=len(frames))
        predicted = predict(frames) if (predict is not None and frames) else spec.species
        area = float(np.mean([f.silhouette_area_px2 for f in frames])) if frames else math.nan
        if isinstance(rule, SizeRouting) and not frames:
            area = 0.0
        state, container, clock = flush_and_route(state, rule, predicted=predicted, area=area, clock=clock, events=events)
        records.append(SessionRecord(spec.specimen_id, spec.species, predicted, len(frames), area, container))
    return records, events
