"""Procedural ground-truthed specimen cohorts.

Each species is a parametric appearance model: a coloured ellipsoidal body
with optional spots, a marking band seen from one side only, and thin legs.
Specimens drawn from a model are rendered through the simulated device, so
the resulting datasets carry the same metadata as real captures plus a
sidecar of true masks, areas and dry weights.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .classify import extract_features
from .core import (
    CAMERAS,
    CROP_WIDTH,
    CameraSettings,
    ConfigError,
    Dataset,
    FrameImage,
    LabelRegistry,
    SpecimenRecord,
    round_weight,
)
from .devicesim import Rig, SensorConfig, SpecimenLayer, simulate_pass
from .imgproc import rescale_for_classifier, rescale_mask


@dataclass(frozen=True)
class WeightLaw:
    """Dry weight in grams as ``coef * area ** exponent`` with log-normal noise."""

    coef: float
    exponent: float
    noise_sd: float = 0.0


@dataclass(frozen=True)
class SinkModel:
    """Log-normal time to cross the field of view; velocity = span / time."""

    median_time_s: float = 0.5
    sigma_log: float = 0.4


@dataclass(frozen=True)
class SpeciesModel:
    name: str
    color: tuple[float, float, float]
    color_cov: tuple[tuple[float, ...], ...] = ((16.0, 0, 0), (0, 16.0, 0), (0, 0, 16.0))
    frame_color_sd: float = 1.0
    semi_axes: tuple[float, float, float] = (40.0, 20.0, 18.0)
    size_sd: float = 0.08
    shape_sd: float = 0.04
    spot_count: int = 0
    spot_radius: float = 2.5
    spot_color: tuple[float, float, float] = (85.0, 80.0, 20.0)
    marking_color: tuple[float, float, float] | None = None
    marking_cameras: tuple[int, ...] = (1,)
    marking_width: float = 0.25
    limb_count: int = 0
    limb_length: float = 0.6
    upright: bool = False
    weight_law: WeightLaw | None = None

    def __post_init__(self):
        cov = np.asarray(self.color_cov, dtype=float)
        if cov.shape != (3, 3) or not np.allclose(cov, cov.T) or np.linalg.eigvalsh(cov).min() < -1e-9:
            raise ConfigError(f"{self.name}: colour covariance must be a symmetric PSD 3x3 matrix")
        for label, rgb in (("color", self.color), ("spot_color", self.spot_color), ("marking_color", self.marking_color)):
            if rgb is not None and (len(rgb) != 3 or min(rgb) < 0 or max(rgb) > 255):
                raise ConfigError(f"{self.name}: {label} {rgb} outside the RGB gamut")
        if min(self.semi_axes) <= 0 or len(self.semi_axes) != 3:
            raise ConfigError(f"{self.name}: semi-axes must be three positive lengths")
        if self.size_sd < 0 or self.shape_sd < 0 or self.frame_color_sd < 0:
            raise ConfigError(f"{self.name}: spreads must be non-negative")
        if self.spot_count < 0 or self.spot_radius <= 0 or self.limb_count < 0 or self.limb_length < 0:
            raise ConfigError(f"{self.name}: texture parameters must be non-negative")
        if self.weight_law is not None and (self.weight_law.coef <= 0 or self.weight_law.noise_sd < 0):
            raise ConfigError(f"{self.name}: weight law needs a positive coefficient")

    def to_dict(self) -> dict:
        return asdict(self)


def species_abbrev(name: str) -> str:
    """``Bembidion grapii`` -> ``Be_gr``; other names are slugged."""
    parts = name.split()
    if len(parts) >= 2 and all(p.isalpha() for p in parts[:2]):
        return f"{parts[0][:2]}_{parts[1][:2]}"
    return re.sub(r"[^A-Za-z0-9]+", "_", name).strip("_") or "sp"


@dataclass(frozen=True)
class Spot:
    u: float
    w: float
    radius: float


@dataclass
class SpecimenInstance:
    """One physical specimen drawn from a species model."""

    specimen_id: str
    species: str
    model: SpeciesModel
    color: np.ndarray
    axes: tuple[float, float, float]
    yaw0: float
    yaw_rate: float
    roll0: float
    roll_rate: float
    position: tuple[float, float]
    velocity_px_s: float
    spots: dict[int, list[Spot]]
    limb_angles: tuple[float, ...]
    blur_scale: float = 1.5
    extra_blur: float = 0.0
    half_width: float = 248.0

    def lateral_offset(self, camera_id: int) -> float:
        return self.position[0] if camera_id == 1 else self.position[1]

    def depth(self, camera_id: int) -> float:
        """Distance from the focal plane as a fraction of the cuvette half-width."""
        return abs(self.lateral_offset(2 if camera_id == 1 else 1)) / self.half_width

    def blur_sigma(self, camera_id: int, settings: CameraSettings) -> float:
        return self.blur_scale * self.depth(camera_id) * (8.0 / settings.aperture_f) + self.extra_blur

    def projected_axes(self, camera_id: int, t: float) -> tuple[float, float]:
        a, b, c = self.axes
        if self.model.upright:
            return b, a
        yaw = self.yaw0 + self.yaw_rate * t
        if camera_id == 1:
            h = math.hypot(a * math.cos(yaw), b * math.sin(yaw))
        else:
            h = math.hypot(a * math.sin(yaw), b * math.cos(yaw))
        return h, c

    def nominal_area(self, n_yaw: int = 64) -> float:
        """Mean projected body area over yaw angles and both cameras."""
        a, b, c = self.axes
        if self.model.upright:
            return math.pi * a * b
        yaws = np.linspace(0, math.pi, n_yaw, endpoint=False)
        h1 = np.hypot(a * np.cos(yaws), b * np.sin(yaws))
        h2 = np.hypot(a * np.sin(yaws), b * np.cos(yaws))
        return float(math.pi * c * np.mean((h1 + h2) / 2))

    def max_extent(self) -> float:
        a, b, c = self.axes
        return max(a, b, c) * (1 + self.model.limb_length * (self.model.limb_count > 0)) + 3

    def render(self, camera_id: int, t: float, settings: CameraSettings, rng: np.random.Generator) -> SpecimenLayer:
        m = self.model
        hx, vy = self.projected_axes(camera_id, t)
        theta = self.roll0 + self.roll_rate * t
        ct, st = math.cos(theta), math.sin(theta)
        limb = max(hx, vy) * m.limb_length if m.limb_count else 0.0
        ex = math.sqrt((hx * ct) ** 2 + (vy * st) ** 2) + limb + 2
        ey = math.sqrt((hx * st) ** 2 + (vy * ct) ** 2) + limb + 2
        ry, rx = int(math.ceil(ey)), int(math.ceil(ex))
        dy = np.arange(-ry, ry + 1, dtype=np.float64)[:, None]
        dx = np.arange(-rx, rx + 1, dtype=np.float64)[None, :]
        u = (dx * ct + dy * st) / hx
        w = (-dx * st + dy * ct) / vy
        body = u * u + w * w <= 1.0

        base = self.color + rng.normal(0.0, m.frame_color_sd, 3)
        rgb = np.empty(body.shape + (3,), dtype=np.float32)
        rgb[:] = base
        # spots shrink with foreshortening, keeping their share of the silhouette fixed
        shrink = math.sqrt(hx * vy / (self.axes[0] * self.axes[2])) if not m.upright else 1.0
        for spot in self.spots.get(camera_id, ()):
            px, py = spot.u * hx, spot.w * vy
            sx, sy = px * ct - py * st, px * st + py * ct
            hit = (dx - sx) ** 2 + (dy - sy) ** 2 <= (spot.radius * shrink) ** 2
            rgb[hit] = m.spot_color
        if m.marking_color is not None and camera_id in m.marking_cameras:
            rgb[np.abs(w) <= m.marking_width] = m.marking_color
        sigma = self.blur_sigma(camera_id, settings)
        if sigma > 0.3 and body.any():
            # normalized convolution inside the body, then a shift so the
            # silhouette keeps its mean colour
            weight = ndimage.gaussian_filter(body.astype(np.float64), sigma, mode="constant")
            weight = np.maximum(weight, 1e-12)
            for ch in range(3):
                dev = np.where(body, rgb[..., ch] - base[ch], 0.0)
                smooth = ndimage.gaussian_filter(dev, sigma, mode="constant") / weight
                smooth += dev[body].mean() - smooth[body].mean()
                rgb[..., ch] = base[ch] + smooth
        mask = body.copy()
        rgb[~body] = base
        if m.limb_count:
            leg = np.clip(base * 0.7, 0, 255)
            for alpha in self.limb_angles:
                bx, by = math.cos(alpha) * hx, math.sin(alpha) * vy
                steps = np.arange(0.0, limb + 0.5, 0.5)
                lx = bx + steps * math.cos(alpha)
                ly = by + steps * math.sin(alpha)
                ix = np.rint(lx * ct - ly * st).astype(int) + rx
                iy = np.rint(lx * st + ly * ct).astype(int) + ry
                ok = (iy >= 0) & (iy < mask.shape[0]) & (ix >= 0) & (ix < mask.shape[1])
                mask[iy[ok], ix[ok]] = True
                rgb[iy[ok], ix[ok]] = leg
        return SpecimenLayer(np.clip(rgb, 0, 255), mask, (-ry, -rx))


def draw_specimen(
    model: SpeciesModel,
    specimen_id: str,
    rng: np.random.Generator,
    sink: SinkModel,
    sensor: SensorConfig,
    blur_scale: float = 1.5,
    extra_blur: float = 0.0,
) -> SpecimenInstance:
    color = rng.multivariate_normal(np.asarray(model.color, float), np.asarray(model.color_cov, float))
    color = np.clip(color, 0, 255)
    scale = math.exp(rng.normal(0.0, model.size_sd))
    axes = tuple(float(ax * scale * math.exp(rng.normal(0.0, model.shape_sd))) for ax in model.semi_axes)
    spots = {}
    for cam in CAMERAS:
        n = int(round(model.spot_count))
        pts = []
        while len(pts) < n:
            su, sw = rng.uniform(-0.75, 0.75, 2)
            if su * su + sw * sw <= 0.55:
                pts.append(Spot(float(su), float(sw), float(model.spot_radius * scale)))
        spots[cam] = pts
    half = CROP_WIDTH / 2
    inst = SpecimenInstance(
        specimen_id=specimen_id,
        species=model.name,
        model=model,
        color=color.astype(np.float32),
        axes=axes,
        yaw0=float(rng.uniform(0, math.pi)),
        yaw_rate=float(rng.normal(0.0, 1.0)),
        roll0=float(rng.normal(0.0, 0.25)),
        roll_rate=float(rng.normal(0.0, 0.4)),
        position=(0.0, 0.0),
        velocity_px_s=sensor.fov_span / (sink.median_time_s * math.exp(rng.normal(0.0, sink.sigma_log))),
        spots=spots,
        limb_angles=tuple(
            2 * math.pi * (k + 0.5) / model.limb_count + float(rng.normal(0.0, 0.1))
            for k in range(model.limb_count)
        ),
        blur_scale=blur_scale,
        extra_blur=extra_blur,
        half_width=half,
    )
    room = max(half - inst.max_extent() - 4.0, 0.0)
    inst.position = (float(rng.uniform(-room, room)), float(rng.uniform(-room, room)))
    return inst


@dataclass
class Cohort:
    dataset: Dataset
    truth: dict[str, dict]
    instances: list[SpecimenInstance] = field(default_factory=list, repr=False)

    def sidecar(self) -> dict:
        return {"settings": self.dataset.settings.to_dict(), "specimens": self.truth}

    def write_sidecar(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.sidecar(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


FrameWriter = Callable[[str, FrameImage, np.ndarray], None]


def frame_features(frame: FrameImage) -> np.ndarray:
    img = rescale_for_classifier(frame)
    mask = rescale_mask(frame.load_mask())
    return extract_features(img, mask).values


def draw_instances(
    models: Sequence[SpeciesModel],
    counts: Sequence[int] | int,
    seed: int,
    sensor: SensorConfig,
    sink: SinkModel = SinkModel(),
    blur_scale: float = 1.5,
    extra_blur: float = 0.0,
) -> list[SpecimenInstance]:
    """Draw the physical specimens of a cohort; independent of camera settings."""
    if isinstance(counts, int):
        counts = [counts] * len(models)
    if len(counts) != len(models):
        raise ConfigError("one count per species model is required")
    if any(c < 1 for c in counts):
        raise ConfigError("every species needs at least one specimen")
    names = [m.name for m in models]
    if len(set(names)) != len(names):
        raise ConfigError("species model names must be unique")
    out = []
    for si, (model, n) in enumerate(zip(models, counts)):
        abbrev = species_abbrev(model.name)
        for i in range(n):
            rng = np.random.default_rng([seed, si, i, 0])
            out.append(draw_specimen(model, f"{abbrev}-{i:03d}", rng, sink, sensor, blur_scale, extra_blur))
    return out


def generate_cohort(
    models: Sequence[SpeciesModel],
    counts: Sequence[int] | int,
    settings: CameraSettings,
    seed: int = 0,
    *,
    sensor: SensorConfig | None = None,
    sink: SinkModel = SinkModel(),
    blur_scale: float = 1.5,
    extra_blur: float = 0.0,
    rig: Rig | None = None,
    keep_pixels: bool = False,
    compute_features: bool = True,
    writer: FrameWriter | None = None,
    raw_writer: Callable[[str, str, int, np.ndarray], None] | None = None,
) -> Cohort:
    """Render a cohort through the simulated device under ``settings``.

    The same ``seed`` gives the same physical specimens for every setting, so
    datasets generated for different grid cells share specimen ids.
    ``raw_writer`` receives ``(specimen_id, image_id, camera_id, raw_frame)``
    for every uncropped sensor frame.
    """
    if rig is None:
        rig = Rig(sensor or SensorConfig())
    sensor = rig.sensor
    instances = draw_instances(models, counts, seed, sensor, sink, blur_scale, extra_blur)
    registry = LabelRegistry([m.name for m in models])
    specimens, truth = [], {}
    for idx, inst in enumerate(instances):
        si = registry.label(inst.species).id

        def hook(frame: FrameImage, true_mask: np.ndarray) -> None:
            if compute_features:
                frame.features = frame_features(frame)
            if writer is not None:
                writer(inst.specimen_id, frame, true_mask)

        on_raw = None if raw_writer is None else (lambda image_id, cam, raw, sid=inst.specimen_id: raw_writer(sid, image_id, cam, raw))
        result = simulate_pass(inst, settings, np.random.default_rng([seed, si, idx, 1]), rig, keep_pixels, hook, on_raw)
        frames = result.all_frames()
        dry = None
        law = inst.model.weight_law
        nominal = inst.nominal_area()
        if law is not None:
            wrng = np.random.default_rng([seed, si, idx, 2])
            dry = round_weight(law.coef * nominal**law.exponent * math.exp(wrng.normal(0.0, law.noise_sd)))
        specimens.append(SpecimenRecord(inst.specimen_id, registry.label(si), frames, dry))
        truth[inst.specimen_id] = {
            "species": inst.species,
            "true_areas": result.true_areas,
            "nominal_area_px2": round(nominal, 6),
            "velocity_px_s": round(inst.velocity_px_s, 6),
            "depth": {str(c): round(inst.depth(c), 6) for c in CAMERAS},
            "blur_sigma": {str(c): round(inst.blur_sigma(c, settings), 6) for c in CAMERAS},
            "missed_frames": result.missed,
            "dropped_frames": result.dropped,
            "dry_weight_g": dry,
        }
    return Cohort(Dataset(settings, specimens, registry), truth, instances)


def generate_grid(
    models: Sequence[SpeciesModel],
    counts: Sequence[int] | int,
    cells: Sequence[CameraSettings],
    seed: int = 0,
    *,
    sensor: SensorConfig | None = None,
    sink: SinkModel = SinkModel(),
    blur_scale: float = 1.5,
    extra_blur: dict[CameraSettings, float] | None = None,
) -> dict[CameraSettings, Cohort]:
    """One cohort per camera setting, all sharing the same specimens."""
    rig = Rig(sensor or SensorConfig())
    extra_blur = extra_blur or {}
    return {
        cell: generate_cohort(
            models, counts, cell, seed, rig=rig, sink=sink, blur_scale=blur_scale,
            extra_blur=extra_blur.get(cell, 0.0),
        )
        for cell in cells
    }


# -- preset species ------------------------------------------------------------

def separable_pair() -> list[SpeciesModel]:
    """Red versus blue beetles of the same build."""
    return [
        SpeciesModel("Rubra separata", color=(80.0, 20.0, 15.0)),
        SpeciesModel("Caerulea separata", color=(15.0, 25.0, 85.0)),
    ]


def congener_pair() -> list[SpeciesModel]:
    """Two near-identical congeners: small colour and size offsets only."""
    return [
        SpeciesModel("Otiorhynchus similis", color=(30.0, 26.0, 20.0), frame_color_sd=3.0, size_sd=0.12),
        SpeciesModel("Otiorhynchus confusus", color=(33.0, 27.0, 20.0), semi_axes=(41.0, 20.5, 18.0), frame_color_sd=3.0, size_sd=0.12),
    ]


def spotted_pair() -> list[SpeciesModel]:
    """Spotted versus plain species whose mean colours coincide.

    Only the fine spot texture separates them, so heavy defocus blur makes
    the pair indistinguishable.
    """
    body, spots = np.array([15.0, 15.0, 60.0]), np.array([85.0, 80.0, 20.0])
    coverage = 0.114  # measured share of spot pixels in rendered silhouettes
    plain = tuple(float(x) for x in (1 - coverage) * body + coverage * spots)
    # body variance chosen so both species have the same blurred colour spread
    return [
        SpeciesModel("Maculata punctata", color=tuple(body), spot_count=10, spot_radius=3.0, spot_color=tuple(spots), color_cov=((11.0, 0, 0), (0, 11.0, 0), (0, 0, 11.0))),
        SpeciesModel("Maculata inornata", color=plain, color_cov=((9.0, 0, 0), (0, 9.0, 0), (0, 0, 9.0))),
    ]


def blind_camera_pair() -> list[SpeciesModel]:
    """The first species carries a dorsal band that only camera 1 can see."""
    return [
        SpeciesModel("Dorsalis fasciata", color=(20.0, 20.0, 75.0), marking_color=(85.0, 85.0, 20.0), marking_cameras=(1,)),
        SpeciesModel("Dorsalis nuda", color=(20.0, 20.0, 75.0)),
    ]


def noisy_pair() -> list[SpeciesModel]:
    """Overlapping per-image colour distributions; many images per specimen
    are needed for a reliable call."""
    tight = ((1.0, 0, 0), (0, 1.0, 0), (0, 0, 1.0))
    return [
        SpeciesModel("Varia prima", color=(40.0, 25.0, 70.0), color_cov=tight, frame_color_sd=8.0),
        SpeciesModel("Varia secunda", color=(46.0, 25.0, 64.0), color_cov=tight, frame_color_sd=8.0),
    ]


def tall_species() -> SpeciesModel:
    """Long-bodied specimen sinking head first; taller than the crop."""
    return SpeciesModel("Longa erecta", color=(20.0, 60.0, 20.0), semi_axes=(300.0, 18.0, 18.0), size_sd=0.03, upright=True)


def pilot_species() -> list[SpeciesModel]:
    """Nine stand-ins for the Greenland pilot species, congeners kept close."""
    return [
        SpeciesModel("Bembidion grapii", color=(25.0, 30.0, 22.0), semi_axes=(22.0, 9.0, 7.0), limb_count=6, limb_length=0.5),
        SpeciesModel("Byrrhus fasciatus", color=(45.0, 35.0, 22.0), semi_axes=(30.0, 22.0, 18.0), marking_color=(75.0, 60.0, 40.0), marking_cameras=(1, 2), marking_width=0.12),
        SpeciesModel("Coccinella transversoguttata", color=(85.0, 20.0, 10.0), semi_axes=(28.0, 22.0, 16.0), spot_count=6, spot_radius=3.0, spot_color=(10.0, 10.0, 10.0)),
        SpeciesModel("Otiorhynchus arcticus", color=(22.0, 20.0, 18.0), semi_axes=(36.0, 18.0, 16.0), limb_count=6),
        SpeciesModel("Otiorhynchus nodosus", color=(28.0, 24.0, 20.0), semi_axes=(33.0, 17.0, 15.0), limb_count=6),
        SpeciesModel("Patrobus septentrionus", color=(18.0, 18.0, 22.0), semi_axes=(30.0, 12.0, 9.0), limb_count=6, limb_length=0.5),
        SpeciesModel("Quedius fellmanni", color=(30.0, 20.0, 15.0), semi_axes=(40.0, 9.0, 8.0), limb_count=6, limb_length=0.35),
        SpeciesModel("Xysticus deichmanni", color=(60.0, 45.0, 30.0), semi_axes=(22.0, 18.0, 12.0), limb_count=8, limb_length=1.0),
        SpeciesModel("Xysticus durus", color=(55.0, 40.0, 32.0), semi_axes=(24.0, 19.0, 12.0), limb_count=8, limb_length=1.0),
    ]


def diptera_species() -> list[SpeciesModel]:
    """Three fly species with power-law dry weights (grams vs px^2)."""
    return [
        SpeciesModel("Dolichopus groenlandicus", color=(30.0, 55.0, 30.0), semi_axes=(20.0, 8.0, 7.0), limb_count=6, limb_length=0.7, weight_law=WeightLaw(2.0e-6, 1.0, 0.35)),
        SpeciesModel("Dolichopus plumipes", color=(35.0, 60.0, 28.0), semi_axes=(18.0, 7.0, 6.5), limb_count=6, limb_length=0.7, weight_law=WeightLaw(2.2e-6, 1.0, 0.35)),
        SpeciesModel("Tachina ampliforceps", color=(20.0, 18.0, 16.0), semi_axes=(34.0, 16.0, 14.0), size_sd=0.18, limb_count=6, limb_length=0.5, weight_law=WeightLaw(1.0e-7, 1.5, 0.15)),
    ]


PRESETS: dict[str, Callable[[], list[SpeciesModel]]] = {
    "separable": separable_pair,
    "congeners": congener_pair,
    "spotted": spotted_pair,
    "blind-camera": blind_camera_pair,
    "noisy": noisy_pair,
    "pilot": pilot_species,
    "diptera": diptera_species,
    "full": lambda: pilot_species() + diptera_species(),
}
