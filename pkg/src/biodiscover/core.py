"""Shared domain types, the species registry and the dataset container."""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

CROP_WIDTH = 496
CAMERAS = (1, 2)
WEIGHT_RESOLUTION_G = 1e-4


class BiodiscoverError(Exception):
    """Base class for errors raised by this package.

    ``details`` holds itemized problems (one per offending field or record).
    """

    def __init__(self, message: str, details: Iterable[str] = ()):
        super().__init__(message)
        self.details = list(details)


class ConfigError(BiodiscoverError):
    pass


class DataError(BiodiscoverError):
    pass


@dataclass(frozen=True)
class SpeciesLabel:
    id: int
    name: str


class LabelRegistry:
    """Flat species registry with dense ids ``0..K-1``."""

    def __init__(self, names: Iterable[str]):
        self.names = tuple(names)
        self._index = {name: i for i, name in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self) -> Iterator[SpeciesLabel]:
        return (SpeciesLabel(i, n) for i, n in enumerate(self.names))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, LabelRegistry) and self.names == other.names

    def __repr__(self) -> str:
        return f"LabelRegistry({list(self.names)!r})"

    def label(self, key: int | str) -> SpeciesLabel:
        if isinstance(key, str):
            try:
                return SpeciesLabel(self._index[key], key)
            except KeyError:
                raise DataError(f"unknown species {key!r}") from None
        if not 0 <= key < len(self.names):
            raise DataError(f"species id {key} out of range")
        return SpeciesLabel(int(key), self.names[key])

    def __contains__(self, label: object) -> bool:
        if isinstance(label, SpeciesLabel):
            return self._index.get(label.name) == label.id
        return label in self._index

    def problems(self) -> list[str]:
        out = []
        if len(self.names) < 2:
            out.append(f"registry needs at least 2 species, has {len(self.names)}")
        dupes = [n for n, c in Counter(self.names).items() if c > 1]
        if dupes:
            out.append(f"duplicate species names: {sorted(dupes)}")
        return out


@dataclass(frozen=True, order=True)
class CameraSettings:
    """Exposure (microseconds) and aperture f-number of one grid cell."""

    exposure_us: int
    aperture_f: float

    def __post_init__(self):
        if not self.exposure_us > 0:
            raise ConfigError(f"exposure_us must be positive, got {self.exposure_us}")
        if not self.aperture_f > 0:
            raise ConfigError(f"aperture_f must be positive, got {self.aperture_f}")

    @property
    def key(self) -> str:
        return f"e{self.exposure_us}_f{self.aperture_f:g}"

    @property
    def aperture_label(self) -> str:
        return f"1:{self.aperture_f:g}"

    @classmethod
    def from_key(cls, key: str) -> "CameraSettings":
        exp, ap = key.split("_")
        return cls(int(exp.lstrip("e")), float(ap.lstrip("f")))

    def to_dict(self) -> dict:
        return {"exposure_us": self.exposure_us, "aperture_f": self.aperture_f}


# Pilot grid, rows then columns as laid out in the accuracy tables.
APERTURES = (3.8, 8.0, 16.0)
EXPOSURES = (1000, 1500, 2000)
DEFAULT_SETTINGS = CameraSettings(2000, 8.0)


def settings_grid_cells(
    exposures: Sequence[int] = EXPOSURES, apertures: Sequence[float] = APERTURES
) -> list[CameraSettings]:
    return [CameraSettings(e, a) for a in apertures for e in exposures]


@dataclass(frozen=True)
class CropGeometry:
    """Where a crop window sits in the raw sensor frame.

    Row/column bounds are half-open: the crop covers ``top:bottom`` and
    ``left:right``. ``bbox`` is ``(top, left, bottom, right)`` of the
    detected specimen, also half-open.
    """

    frame_height: int
    frame_width: int
    top: int
    bottom: int
    left: int
    right: int
    bbox: tuple[int, int, int, int]
    centroid: tuple[float, float]
    clamped: bool = False

    @property
    def height(self) -> int:
        return self.bottom - self.top

    @property
    def width(self) -> int:
        return self.right - self.left

    @property
    def bbox_height(self) -> int:
        return self.bbox[2] - self.bbox[0]

    def to_dict(self) -> dict:
        return {
            "frame_height": self.frame_height,
            "frame_width": self.frame_width,
            "top": self.top,
            "bottom": self.bottom,
            "left": self.left,
            "right": self.right,
            "bbox": list(self.bbox),
            "centroid": list(self.centroid),
            "clamped": self.clamped,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CropGeometry":
        return cls(
            d["frame_height"], d["frame_width"], d["top"], d["bottom"], d["left"],
            d["right"], tuple(d["bbox"]), tuple(d["centroid"]), d.get("clamped", False),
        )


@dataclass(eq=False)
class FrameImage:
    """One cropped RGB image of a specimen from one camera.

    Pixel data is optional: synthetic cohorts usually keep only the cached
    feature vector, and datasets loaded from a manifest read pixels from
    ``path`` on demand.
    """

    image_id: str
    camera_id: int
    capture_time: float
    width_px: int
    height_px: int
    channel_means: tuple[float, float, float]
    silhouette_area_px2: int
    geometry: CropGeometry | None = None
    pixels: np.ndarray | None = field(default=None, repr=False)
    mask: np.ndarray | None = field(default=None, repr=False)
    path: Path | None = None
    mask_path: Path | None = None
    features: np.ndarray | None = field(default=None, repr=False)

    def load_pixels(self) -> np.ndarray:
        if self.pixels is not None:
            return self.pixels
        if self.path is None:
            raise DataError(f"image {self.image_id} has no pixel data or file")
        from PIL import Image

        with Image.open(self.path) as im:
            return np.asarray(im.convert("RGB"))

    def load_mask(self) -> np.ndarray | None:
        if self.mask is not None:
            return self.mask
        if self.mask_path is None:
            return None
        from PIL import Image

        with Image.open(self.mask_path) as im:
            return np.asarray(im.convert("L")) > 127

    def without_pixels(self) -> "FrameImage":
        return replace(self, pixels=None, mask=None)


@dataclass(eq=False)
class SpecimenRecord:
    specimen_id: str
    label: SpeciesLabel
    frames: list[FrameImage]
    dry_weight_g: float | None = None

    @property
    def mean_area_px2(self) -> float:
        if not self.frames:
            return math.nan
        return float(np.mean([f.silhouette_area_px2 for f in self.frames]))

    def frames_for(self, camera_id: int) -> list[FrameImage]:
        return [f for f in self.frames if f.camera_id == camera_id]

    def camera_counts(self) -> dict[int, int]:
        counts = {c: 0 for c in CAMERAS}
        for f in self.frames:
            counts[f.camera_id] = counts.get(f.camera_id, 0) + 1
        return counts

    def with_frames(self, frames: list[FrameImage]) -> "SpecimenRecord":
        return replace(self, frames=list(frames))


@dataclass(eq=False)
class Dataset:
    settings: CameraSettings
    specimens: list[SpecimenRecord]
    registry: LabelRegistry

    def __len__(self) -> int:
        return len(self.specimens)

    @property
    def n_classes(self) -> int:
        return len(self.registry)

    def specimen_ids(self) -> list[str]:
        return [s.specimen_id for s in self.specimens]

    def by_id(self) -> dict[str, SpecimenRecord]:
        return {s.specimen_id: s for s in self.specimens}

    def n_images(self) -> int:
        return sum(len(s.frames) for s in self.specimens)

    def select(self, ids: Iterable[str]) -> list[SpecimenRecord]:
        lookup = self.by_id()
        return [lookup[i] for i in ids if i in lookup]

    def with_specimens(self, specimens: list[SpecimenRecord]) -> "Dataset":
        return Dataset(self.settings, list(specimens), self.registry)


@dataclass(frozen=True)
class Violation:
    kind: str
    specimen_id: str | None
    message: str
    indices: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "specimen_id": self.specimen_id,
            "message": self.message,
            "indices": list(self.indices),
        }


def check_confidence(probs, atol: float = 1e-9) -> np.ndarray:
    """Validate one vector or a stack of row vectors of class probabilities."""
    p = np.asarray(probs, dtype=float)
    if p.ndim not in (1, 2) or p.shape[-1] < 1:
        raise ValueError(f"confidence vectors must be 1-D or 2-D, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("confidence vector contains non-finite entries")
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("confidence entries must lie in [0, 1]")
    err = np.abs(p.sum(axis=-1) - 1.0)
    if np.any(err > atol):
        raise ValueError(f"confidence vector sums deviate from 1 by up to {err.max():.3g}")
    return p


def _frame_violations(spec: SpecimenRecord, frame: FrameImage) -> list[Violation]:
    sid = spec.specimen_id
    out = []
    if frame.camera_id not in CAMERAS:
        out.append(Violation("camera_id", sid, f"{frame.image_id}: camera {frame.camera_id} not in {CAMERAS}"))
    if frame.width_px != CROP_WIDTH:
        out.append(Violation("crop_width", sid, f"{frame.image_id}: width {frame.width_px} != {CROP_WIDTH}"))
    if frame.height_px < CROP_WIDTH:
        out.append(Violation("crop_height", sid, f"{frame.image_id}: height {frame.height_px} < {CROP_WIDTH}"))
    means = np.asarray(frame.channel_means, dtype=float)
    if means.shape != (3,) or not np.all((means >= 0) & (means <= 255)):
        out.append(Violation("channel_means", sid, f"{frame.image_id}: channel means {tuple(means)} outside [0,255]"))
    if not 0 <= frame.silhouette_area_px2 <= frame.width_px * frame.height_px:
        out.append(Violation("silhouette_area", sid, f"{frame.image_id}: area {frame.silhouette_area_px2} out of range"))
    return out


def validate_dataset(ds: Dataset) -> list[Violation]:
    """Return every broken invariant; an empty list means the dataset is valid."""
    out = [Violation("registry", None, msg) for msg in ds.registry.problems()]

    positions = defaultdict(list)
    for i, spec in enumerate(ds.specimens):
        positions[spec.specimen_id].append(i)
    for sid, idx in positions.items():
        if len(idx) > 1:
            out.append(Violation("duplicate_specimen_id", sid, f"specimen id {sid!r} repeated", tuple(idx)))

    image_counts = Counter(f.image_id for s in ds.specimens for f in s.frames)
    for spec in ds.specimens:
        sid = spec.specimen_id
        if spec.label not in ds.registry:
            out.append(Violation("unknown_label", sid, f"label {spec.label} not in registry"))
        if not spec.frames:
            out.append(Violation("no_frames", sid, "specimen has no frames"))
        if spec.dry_weight_g is not None and not spec.dry_weight_g > 0:
            out.append(Violation("dry_weight", sid, f"dry weight {spec.dry_weight_g} must be positive"))
        for frame in spec.frames:
            out.extend(_frame_violations(spec, frame))
            if image_counts[frame.image_id] > 1:
                out.append(Violation("duplicate_image_id", sid, f"image id {frame.image_id!r} repeated"))
    unique = list(dict.fromkeys(out))
    return sorted(unique, key=lambda v: (v.kind, v.specimen_id or "", v.message))


def dataset_statistics(ds: Dataset) -> dict[str, tuple[int, int]]:
    """Per species ``(specimen count, image count)``, registry order."""
    stats = {name: [0, 0] for name in ds.registry.names}
    for spec in ds.specimens:
        row = stats[spec.label.name]
        row[0] += 1
        row[1] += len(spec.frames)
    return {k: (v[0], v[1]) for k, v in stats.items()}


# -- manifest I/O -----------------------------------------------------------

MANIFEST_VERSION = 1


def _frame_to_dict(frame: FrameImage, root: Path | None) -> dict:
    def rel(p):
        if p is None:
            return None
        p = Path(p)
        return str(p.relative_to(root)) if root is not None and p.is_absolute() and p.is_relative_to(root) else str(p)

    d = {
        "image_id": frame.image_id,
        "camera_id": frame.camera_id,
        "capture_time": round(float(frame.capture_time), 9),
        "width_px": frame.width_px,
        "height_px": frame.height_px,
        "channel_means": [round(float(m), 6) for m in frame.channel_means],
        "silhouette_area_px2": int(frame.silhouette_area_px2),
        "file": rel(frame.path),
        "mask_file": rel(frame.mask_path),
    }
    if frame.geometry is not None:
        d["geometry"] = frame.geometry.to_dict()
    if frame.features is not None:
        d["features"] = [round(float(x), 9) for x in frame.features]
    return d


def dataset_to_manifest(ds: Dataset, root: Path | None = None) -> dict:
    return {
        "version": MANIFEST_VERSION,
        "settings": ds.settings.to_dict(),
        "species": list(ds.registry.names),
        "specimens": [
            {
                "specimen_id": s.specimen_id,
                "species": s.label.name,
                "dry_weight_g": s.dry_weight_g,
                "frames": [_frame_to_dict(f, root) for f in s.frames],
            }
            for s in ds.specimens
        ],
    }


def write_manifest(ds: Dataset, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = dataset_to_manifest(ds, path.parent.resolve())
    path.write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")
    return path


def _frame_from_files(image_id: str, camera_id: int, file: Path, mask_file: Path | None) -> FrameImage:
    # Minimal manifests list only files; metadata is measured from the PNGs.
    from .imgproc import estimate_mask

    frame = FrameImage(image_id, camera_id, 0.0, 0, 0, (0.0, 0.0, 0.0), 0, path=file, mask_path=mask_file)
    pixels = frame.load_pixels()
    mask = frame.load_mask()
    if mask is None:
        mask = estimate_mask(pixels)
    frame.height_px, frame.width_px = pixels.shape[:2]
    frame.channel_means = tuple(float(m) for m in pixels.reshape(-1, 3).mean(axis=0))
    frame.silhouette_area_px2 = int(np.count_nonzero(mask))
    return frame


def load_manifest(path: Path) -> Dataset:
    """Load a dataset manifest (JSON).

    Each specimen lists either ``frames`` (full metadata per image) or
    ``files`` (a mapping camera id -> list of PNG paths), in which case the
    metadata is measured from the images.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    root = path.parent
    settings = CameraSettings(**doc["settings"])
    names = doc.get("species") or sorted({s["species"] for s in doc["specimens"]})
    registry = LabelRegistry(names)

    def resolve(p):
        return None if p is None else (root / p if not Path(p).is_absolute() else Path(p))

    specimens = []
    for entry in doc["specimens"]:
        frames = []
        for fd in entry.get("frames", []):
            frames.append(
                FrameImage(
                    image_id=fd["image_id"],
                    camera_id=int(fd["camera_id"]),
                    capture_time=float(fd.get("capture_time", 0.0)),
                    width_px=int(fd["width_px"]),
                    height_px=int(fd["height_px"]),
                    channel_means=tuple(float(x) for x in fd["channel_means"]),
                    silhouette_area_px2=int(fd["silhouette_area_px2"]),
                    geometry=CropGeometry.from_dict(fd["geometry"]) if fd.get("geometry") else None,
                    path=resolve(fd.get("file")),
                    mask_path=resolve(fd.get("mask_file")),
                    features=np.asarray(fd["features"], dtype=float) if fd.get("features") else None,
                )
            )
        for cam, files in sorted(entry.get("files", {}).items()):
            for j, file in enumerate(files):
                image_id = f"{entry['specimen_id']}_c{cam}_{j:04d}"
                frames.append(_frame_from_files(image_id, int(cam), resolve(file), None))
        specimens.append(
            SpecimenRecord(
                specimen_id=str(entry["specimen_id"]),
                label=registry.label(entry["species"]),
                frames=frames,
                dry_weight_g=entry.get("dry_weight_g"),
            )
        )
    return Dataset(settings, specimens, registry)


def round_weight(grams: float) -> float:
    """Round to the balance resolution, never below one resolution step."""
    return max(WEIGHT_RESOLUTION_G, round(grams, 4))
