"""Device image path: background calibration, specimen detection, cropping,
rescaling for the classifier, silhouette area and the per-species outlier
screen."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .core import (
    CROP_WIDTH,
    ConfigError,
    CropGeometry,
    DataError,
    Dataset,
    FrameImage,
)

log = logging.getLogger(__name__)

CLASSIFIER_SIZE = 128
_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class DimensionError(DataError):
    pass


@dataclass(frozen=True)
class BackgroundModel:
    reference: np.ndarray  # float32 (H, W, 3)
    tolerance: np.ndarray  # float32 (H, W, 3)
    trigger_threshold: int = 50

    @property
    def shape(self) -> tuple[int, int]:
        return self.reference.shape[:2]

    def save(self, path: Path) -> None:
        np.savez_compressed(
            path,
            reference=self.reference,
            tolerance=self.tolerance,
            trigger_threshold=np.int64(self.trigger_threshold),
        )

    @classmethod
    def load(cls, path: Path) -> "BackgroundModel":
        with np.load(path) as z:
            return cls(z["reference"], z["tolerance"], int(z["trigger_threshold"]))


def calibrate(
    frames: Sequence[np.ndarray],
    k: float = 4.0,
    floor: float = 8.0,
    trigger_threshold: int = 50,
) -> BackgroundModel:
    """Per-pixel background model: mean image and ``max(k * std, floor)``."""
    if len(frames) == 0:
        raise DataError("calibration needs at least one background frame")
    shape = np.shape(frames[0])
    for f in frames[1:]:
        if np.shape(f) != shape:
            raise DimensionError(f"calibration frames differ in size: {shape} vs {np.shape(f)}")
    if len(shape) != 3 or shape[2] != 3:
        raise DimensionError(f"expected RGB frames of shape (H, W, 3), got {shape}")
    stack = np.stack([np.asarray(f, dtype=np.float32) for f in frames])
    reference = stack.mean(axis=0)
    tolerance = np.maximum(k * stack.std(axis=0), floor).astype(np.float32)
    return BackgroundModel(reference.astype(np.float32), tolerance, int(trigger_threshold))


@dataclass(frozen=True)
class Detection:
    mask: np.ndarray  # bool, full frame
    bbox: tuple[int, int, int, int]  # top, left, bottom, right (half-open)
    centroid: tuple[float, float]  # row, col
    deviating_pixels: int

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.mask))


def deviation_mask(frame: np.ndarray, bg: BackgroundModel) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.shape != bg.reference.shape:
        raise DimensionError(f"frame {frame.shape} does not match background {bg.reference.shape}")
    excess = np.abs(frame.astype(np.float32) - bg.reference)
    excess -= bg.tolerance
    return (excess[..., 0] > 0) | (excess[..., 1] > 0) | (excess[..., 2] > 0)


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Keep the largest 8-connected component of a binary mask."""
    labels, n = ndimage.label(mask, structure=_EIGHT_CONNECTED)
    if n == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def _bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


def detect(frame: np.ndarray, bg: BackgroundModel) -> Detection | None:
    """Find the specimen in a raw frame, or ``None`` if capture is not triggered."""
    dev = deviation_mask(frame, bg)
    n_dev = int(np.count_nonzero(dev))
    if n_dev < bg.trigger_threshold:
        return None
    mask = largest_component(dev)
    top, left, bottom, right = _bbox(mask)
    sub = mask[top:bottom, left:right]
    rr, cc = np.nonzero(sub)
    centroid = (float(rr.mean() + top), float(cc.mean() + left))
    return Detection(mask, (top, left, bottom, right), centroid, n_dev)


def crop_window(
    frame_shape: tuple[int, int],
    bbox: tuple[int, int, int, int],
    centroid_row: float | None = None,
    cuvette_left: int | None = None,
) -> tuple[int, int, int, int, bool]:
    """Return ``(top, bottom, left, right, clamped)`` of the crop window."""
    height, width = frame_shape
    if width < CROP_WIDTH or height < CROP_WIDTH:
        raise ConfigError(f"{height}x{width} frame is smaller than the {CROP_WIDTH}-px crop")
    top_b, left_b, bottom_b, right_b = bbox
    if not (0 <= top_b < bottom_b <= height and 0 <= left_b < right_b <= width):
        raise DataError(f"bbox {bbox} empty or outside a {height}x{width} frame")
    left = (width - CROP_WIDTH) // 2 if cuvette_left is None else int(cuvette_left)
    if not 0 <= left <= width - CROP_WIDTH:
        raise ConfigError(f"cuvette columns {left}..{left + CROP_WIDTH} fall outside the frame")
    box_h = bottom_b - top_b
    if box_h > CROP_WIDTH:
        return top_b, bottom_b, left, left + CROP_WIDTH, False
    if centroid_row is None:
        centroid_row = (top_b + bottom_b - 1) / 2
    top = math.floor(centroid_row + 0.5) - CROP_WIDTH // 2
    clamped_top = min(max(top, 0), height - CROP_WIDTH)
    return clamped_top, clamped_top + CROP_WIDTH, left, left + CROP_WIDTH, clamped_top != top


def crop(
    frame: np.ndarray,
    bbox: tuple[int, int, int, int],
    *,
    centroid: tuple[float, float] | None = None,
    mask: np.ndarray | None = None,
    cuvette_left: int | None = None,
    image_id: str = "",
    camera_id: int = 1,
    capture_time: float = 0.0,
) -> FrameImage:
    """Cut the fixed-width, specimen-centred window out of a raw frame."""
    frame = np.asarray(frame)
    top, bottom, left, right, clamped = crop_window(
        frame.shape[:2], bbox, None if centroid is None else centroid[0], cuvette_left
    )
    pixels = np.ascontiguousarray(frame[top:bottom, left:right])
    if mask is None:
        mask = np.zeros(frame.shape[:2], dtype=bool)
        t, l, b, r = bbox
        mask[t:b, l:r] = True
    sub_mask = np.ascontiguousarray(mask[top:bottom, left:right])
    if centroid is None:
        centroid = ((bbox[0] + bbox[2] - 1) / 2, (bbox[1] + bbox[3] - 1) / 2)
    geometry = CropGeometry(
        frame.shape[0], frame.shape[1], top, bottom, left, right,
        tuple(int(x) for x in bbox), (float(centroid[0]), float(centroid[1])), clamped,
    )
    # integer accumulation: exact and much faster than a strided float mean
    means = np.einsum("ijk->k", pixels, dtype=np.int64) / (pixels.shape[0] * pixels.shape[1])
    return FrameImage(
        image_id=image_id,
        camera_id=camera_id,
        capture_time=capture_time,
        width_px=pixels.shape[1],
        height_px=pixels.shape[0],
        channel_means=(float(means[0]), float(means[1]), float(means[2])),
        silhouette_area_px2=silhouette_area(sub_mask),
        geometry=geometry,
        pixels=pixels,
        mask=sub_mask,
    )


def _bilinear_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Half-pixel centres, edge samples clamped.
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, (pos - lo).astype(np.float64)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling of an (H, W) or (H, W, C) array to a float array."""
    a = np.asarray(img, dtype=np.float64)
    r0, r1, fr = _bilinear_axis(a.shape[0], out_h)
    c0, c1, fc = _bilinear_axis(a.shape[1], out_w)
    extra = (None,) * (a.ndim - 2)
    fr = fr[(slice(None), None) + extra]
    fc = fc[(None, slice(None)) + extra]
    top = a[r0][:, c0] * (1 - fc) + a[r0][:, c1] * fc
    bottom = a[r1][:, c0] * (1 - fc) + a[r1][:, c1] * fc
    return top * (1 - fr) + bottom * fr


def rescale_for_classifier(img: FrameImage | np.ndarray, size: int = CLASSIFIER_SIZE) -> np.ndarray:
    """Squeeze a crop to ``size x size`` RGB with values in [0, 1]."""
    pixels = img.load_pixels() if isinstance(img, FrameImage) else np.asarray(img)
    out = resize_bilinear(pixels, size, size) / 255.0
    return np.clip(out, 0.0, 1.0)


def rescale_mask(mask: np.ndarray, size: int = CLASSIFIER_SIZE) -> np.ndarray:
    return resize_bilinear(mask.astype(np.float64), size, size) >= 0.5


def silhouette_area(mask: np.ndarray) -> int:
    return int(np.count_nonzero(mask))


def estimate_mask(pixels: np.ndarray, tolerance: float = 8.0) -> np.ndarray:
    """Silhouette for crops stored without a mask.

    The crop border is taken as background; pixels deviating from its
    per-channel median by more than ``tolerance`` in any channel are kept and
    reduced to the largest component.
    """
    p = np.asarray(pixels, dtype=np.float32)
    border = np.concatenate([p[0], p[-1], p[:, 0], p[:, -1]])
    ref = np.median(border, axis=0)
    dev = (np.abs(p - ref) > tolerance).any(axis=2)
    return largest_component(dev)


def write_geometry_sidecar(frame: FrameImage, path: Path) -> None:
    if frame.geometry is None:
        return
    Path(path).write_text(json.dumps(frame.geometry.to_dict(), indent=1), encoding="utf-8")


@dataclass(frozen=True)
class OutlierFlag:
    specimen_id: str
    species: str
    channels: tuple[str, ...]
    z_scores: tuple[float, float, float]

    def to_dict(self) -> dict:
        return {
            "specimen_id": self.specimen_id,
            "species": self.species,
            "channels": list(self.channels),
            "z_scores": [round(z, 6) for z in self.z_scores],
        }


@dataclass(frozen=True)
class ScreenResult:
    flagged: list[OutlierFlag]
    skipped: list[dict]


def specimen_channel_means(frames: Sequence[FrameImage]) -> np.ndarray:
    return np.mean([f.channel_means for f in frames], axis=0)


def outlier_screen(ds: Dataset, n_sigma: float = 3.0) -> ScreenResult:
    """List specimens whose mean R, G or B lies beyond ``n_sigma`` population
    standard deviations from their species average. Nothing is removed."""
    by_species: dict[str, list] = {}
    for spec in ds.specimens:
        if spec.frames:
            by_species.setdefault(spec.label.name, []).append(spec)
    flagged, skipped = [], []
    for name in ds.registry.names:
        members = by_species.get(name, [])
        if len(members) < 2:
            skipped.append({"species": name, "reason": f"only {len(members)} specimen(s)"})
            log.warning("outlier screen skipped %s: only %d specimen(s)", name, len(members))
            continue
        values = np.array([specimen_channel_means(s.frames) for s in members])
        mu = values.mean(axis=0)
        sd = values.std(axis=0)
        dev = np.abs(values - mu)
        for spec, d in zip(members, dev):
            over = d > n_sigma * sd
            if over.any():
                z = tuple(float(x / s) if s > 0 else 0.0 for x, s in zip(d, sd))
                channels = tuple(c for c, hit in zip("RGB", over) if hit)
                flagged.append(OutlierFlag(spec.specimen_id, name, channels, z))
    flagged.sort(key=lambda f: (f.species, f.specimen_id))
    return ScreenResult(flagged, skipped)
