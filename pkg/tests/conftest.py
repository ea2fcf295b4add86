import numpy as np
import pytest

from biodiscover.core import CameraSettings, Dataset, FrameImage, LabelRegistry, SpecimenRecord
from biodiscover.devicesim import COMPACT_SENSOR
from biodiscover.syndata import SinkModel, generate_cohort, separable_pair

FAST_SINK = SinkModel(median_time_s=0.08, sigma_log=0.3)


def make_frame(image_id, camera_id=1, means=(100.0, 100.0, 100.0), area=1000, features=None, height=496):
    return FrameImage(
        image_id=image_id,
        camera_id=camera_id,
        capture_time=0.0,
        width_px=496,
        height_px=height,
        channel_means=tuple(means),
        silhouette_area_px2=area,
        features=None if features is None else np.asarray(features, dtype=float),
    )


def make_dataset(spec_frames, names=("Alpha one", "Beta two"), settings=CameraSettings(2000, 8.0)):
    """``spec_frames``: list of (specimen_id, species index, n_frames or list of frames)."""
    registry = LabelRegistry(names)
    specimens = []
    for sid, k, frames in spec_frames:
        if isinstance(frames, int):
            frames = [make_frame(f"{sid}_{j}", 1 + j % 2) for j in range(frames)]
        specimens.append(SpecimenRecord(sid, registry.label(k), list(frames)))
    return Dataset(settings, specimens, registry)


@pytest.fixture(scope="session")
def tiny_cohort():
    return generate_cohort(separable_pair(), 6, CameraSettings(2000, 8.0), 3, sensor=COMPACT_SENSOR, sink=FAST_SINK)
