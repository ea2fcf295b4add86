import json

import numpy as np
import pytest

from biodiscover.core import CameraSettings, ConfigError, WEIGHT_RESOLUTION_G, validate_dataset
from biodiscover.devicesim import COMPACT_SENSOR, SensorConfig
from biodiscover.syndata import (
    PRESETS,
    SinkModel,
    SpeciesModel,
    draw_instances,
    generate_cohort,
    generate_grid,
    separable_pair,
    species_abbrev,
    tall_species,
)

from conftest import FAST_SINK


def test_abbreviations():
    assert species_abbrev("Bembidion grapii") == "Be_gr"
    assert species_abbrev("Coccinella transversoguttata") == "Co_tr"
    assert species_abbrev("sp. 3") == "sp_3"


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_build_valid_models(name):
    models = PRESETS[name]()
    assert len(models) >= 2
    assert len({m.name for m in models}) == len(models)


def test_species_model_validation():
    with pytest.raises(ConfigError):
        SpeciesModel("Bad a", color=(300.0, 0.0, 0.0))
    with pytest.raises(ConfigError):
        SpeciesModel("Bad b", color=(1.0, 1.0, 1.0), color_cov=((1.0, 2.0, 0), (0, 1.0, 0), (0, 0, 1.0)))
    with pytest.raises(ConfigError):
        SpeciesModel("Bad c", color=(1.0, 1.0, 1.0), semi_axes=(1.0, 0.0, 1.0))
    with pytest.raises(ConfigError):
        draw_instances(separable_pair(), [1, 0], 0, COMPACT_SENSOR)
    with pytest.raises(ConfigError):
        draw_instances(separable_pair(), [1, 1, 1], 0, COMPACT_SENSOR)


def test_tiny_cohort_is_valid(tiny_cohort):
    ds = tiny_cohort.dataset
    assert validate_dataset(ds) == []
    assert len(ds) == 12
    for spec in ds.specimens:
        counts = spec.camera_counts()
        assert counts[1] == counts[2] > 0
        assert all(f.features is not None and f.features.shape == (30,) for f in spec.frames)


def test_cohort_is_reproducible(tiny_cohort):
    again = generate_cohort(separable_pair(), 6, CameraSettings(2000, 8.0), 3, sensor=COMPACT_SENSOR, sink=FAST_SINK)
    assert again.truth == tiny_cohort.truth
    for a, b in zip(again.dataset.specimens, tiny_cohort.dataset.specimens):
        assert [f.channel_means for f in a.frames] == [f.channel_means for f in b.frames]


def test_grid_shares_specimens_and_faster_exposure_gives_more_frames():
    cells = [CameraSettings(1000, 8.0), CameraSettings(2000, 8.0)]
    grid = generate_grid(separable_pair(), 2, cells, seed=4, sensor=COMPACT_SENSOR, sink=FAST_SINK)
    fast, slow = (grid[c].dataset for c in cells)
    assert fast.specimen_ids() == slow.specimen_ids()
    for a, b in zip(fast.specimens, slow.specimens):
        assert grid[cells[0]].truth[a.specimen_id]["velocity_px_s"] == grid[cells[1]].truth[b.specimen_id]["velocity_px_s"]
        assert len(a.frames) >= len(b.frames)


def test_truth_sidecar(tmp_path, tiny_cohort):
    tiny_cohort.write_sidecar(tmp_path / "truth.json")
    doc = json.loads((tmp_path / "truth.json").read_text())
    entry = doc["specimens"]["Ru_se-000"]
    assert entry["species"] == "Rubra separata"
    assert entry["missed_frames"] == 0
    assert set(entry["depth"]) == {"1", "2"}
    assert len(entry["true_areas"]) == len(tiny_cohort.dataset.by_id()["Ru_se-000"].frames)


def test_dry_weights_follow_resolution():
    cohort = generate_cohort(PRESETS["diptera"](), 2, CameraSettings(2000, 8.0), 0, sensor=COMPACT_SENSOR, sink=SinkModel(0.05, 0.1), compute_features=False)
    for spec in cohort.dataset.specimens:
        w = spec.dry_weight_g
        assert w is not None and w >= WEIGHT_RESOLUTION_G
        assert round(w / WEIGHT_RESOLUTION_G) * WEIGHT_RESOLUTION_G == pytest.approx(w)


def test_tall_specimen_produces_tall_crops():
    cohort = generate_cohort([tall_species(), separable_pair()[0]], [1, 1], CameraSettings(1000, 8.0), 0, sink=SinkModel(0.1, 0.0), compute_features=False)
    tall = cohort.dataset.specimens[0]
    heights = [f.height_px for f in tall.frames]
    assert heights and max(heights) > 496
    assert all(f.width_px == 496 for f in tall.frames)
    short = cohort.dataset.specimens[1]
    assert all(f.height_px == 496 for f in short.frames)


def test_blur_keeps_mean_colour():
    # blur acts on the texture only: the silhouette's mean colour barely moves
    sensor = SensorConfig(height=640, width=512, fov_top=72, fov_span=496)
    models = PRESETS["spotted"]()[:1]
    sharp = generate_cohort(models, 3, CameraSettings(2000, 8.0), 1, sensor=sensor, sink=SinkModel(0.05, 0.0))
    blurred = generate_cohort(models, 3, CameraSettings(2000, 8.0), 1, sensor=sensor, sink=SinkModel(0.05, 0.0), extra_blur=20.0)
    for a, b in zip(sharp.dataset.specimens, blurred.dataset.specimens):
        fa = np.mean([f.features[:3] for f in a.frames], axis=0)
        fb = np.mean([f.features[:3] for f in b.frames], axis=0)
        np.testing.assert_allclose(fa, fb, atol=0.02)
        assert [f.silhouette_area_px2 for f in a.frames] == [f.silhouette_area_px2 for f in b.frames]
