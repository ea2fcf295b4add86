
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biodiscover.core import (
    CameraSettings,
    ConfigError,
    DataError,
    LabelRegistry,
    check_confidence,
    dataset_statistics,
    load_manifest,
    round_weight,
    settings_grid_cells,
    validate_dataset,
    write_manifest,
)

from conftest import make_dataset, make_frame


def test_registry_dense_ids_and_lookup():
    reg = LabelRegistry(["Bembidion grapii", "Byrrhus fasciatus"])
    assert [lab.id for lab in reg] == [0, 1]
    assert reg.label("Byrrhus fasciatus").id == 1
    assert reg.label(0).name == "Bembidion grapii"
    with pytest.raises(DataError):
        reg.label("Nope nope")
    assert reg.problems() == []
    assert LabelRegistry(["A a"]).problems()
    assert LabelRegistry(["A a", "A a"]).problems()


def test_camera_settings_validation_and_key():
    s = CameraSettings(2000, 8.0)
    assert s.key == "e2000_f8"
    assert CameraSettings.from_key(s.key) == s
    assert CameraSettings(1000, 3.8).aperture_label == "1:3.8"
    with pytest.raises(ConfigError):
        CameraSettings(0, 8.0)
    with pytest.raises(ConfigError):
        CameraSettings(1000, -1.0)
    cells = settings_grid_cells()
    assert len(cells) == 9 and cells[0] == CameraSettings(1000, 3.8) and cells[-1] == CameraSettings(2000, 16.0)


def test_valid_dataset_has_no_violations():
    ds = make_dataset([("a1", 0, 2), ("a2", 0, 1), ("b1", 1, 3)])
    assert validate_dataset(ds) == []


def test_specimen_without_frames_is_named():
    ds = make_dataset([("a1", 0, 2), ("empty", 1, 0)])
    v = validate_dataset(ds)
    assert len(v) == 1
    assert v[0].specimen_id == "empty"


def test_duplicate_specimen_lists_both_indices():
    ds = make_dataset([("a1", 0, 1), ("b1", 1, 1), ("a1", 1, 2)])
    dupes = [v for v in validate_dataset(ds) if v.kind == "duplicate_specimen_id"]
    assert len(dupes) == 1
    assert dupes[0].indices == (0, 2)


def test_frame_invariant_violations():
    frames = [
        make_frame("x0", camera_id=3),
        make_frame("x1", means=(300.0, 0.0, 0.0)),
        make_frame("x2", area=496 * 496 + 1),
    ]
    ds = make_dataset([("a1", 0, frames), ("b1", 1, 1)])
    kinds = {v.kind for v in validate_dataset(ds)}
    assert {"camera_id", "channel_means", "silhouette_area"} <= kinds


def test_nonpositive_dry_weight_flagged():
    ds = make_dataset([("a1", 0, 1), ("b1", 1, 1)])
    ds.specimens[0].dry_weight_g = 0.0
    assert [v.kind for v in validate_dataset(ds)] == ["dry_weight"]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 4)), min_size=1, max_size=12), st.randoms())
def test_validation_idempotent_and_order_insensitive(specs, rnd):
    ds = make_dataset([(f"s{i % 5}", k, n) for i, (k, n) in enumerate(specs)])
    first = validate_dataset(ds)
    assert validate_dataset(ds) == first
    shuffled = list(ds.specimens)
    rnd.shuffle(shuffled)
    again = validate_dataset(ds.with_specimens(shuffled))
    # indices refer to positions, so compare everything else
    strip = lambda vs: sorted((v.kind, v.specimen_id, v.message.split(" at ")[0]) for v in vs)
    assert strip(again) == strip(first)


def test_statistics_enumeration():
    ds = make_dataset([("a1", 0, 5), ("a2", 0, 7), ("a3", 0, 1)], names=("Alpha one", "Beta two", "Gamma three"))
    stats = dataset_statistics(ds)
    assert stats["Alpha one"] == (3, 13)
    assert stats["Beta two"] == (0, 0)
    assert sum(i for _, i in stats.values()) == ds.n_images()


def test_statistics_table_scale():
    # 17 specimens holding 2274 images, as in the pilot table at 1000 us, 1:3.8
    counts = [133] * 16 + [2274 - 133 * 16]
    ds = make_dataset([(f"bg{i}", 0, n) for i, n in enumerate(counts)], names=("Bembidion grapii", "Other sp"))
    assert dataset_statistics(ds)["Bembidion grapii"] == (17, 2274)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 6)), max_size=15))
def test_statistics_match_exhaustive_count(specs):
    ds = make_dataset([(f"s{i}", k, n) for i, (k, n) in enumerate(specs)], names=("A a", "B b", "C c"))
    stats = dataset_statistics(ds)
    reachable = sum(1 for s in ds.specimens for _ in s.frames)
    assert sum(i for _, i in stats.values()) == reachable
    assert sum(n for n, _ in stats.values()) == len(ds)


def test_check_confidence():
    check_confidence([0.25, 0.75])
    with pytest.raises(ValueError):
        check_confidence([0.5, 0.6])
    with pytest.raises(ValueError):
        check_confidence([1.2, -0.2])
    check_confidence([0.5, 0.5 + 5e-10])


def test_round_weight_resolution():
    assert round_weight(0.012345) == 0.0123
    assert round_weight(1e-7) == 1e-4


def test_manifest_round_trip(tmp_path, tiny_cohort):
    ds = tiny_cohort.dataset
    path = write_manifest(ds, tmp_path / "m.json")
    back = load_manifest(path)
    assert back.specimen_ids() == ds.specimen_ids()
    assert back.registry == ds.registry
    assert back.settings == ds.settings
    f0, g0 = ds.specimens[0].frames[0], back.specimens[0].frames[0]
    assert g0.image_id == f0.image_id and g0.geometry == f0.geometry
    np.testing.assert_allclose(g0.features, f0.features, atol=1e-9)
    assert validate_dataset(back) == []


def test_manifest_from_png_files(tmp_path):
    from PIL import Image

    img = np.full((496, 496, 3), 70, np.uint8)
    img[200:240, 200:250] = (200, 30, 30)
    Image.fromarray(img).save(tmp_path / "a.png")
    Image.fromarray(img).save(tmp_path / "b.png")
    doc = {
        "settings": {"exposure_us": 1000, "aperture_f": 8.0},
        "species": ["A a", "B b"],
        "specimens": [
            {"specimen_id": "x", "species": "A a", "files": {"1": ["a.png"], "2": ["b.png"]}},
        ],
    }
    import json

    (tmp_path / "m.json").write_text(json.dumps(doc))
    ds = load_manifest(tmp_path / "m.json")
    frames = ds.specimens[0].frames
    assert [f.camera_id for f in frames] == [1, 2]
    assert frames[0].silhouette_area_px2 == 40 * 50
    assert frames[0].height_px == 496


def test_bad_manifest_is_data_error(tmp_path):
    (tmp_path / "m.json").write_text("{not json")
    with pytest.raises(DataError):
        load_manifest(tmp_path / "m.json")
