import json

import numpy as np
import pytest

from cca import data as dm
from cca.data import DatasetError, GenConfig, Layout


ATTRS = dm.make_attributes(
    [("hue", "hue_band", 3), ("shape", "shape_glyph", 3), ("stripes", "stripe_period", 3), ("border", "border_width", 3)], 32
)


def test_identical_labels_and_seed_identical_images():
    a = dm.render(ATTRS, [1, 2, 0, 1], seed=7)
    b = dm.render(ATTRS, [1, 2, 0, 1], seed=7)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (32, 32, 3) and a.dtype == np.uint8


def test_hue_change_confined_to_background():
    a = dm.render(ATTRS, [0, 1, 1, 1], seed=3).astype(int)
    b = dm.render(ATTRS, [2, 1, 1, 1], seed=3).astype(int)
    changed = np.any(a != b, axis=-1)
    hue = Layout(32).region_masks()["hue_band"]
    # the frame ink covers part of the background ring
    frame = np.any(a == dm._FRAME_INK, axis=-1) & np.any(b == dm._FRAME_INK, axis=-1)
    assert changed.any()
    assert not np.any(changed & ~hue)
    assert np.all(changed[hue & ~frame])


@pytest.mark.parametrize("factor", range(4))
def test_factor_independence(factor):
    masks = Layout(32).region_masks()
    region = masks[ATTRS[factor].factor]
    base = [1, 1, 1, 1]
    for seed in range(5):
        for cls in range(3):
            other = list(base)
            other[factor] = cls
            diff = np.any(dm.render(ATTRS, base, seed) != dm.render(ATTRS, other, seed), axis=-1)
            assert not np.any(diff & ~region)
            assert diff.any() == (cls != base[factor])


def test_regions_partition_image():
    masks = Layout(32).region_masks()
    total = sum(m.astype(int) for m in masks.values())
    assert np.all(total == 1)


def test_default_config_generates_valid_dataset():
    cfg = GenConfig()
    manifest, images = dm.generate(cfg)
    assert len(manifest.items) == 2000 and images.shape == (2000, 32, 32, 3)
    dm.validate(manifest)
    assert sum(len(v) for v in manifest.splits.values()) == 2000
    labels = manifest.labels()
    assert labels.shape == (2000, 4)
    for c in range(4):
        assert set(np.unique(labels[:, c])) == {0, 1, 2}


def test_generation_threads_match_serial():
    cfg = GenConfig(n_items=40)
    m1, i1 = dm.generate(cfg, threads=1)
    m2, i2 = dm.generate(cfg, threads=3)
    assert i1.tobytes() == i2.tobytes() and m1 == m2


def test_too_many_classes_is_error():
    with pytest.raises(DatasetError, match="at most"):
        dm.make_attributes([("hue", "hue_band", 9)], 32)
    with pytest.raises(DatasetError, match="at most"):
        dm.make_attributes([("border", "border_width", 3)], 16)
    with pytest.raises(DatasetError):
        dm.make_attributes([("a", "hue_band", 2), ("b", "hue_band", 2)], 32)
    with pytest.raises(DatasetError):
        dm.make_attributes([("a", "hue_band", 1)], 32)


def test_explicit_split_sizes():
    cfg = GenConfig(n_items=50, splits={"train": 30, "val": 10, "gallery": 6, "query": 4})
    manifest, _ = dm.generate(cfg)
    assert {s: len(v) for s, v in manifest.splits.items()} == {"train": 30, "val": 10, "gallery": 6, "query": 4}
    with pytest.raises(DatasetError):
        GenConfig(n_items=5, splits={"train": 6}).split_sizes()


def test_save_load_round_trip(tmp_path):
    manifest, images = dm.generate(GenConfig(n_items=20, seed=4))
    dm.save(manifest, images, tmp_path)
    m2, i2 = dm.load(tmp_path)
    assert m2 == manifest
    assert i2.tobytes() == images.tobytes()


def test_missing_image_names_item(tmp_path):
    manifest, images = dm.generate(GenConfig(n_items=5))
    dm.save(manifest, images, tmp_path)
    (tmp_path / "images" / "3.rgb").unlink()
    with pytest.raises(DatasetError, match="item 3"):
        dm.load(tmp_path)


FIXTURE = """{
 "format": "cca-dataset/1",
 "image_size": 16,
 "attributes": [
  {"id": 0, "name": "color", "num_classes": 2, "factor": "hue_band"},
  {"id": 1, "name": "glyph", "num_classes": 3, "factor": "shape_glyph"}
 ],
 "items": [
  {"id": 5, "labels": [1, 2], "seed": 11},
  {"id": 9, "labels": [0, 0], "seed": 12}
 ],
 "splits": {"train": [5], "query": [9]}
}
"""


def test_hand_written_manifest_fixture():
    m = dm.parse_manifest(FIXTURE)
    assert m.image_size == 16
    assert [(a.id, a.name, a.num_classes, a.factor) for a in m.attributes] == [
        (0, "color", 2, "hue_band"),
        (1, "glyph", 3, "shape_glyph"),
    ]
    assert m.item_ids == [5, 9]
    assert m.labels().tolist() == [[1, 2], [0, 0]]
    assert m.splits == {"train": [5], "val": [], "gallery": [], "query": [9]}


def test_malformed_manifest_reports_line_or_field():
    with pytest.raises(DatasetError, match="line 3"):
        dm.parse_manifest('{\n "format": "cca-dataset/1",\n "image_size": ,\n}')
    doc = json.loads(FIXTURE)
    del doc["items"][1]["seed"]
    with pytest.raises(DatasetError, match=r"items\[1\].*seed"):
        dm.parse_manifest(json.dumps(doc))
    doc = json.loads(FIXTURE)
    doc["splits"]["val"] = [5]
    with pytest.raises(DatasetError, match="both"):
        dm.parse_manifest(json.dumps(doc))


def test_image_decode_checks_size():
    blob = dm.encode_image(np.zeros((2, 2, 3), np.uint8))
    assert dm.decode_image(blob).shape == (2, 2, 3)
    with pytest.raises(DatasetError):
        dm.decode_image(blob[:-1])


def test_model_input_range():
    x = dm.to_model_input(np.array([[[[0, 255, 128]]]], np.uint8))
    assert x.shape == (1, 3, 1, 1)
    assert x.min() == -1.0 and x.max() == 1.0
