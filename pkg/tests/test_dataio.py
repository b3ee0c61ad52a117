import json
import os

import numpy as np
import pytest

from crackdet.dataio import (Annotation, Category, DatasetIndex, ImageInfo, SyntheticConfig,
                             coco_dict, convert_coco_to_voc, convert_voc_to_coco,
                             detections_from_coco, detections_to_coco, gen_synthetic,
                             load_coco, load_voc, read_ppm, save_coco, save_synthetic,
                             save_voc, stats, write_ppm)
from crackdet.errors import DataError
from crackdet.model import Detection


def fixture_index(num_images=50, seed=7):
    """Integer-box dataset used by the round-trip criterion."""
    r = np.random.default_rng(seed)
    images = [ImageInfo(id=i, file_name=f"im_{i:03d}.jpg", width=320, height=240)
              for i in range(1, num_images + 1)]
    categories = [Category(id=1, name="block"), Category(id=2, name="pothole")]
    anns = []
    ann_id = 1
    for im in images:
        for _ in range(int(r.integers(1, 4))):
            x1 = int(r.integers(0, 280))
            y1 = int(r.integers(0, 200))
            w = int(r.integers(5, 320 - x1))
            h = int(r.integers(5, 240 - y1))
            anns.append(Annotation(id=ann_id, image_id=im.id,
                                   category_id=int(r.integers(1, 3)),
                                   box=(float(x1), float(y1), float(x1 + w), float(y1 + h))))
            ann_id += 1
    return DatasetIndex(images=images, annotations=anns, categories=categories)


class TestCocoLoad:
    def test_bbox_topleft_convention(self, tmp_path):
        path = tmp_path / "d.json"
        path.write_text(json.dumps({
            "images": [{"id": 1, "file_name": "a.jpg", "width": 100, "height": 100}],
            "annotations": [{"id": 1, "image_id": 1, "category_id": 1,
                             "bbox": [10, 20, 30, 40]}],
            "categories": [{"id": 1, "name": "crack"}],
        }))
        index = load_coco(path)
        assert index.annotations[0].box == (10.0, 20.0, 40.0, 60.0)

    def test_center_boxes_flag(self, tmp_path):
        path = tmp_path / "d.json"
        path.write_text(json.dumps({
            "images": [{"id": 1, "file_name": "a.jpg", "width": 100, "height": 100}],
            "annotations": [{"id": 1, "image_id": 1, "category_id": 1,
                             "bbox": [50, 50, 20, 10]}],
            "categories": [{"id": 1, "name": "crack"}],
        }))
        index = load_coco(path, center_boxes=True)
        assert index.annotations[0].box == (40.0, 45.0, 60.0, 55.0)

    def test_empty_annotations_valid(self, tmp_path):
        path = tmp_path / "d.json"
        path.write_text(json.dumps({"images": [], "annotations": [], "categories": []}))
        index = load_coco(path)
        assert index.annotations == [] and index.images == []

    def test_dangling_image_reference_named(self, tmp_path):
        path = tmp_path / "d.json"
        path.write_text(json.dumps({
            "images": [{"id": 1, "file_name": "a.jpg", "width": 10, "height": 10}],
            "annotations": [{"id": 5, "image_id": 999, "category_id": 1,
                             "bbox": [0, 0, 5, 5]}],
            "categories": [{"id": 1, "name": "crack"}],
        }))
        with pytest.raises(DataError, match="999"):
            load_coco(path)

    def test_missing_field_named(self, tmp_path):
        path = tmp_path / "d.json"
        path.write_text(json.dumps({
            "images": [{"id": 1, "file_name": "a.jpg", "width": 10}],
            "annotations": [], "categories": [],
        }))
        with pytest.raises(DataError, match=r"images\[0\].height"):
            load_coco(path)

    def test_out_of_bounds_clamped_with_warning(self, tmp_path):
        path = tmp_path / "d.json"
        path.write_text(json.dumps({
            "images": [{"id": 1, "file_name": "a.jpg", "width": 50, "height": 50}],
            "annotations": [{"id": 1, "image_id": 1, "category_id": 1,
                             "bbox": [40, 40, 30, 30]}],
            "categories": [{"id": 1, "name": "crack"}],
        }))
        index = load_coco(path)
        assert index.clamp_warnings == 1
        assert index.annotations[0].box == (40.0, 40.0, 50.0, 50.0)

    def test_duplicate_ids_rejected(self, tmp_path):
        path = tmp_path / "d.json"
        path.write_text(json.dumps({
            "images": [{"id": 1, "file_name": "a.jpg", "width": 10, "height": 10},
                       {"id": 1, "file_name": "b.jpg", "width": 10, "height": 10}],
            "annotations": [], "categories": [],
        }))
        with pytest.raises(DataError, match="duplicate"):
            load_coco(path)


class TestVocLoad:
    VOC_XML = """<annotation>
  <filename>{name}</filename>
  <size><width>64</width><height>48</height><depth>3</depth></size>
  {objects}
</annotation>"""
    OBJ = """<object><name>{name}</name>
    <bndbox><xmin>{x1}</xmin><ymin>{y1}</ymin><xmax>{x2}</xmax><ymax>{y2}</ymax></bndbox>
  </object>"""

    def test_boxes_direct_and_names_sorted(self, tmp_path):
        objs = (self.OBJ.format(name="pothole", x1=1, y1=2, x2=11, y2=22)
                + self.OBJ.format(name="block", x1=5, y1=5, x2=20, y2=20))
        (tmp_path / "a.xml").write_text(self.VOC_XML.format(name="a.jpg", objects=objs))
        index = load_voc(tmp_path)
        assert index.annotations[0].box == (1.0, 2.0, 11.0, 22.0)
        assert index.category_names() == {1: "block", 2: "pothole"}
        assert index.annotations[0].category_id == 2

    def test_inverted_box_names_file(self, tmp_path):
        objs = self.OBJ.format(name="crack", x1=30, y1=2, x2=11, y2=22)
        (tmp_path / "bad.xml").write_text(self.VOC_XML.format(name="b.jpg", objects=objs))
        with pytest.raises(DataError, match="bad.xml"):
            load_voc(tmp_path)

    def test_malformed_xml_names_file(self, tmp_path):
        (tmp_path / "oops.xml").write_text("<annotation><unclosed>")
        with pytest.raises(DataError, match="oops.xml"):
            load_voc(tmp_path)


class TestRoundTrips:
    def test_coco_save_load_identity_on_fixture(self, tmp_path):
        index = fixture_index()
        path = tmp_path / "ds.json"
        save_coco(index, path)
        back = load_coco(path)
        assert [a.box for a in back.annotations] == [a.box for a in index.annotations]
        assert [a.id for a in back.annotations] == [a.id for a in index.annotations]
        assert [(im.id, im.file_name, im.width, im.height) for im in back.images] \
            == [(im.id, im.file_name, im.width, im.height) for im in index.images]

    def test_voc_coco_voc_preserves_integer_boxes(self, tmp_path):
        index = fixture_index()
        voc1 = tmp_path / "voc1"
        save_voc(index, voc1)
        coco_path = tmp_path / "ds.json"
        convert_voc_to_coco(voc1, coco_path)
        voc2 = tmp_path / "voc2"
        convert_coco_to_voc(coco_path, voc2)
        a = load_voc(voc1)
        b = load_voc(voc2)
        assert [ann.box for ann in a.annotations] == [ann.box for ann in b.annotations]
        assert [ann.category_id for ann in a.annotations] \
            == [ann.category_id for ann in b.annotations]

    def test_coco_serialization_is_integer_for_integer_boxes(self, tmp_path):
        index = fixture_index(num_images=2)
        blob = coco_dict(index)
        for ann in blob["annotations"]:
            assert all(isinstance(v, int) for v in ann["bbox"])

    def test_center_box_serialization_round_trip(self, tmp_path):
        index = fixture_index(num_images=3)
        path = tmp_path / "center.json"
        save_coco(index, path, center_boxes=True)
        back = load_coco(path, center_boxes=True)
        for a, b in zip(index.annotations, back.annotations):
            assert np.allclose(a.box, b.box)


class TestStats:
    def test_empty_index_all_zeros(self):
        index = DatasetIndex(images=[], annotations=[],
                             categories=[Category(id=1, name="crack")])
        assert stats(index) == {1: {"small": 0, "medium": 0, "large": 0}}

    def test_single_small_box(self):
        index = make_single_box_index(30.0, 30.0)
        assert stats(index)[1] == {"small": 1, "medium": 0, "large": 0}

    def test_conservation(self):
        _, index = gen_synthetic(SyntheticConfig(num_images=20, seed=3))
        table = stats(index)
        per_class = {c.id: 0 for c in index.categories}
        for ann in index.annotations:
            per_class[ann.category_id] += 1
        for cat_id, row in table.items():
            assert sum(row.values()) == per_class[cat_id]


def make_single_box_index(w, h):
    return DatasetIndex(
        images=[ImageInfo(id=1, file_name="a.ppm", width=100, height=100)],
        annotations=[Annotation(id=1, image_id=1, category_id=1, box=(0.0, 0.0, w, h))],
        categories=[Category(id=1, name="crack")])


class TestSynthetic:
    def test_same_seed_identical_bytes(self, tmp_path):
        cfg = SyntheticConfig(num_images=6, seed=7)
        for run in ("a", "b"):
            images, index = gen_synthetic(cfg)
            save_synthetic(images, index, tmp_path / run)
        ann_a = (tmp_path / "a" / "annotations.json").read_bytes()
        ann_b = (tmp_path / "b" / "annotations.json").read_bytes()
        assert ann_a == ann_b
        for name in os.listdir(tmp_path / "a" / "images"):
            pa = (tmp_path / "a" / "images" / name).read_bytes()
            pb = (tmp_path / "b" / "images" / name).read_bytes()
            assert pa == pb

    def test_zero_images_empty_dataset(self):
        images, index = gen_synthetic(SyntheticConfig(num_images=0))
        assert images == [] and index.annotations == []

    def test_every_box_within_bounds(self):
        images, index = gen_synthetic(SyntheticConfig(num_images=30, seed=1))
        for ann in index.annotations:
            x1, y1, x2, y2 = ann.box
            assert 0 <= x1 < x2 <= 64 and 0 <= y1 < y2 <= 64

    def test_class_count_respected(self):
        _, index = gen_synthetic(SyntheticConfig(num_images=15, num_classes=3, seed=2))
        assert len(index.categories) == 3
        assert {a.category_id for a in index.annotations} <= {1, 2, 3}

    def test_invalid_config_rejected(self):
        with pytest.raises(DataError):
            SyntheticConfig(num_classes=9)
        with pytest.raises(DataError):
            SyntheticConfig(min_shapes=3, max_shapes=1)

    def test_ppm_round_trip(self, tmp_path):
        r = np.random.default_rng(0)
        img = r.integers(0, 256, size=(20, 30, 3), dtype=np.uint8)
        path = tmp_path / "x.ppm"
        write_ppm(path, img)
        assert np.array_equal(read_ppm(path), img)


class TestDetectionSerialization:
    def test_round_trip(self):
        dets = [Detection(image_id=1, category_id=2, score=0.75, box=(1.0, 2.0, 11.0, 22.0))]
        rows = detections_to_coco(dets)
        assert rows[0]["bbox"] == [1.0, 2.0, 10.0, 20.0]
        back = detections_from_coco(rows)
        assert back == dets

    def test_missing_field_named(self):
        with pytest.raises(DataError, match="score"):
            detections_from_coco([{"image_id": 1, "category_id": 1, "bbox": [0, 0, 1, 1]}])
