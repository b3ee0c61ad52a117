"""Annotation ingestion, format conversion, dataset statistics, synthetic data.

COCO JSON (images/annotations/categories subset) and Pascal VOC XML load into
one canonical in-memory index that stores corner boxes; the top-left [x,y,w,h]
COCO convention and the center-form convention are both handled at the
serialization boundary. The synthetic generator paints class-coded damage
primitives on noise backgrounds and emits tight boxes, deterministically per
seed. Images use uncompressed PPM to stay codec-free.
"""

from __future__ import annotations

import json
import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .geometry import BoxCenter, center_to_corner, size_bucket

SHAPE_KINDS = ("transverse", "longitudinal", "alligator", "block", "pothole")


@dataclass
class ImageInfo:
    id: int
    file_name: str
    width: int
    height: int


@dataclass
class Annotation:
    id: int
    image_id: int
    category_id: int
    box: tuple[float, float, float, float]


@dataclass
class Category:
    id: int
    name: str


@dataclass
class DatasetIndex:
    images: list[ImageInfo]
    annotations: list[Annotation]
    categories: list[Category]
    clamp_warnings: int = 0

    def image_by_id(self, image_id):
        return {im.id: im for im in self.images}[image_id]

    def annotations_of(self, image_id):
        return [a for a in self.annotations if a.image_id == image_id]

    def category_names(self):
        return {c.id: c.name for c in self.categories}


def _require(record, key, path):
    if key not in record:
        raise DataError(f"missing field '{path}.{key}'")
    return record[key]


def _check_unique(ids, table):
    seen = set()
    for i in ids:
        if i in seen:
            raise DataError(f"duplicate id {i} in {table}")
        seen.add(i)


def load_coco(path, center_boxes=False) -> DatasetIndex:
    """Parse the COCO schema subset; bbox is top-left [x,y,w,h] unless
    ``center_boxes`` flags the center-form annotation convention."""
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not valid JSON ({exc})") from exc
    for key in ("images", "annotations", "categories"):
        if key not in raw:
            raise DataError(f"{path}: missing top-level key '{key}'")

    images = [ImageInfo(id=_require(r, "id", f"images[{i}]"),
                        file_name=_require(r, "file_name", f"images[{i}]"),
                        width=_require(r, "width", f"images[{i}]"),
                        height=_require(r, "height", f"images[{i}]"))
              for i, r in enumerate(raw["images"])]
    categories = [Category(id=_require(r, "id", f"categories[{i}]"),
                           name=_require(r, "name", f"categories[{i}]"))
                  for i, r in enumerate(raw["categories"])]
    _check_unique([im.id for im in images], "images")
    _check_unique([c.id for c in categories], "categories")
    image_ids = {im.id: im for im in images}
    category_ids = {c.id for c in categories}

    annotations = []
    clamped = 0
    for i, r in enumerate(raw["annotations"]):
        ann_id = _require(r, "id", f"annotations[{i}]")
        image_id = _require(r, "image_id", f"annotations[{i}]")
        category_id = _require(r, "category_id", f"annotations[{i}]")
        bbox = _require(r, "bbox", f"annotations[{i}]")
        if image_id not in image_ids:
            raise DataError(f"annotation {ann_id} references unknown image id {image_id}")
        if category_id not in category_ids:
            raise DataError(f"annotation {ann_id} references unknown category id {category_id}")
        if len(bbox) != 4:
            raise DataError(f"annotations[{i}].bbox must have 4 entries")
        x, y, w, h = (float(v) for v in bbox)
        if w < 0 or h < 0:
            raise DataError(f"annotation {ann_id} has negative box size")
        if center_boxes:
            c = center_to_corner(BoxCenter(x, y, w, h))
            x1, y1, x2, y2 = c.x1, c.y1, c.x2, c.y2
        else:
            x1, y1, x2, y2 = x, y, x + w, y + h
        im = image_ids[image_id]
        cx1 = min(max(x1, 0.0), float(im.width))
        cy1 = min(max(y1, 0.0), float(im.height))
        cx2 = min(max(x2, 0.0), float(im.width))
        cy2 = min(max(y2, 0.0), float(im.height))
        if (cx1, cy1, cx2, cy2) != (x1, y1, x2, y2):
            clamped += 1
        annotations.append(Annotation(id=ann_id, image_id=image_id,
                                      category_id=category_id, box=(cx1, cy1, cx2, cy2)))
    _check_unique([a.id for a in annotations], "annotations")
    return DatasetIndex(images=images, annotations=annotations,
                        categories=categories, clamp_warnings=clamped)


def _num(v):
    """Serialize integral coordinates as ints so round trips stay lossless."""
    f = float(v)
    return int(f) if f.is_integer() else f


def coco_dict(index: DatasetIndex, center_boxes=False) -> dict:
    anns = []
    for a in index.annotations:
        x1, y1, x2, y2 = a.box
        if center_boxes:
            bbox = [(x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1]
        else:
            bbox = [x1, y1, x2 - x1, y2 - y1]
        anns.append({"id": a.id, "image_id": a.image_id, "category_id": a.category_id,
                     "bbox": [_num(v) for v in bbox],
                     "area": _num((x2 - x1) * (y2 - y1))})
    return {
        "images": [{"id": im.id, "file_name": im.file_name,
                    "width": im.width, "height": im.height} for im in index.images],
        "annotations": anns,
        "categories": [{"id": c.id, "name": c.name} for c in index.categories],
    }


def save_coco(index: DatasetIndex, path, center_boxes=False):
    with open(path, "w") as fh:
        json.dump(coco_dict(index, center_boxes=center_boxes), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_voc(dirpath) -> DatasetIndex:
    """Parse a directory of VOC XML files; category ids follow sorted names."""
    files = sorted(f for f in os.listdir(dirpath) if f.endswith(".xml"))
    if not files:
        raise DataError(f"{dirpath}: no .xml files found")
    parsed = []
    names = set()
    for fname in files:
        fpath = os.path.join(dirpath, fname)
        try:
            root = ET.parse(fpath).getroot()
        except ET.ParseError as exc:
            raise DataError(f"{fpath}: XML parse error ({exc})") from exc
        filename = root.findtext("filename") or fname.replace(".xml", ".jpg")
        size = root.find("size")
        if size is None:
            raise DataError(f"{fpath}: missing <size>")
        width = int(float(size.findtext("width")))
        height = int(float(size.findtext("height")))
        objects = []
        for obj in root.findall("object"):
            name = obj.findtext("name")
            if name is None:
                raise DataError(f"{fpath}: <object> without <name>")
            bnd = obj.find("bndbox")
            if bnd is None:
                raise DataError(f"{fpath}: <object> without <bndbox>")
            coords = {k: float(bnd.findtext(k)) for k in ("xmin", "ymin", "xmax", "ymax")}
            if coords["xmax"] < coords["xmin"] or coords["ymax"] < coords["ymin"]:
                raise DataError(f"{fpath}: inverted bndbox")
            objects.append((name, coords))
            names.add(name)
        parsed.append((filename, width, height, objects))

    category_ids = {name: i + 1 for i, name in enumerate(sorted(names))}
    images, annotations = [], []
    ann_id = 1
    for image_id, (filename, width, height, objects) in enumerate(parsed, start=1):
        images.append(ImageInfo(id=image_id, file_name=filename, width=width, height=height))
        for name, c in objects:
            annotations.append(Annotation(id=ann_id, image_id=image_id,
                                          category_id=category_ids[name],
                                          box=(c["xmin"], c["ymin"], c["xmax"], c["ymax"])))
            ann_id += 1
    categories = [Category(id=i, name=n) for n, i in sorted(category_ids.items(), key=lambda kv: kv[1])]
    return DatasetIndex(images=images, annotations=annotations, categories=categories)


def save_voc(index: DatasetIndex, dirpath):
    """One XML per image; numbers serialized losslessly for integral coords."""
    os.makedirs(dirpath, exist_ok=True)
    names = index.category_names()
    by_image = {}
    for a in index.annotations:
        by_image.setdefault(a.image_id, []).append(a)
    for im in index.images:
        root = ET.Element("annotation")
        ET.SubElement(root, "filename").text = im.file_name
        size = ET.SubElement(root, "size")
        ET.SubElement(size, "width").text = str(im.width)
        ET.SubElement(size, "height").text = str(im.height)
        ET.SubElement(size, "depth").text = "3"
        for a in by_image.get(im.id, ()):
            obj = ET.SubElement(root, "object")
            ET.SubElement(obj, "name").text = names[a.category_id]
            bnd = ET.SubElement(obj, "bndbox")
            for tag, value in zip(("xmin", "ymin", "xmax", "ymax"), a.box):
                ET.SubElement(bnd, tag).text = str(_num(value))
        tree = ET.ElementTree(root)
        ET.indent(tree)
        stem = os.path.splitext(im.file_name)[0]
        tree.write(os.path.join(dirpath, f"{stem}.xml"))


def convert_voc_to_coco(src_dir, dst_json):
    index = load_voc(src_dir)
    save_coco(index, dst_json)
    return index


def convert_coco_to_voc(src_json, dst_dir, center_boxes=False):
    index = load_coco(src_json, center_boxes=center_boxes)
    save_voc(index, dst_dir)
    return index


# -- statistics -------------------------------------------------------------


def stats(index: DatasetIndex) -> dict:
    """Per-category histogram over size buckets; row sums equal class counts."""
    table = {c.id: {"small": 0, "medium": 0, "large": 0} for c in index.categories}
    for a in index.annotations:
        x1, y1, x2, y2 = a.box
        table[a.category_id][size_bucket((x2 - x1) * (y2 - y1)).value] += 1
    return table


def stats_table(index: DatasetIndex) -> str:
    names = index.category_names()
    histogram = stats(index)
    lines = ["class".ljust(16) + "small".rjust(8) + "medium".rjust(8)
             + "large".rjust(8) + "total".rjust(8)]
    for cat_id in sorted(histogram):
        row = histogram[cat_id]
        total = sum(row.values())
        lines.append(names[cat_id].ljust(16) + f"{row['small']:8d}{row['medium']:8d}"
                     f"{row['large']:8d}{total:8d}")
    return "\n".join(lines)


# -- PPM images --------------------------------------------------------------


def write_ppm(path, image: np.ndarray):
    """Binary P6 writer for (H,W,3) uint8 arrays."""
    h, w, c = image.shape
    if c != 3 or image.dtype != np.uint8:
        raise DataError("write_ppm expects (H,W,3) uint8")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(image.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic not in (b"P6", b"P5"):
            raise DataError(f"{path}: unsupported image format {magic!r}")
        fields = []
        while len(fields) < 3:
            line = fh.readline()
            if not line:
                raise DataError(f"{path}: truncated header")
            if line.startswith(b"#"):
                continue
            fields.extend(line.split())
        w, h, maxval = (int(v) for v in fields[:3])
        channels = 3 if magic == b"P6" else 1
        data = np.frombuffer(fh.read(w * h * channels), dtype=np.uint8)
        if data.size != w * h * channels:
            raise DataError(f"{path}: truncated pixel data")
    image = data.reshape(h, w, channels)
    return image if channels == 3 else np.repeat(image, 3, axis=2)


# -- synthetic dataset --------------------------------------------------------


@dataclass
class SyntheticConfig:
    num_images: int = 200
    image_size: int = 64
    num_classes: int = 5
    min_shapes: int = 1
    max_shapes: int = 3
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(SHAPE_KINDS):
            raise DataError(f"num_classes must be in 1..{len(SHAPE_KINDS)}")
        if self.min_shapes < 0 or self.max_shapes < self.min_shapes:
            raise DataError("invalid shapes_per_image range")


# Per-class paint: distinct hue so the class signal survives desk-scale training.
_CLASS_COLORS = {
    "transverse": (205, 65, 60),
    "longitudinal": (60, 185, 70),
    "alligator": (70, 80, 210),
    "block": (200, 180, 40),
    "pothole": (15, 15, 20),
}


def _sample_box(kind, rng, size):
    """Sampled extent for one primitive; None when it cannot fit. The thin
    dimension stays >= 9 px so every box contains at least one stride-8 cell
    center."""
    thin = lambda: int(rng.integers(9, 13))
    broad = lambda: int(rng.integers(max(14, size // 4), max(16, size // 2)))
    if kind == "transverse":
        w, h = int(rng.integers(size // 3, 3 * size // 4)), thin()
    elif kind == "longitudinal":
        w, h = thin(), int(rng.integers(size // 3, 3 * size // 4))
    elif kind == "pothole":
        w = broad()
        h = w
    else:
        w, h = broad(), broad()
    if w >= size - 2 or h >= size - 2:
        return None
    x1 = int(rng.integers(1, size - w - 1))
    y1 = int(rng.integers(1, size - h - 1))
    return (x1, y1, x1 + w, y1 + h)


def _paint(canvas, kind, box):
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    color = np.array(_CLASS_COLORS[kind], dtype=np.float64)
    region = canvas[y1:y2, x1:x2]
    if kind == "pothole":
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        mask = ((yy - cy) / (h / 2.0)) ** 2 + ((xx - cx) / (w / 2.0)) ** 2 <= 1.0
        region[mask] = 0.15 * region[mask] + 0.85 * color
        return
    region[...] = 0.15 * region + 0.85 * color
    if kind == "alligator":
        yy, xx = np.mgrid[0:h, 0:w]
        lines = ((yy % 4) == 0) | ((xx % 4) == 0)
        region[lines] *= 0.45


def gen_synthetic(cfg: SyntheticConfig):
    """Deterministic (images, DatasetIndex) pair; same seed, same bytes."""
    from .geometry import iou

    rng = np.random.default_rng(cfg.seed)
    size = cfg.image_size
    kinds = SHAPE_KINDS[:cfg.num_classes]
    categories = [Category(id=i + 1, name=k) for i, k in enumerate(kinds)]
    images, infos, annotations = [], [], []
    ann_id = 1
    skipped = 0
    for image_id in range(1, cfg.num_images + 1):
        base = rng.uniform(110.0, 145.0)
        canvas = np.clip(base + rng.normal(0.0, 7.0, size=(size, size, 3)), 0, 255)
        n_shapes = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
        boxes = []
        for _ in range(n_shapes):
            kind_idx = int(rng.integers(0, len(kinds)))
            kind = kinds[kind_idx]
            placed = None
            for _attempt in range(20):
                box = _sample_box(kind, rng, size)
                if box is None:
                    continue
                if all(iou(box, b) <= 0.25 for _, b in boxes):
                    placed = box
                    break
            if placed is None:
                skipped += 1
                continue
            _paint(canvas, kind, placed)
            boxes.append((kind_idx + 1, placed))
        canvas = np.clip(canvas + rng.normal(0.0, 3.0, size=canvas.shape), 0, 255)
        images.append(canvas.astype(np.uint8))
        infos.append(ImageInfo(id=image_id, file_name=f"img_{image_id:05d}.ppm",
                               width=size, height=size))
        for category_id, box in boxes:
            annotations.append(Annotation(id=ann_id, image_id=image_id,
                                          category_id=category_id,
                                          box=tuple(float(v) for v in box)))
            ann_id += 1
    index = DatasetIndex(images=infos, annotations=annotations, categories=categories,
                         clamp_warnings=skipped)
    return images, index


def save_synthetic(images, index: DatasetIndex, out_dir):
    """Write the {images/, annotations.json} layout."""
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    for image, info in zip(images, index.images):
        write_ppm(os.path.join(img_dir, info.file_name), image)
    save_coco(index, os.path.join(out_dir, "annotations.json"))


def load_image_batch(index: DatasetIndex, root, image_ids) -> np.ndarray:
    """Read PPM images into a normalized (B,3,H,W) float batch."""
    imgs = []
    by_id = {im.id: im for im in index.images}
    for image_id in image_ids:
        path = os.path.join(root, "images", by_id[image_id].file_name)
        arr = read_ppm(path).astype(np.float64) / 255.0 - 0.5
        imgs.append(arr.transpose(2, 0, 1))
    return np.stack(imgs)


def normalize_images(images) -> np.ndarray:
    """uint8 (B?,H,W,3) arrays -> normalized (B,3,H,W) float batch."""
    arr = np.stack([im for im in images]).astype(np.float64) / 255.0 - 0.5
    return arr.transpose(0, 3, 1, 2)


def detections_to_coco(detections) -> list[dict]:
    """COCO results rows: image_id, category_id, [x,y,w,h] bbox, score."""
    rows = []
    for d in detections:
        x1, y1, x2, y2 = d.box
        rows.append({"image_id": d.image_id, "category_id": d.category_id,
                     "bbox": [x1, y1, x2 - x1, y2 - y1], "score": d.score})
    return rows


def detections_from_coco(rows) -> list:
    from .model import Detection

    out = []
    for i, r in enumerate(rows):
        for key in ("image_id", "category_id", "bbox", "score"):
            if key not in r:
                raise DataError(f"results[{i}]: missing field '{key}'")
        x, y, w, h = (float(v) for v in r["bbox"])
        out.append(Detection(image_id=r["image_id"], category_id=r["category_id"],
                             score=float(r["score"]), box=(x, y, x + w, y + h)))
    return out
