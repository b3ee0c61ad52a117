"""Tiny detection model: stand-in backbone, anchor-free head, box decoding.

The backbone is a stack of stride-2 3x3 convs emitting features at strides
8/16/32. The head is a 1x1 conv tower shared across levels that predicts K
class logits and four nonnegative edge distances (in stride units, softplus
activated) per grid cell. Decoding turns distances at a cell center into a
corner box; class-wise greedy NMS prunes overlaps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ShapeError
from .geometry import iou_matrix
from .neck import ConvBNLayer, NeckConfig, NeckParams, PyramidFeatures, _conv_bn, init_neck, neck_forward
from .numerics import Tensor

STRIDES = (8, 16, 32)


@dataclass(frozen=True)
class AnchorPoint:
    """Cell center in pixels plus the stride and pyramid level that own it."""

    cx: float
    cy: float
    stride: int
    level: int


@dataclass
class RawPredictions:
    """Per level: class logits (B,K,H,W) and softplus distances (B,4,H,W)."""

    cls_logits: list[Tensor]
    distances: list[Tensor]


@dataclass(frozen=True)
class Detection:
    image_id: int
    category_id: int
    score: float
    box: tuple[float, float, float, float]

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if x2 < x1 or y2 < y1 or not np.isfinite(self.score):
            raise ShapeError(f"invalid detection {self}")


def anchor_points(image_size: int, strides=STRIDES) -> list[AnchorPoint]:
    """Every cell of every level exactly once: level 3 first, row-major."""
    points = []
    for level, stride in zip((3, 4, 5), strides):
        cells = image_size // stride
        for iy in range(cells):
            for ix in range(cells):
                points.append(AnchorPoint((ix + 0.5) * stride, (iy + 0.5) * stride, stride, level))
    return points


def points_arrays(points: list[AnchorPoint]):
    """(N,2) centers and (N,) strides as arrays."""
    xy = np.array([(p.cx, p.cy) for p in points], dtype=np.float64)
    strides = np.array([p.stride for p in points], dtype=np.float64)
    return xy, strides


@dataclass
class BackboneParams:
    stages: list[ConvBNLayer]

    def params(self, prefix="backbone"):
        for i, stage in enumerate(self.stages):
            yield from stage.params(f"{prefix}.stage{i}")

    def states(self, prefix="backbone"):
        for i, stage in enumerate(self.stages):
            yield from stage.states(f"{prefix}.stage{i}")


def init_backbone(widths, rng, dtype=np.float64, bn=None) -> BackboneParams:
    """Five stride-2 stages from RGB; the last three feed the neck."""
    chans = (3,) + tuple(widths)
    stages = [_conv_bn(rng, chans[i], chans[i + 1], dtype, stride2=True, bn=bn)
              for i in range(5)]
    return BackboneParams(stages)


def backbone_forward(image: Tensor, p: BackboneParams, training=True) -> PyramidFeatures:
    if image.shape[2] % 32 or image.shape[3] % 32:
        raise ShapeError(f"backbone: spatial size {image.shape[2:]} must be divisible by 32")
    feats = []
    x = image
    for stage in p.stages:
        x = stage(x, training)
        feats.append(x)
    return PyramidFeatures(feats[2], feats[3], feats[4])


@dataclass
class HeadParams:
    stem_cls: ConvBNLayer
    stem_reg: ConvBNLayer
    w_cls: Tensor
    b_cls: Tensor
    w_reg: Tensor
    b_reg: Tensor

    def params(self, prefix="head"):
        yield from self.stem_cls.params(f"{prefix}.stem_cls")
        yield from self.stem_reg.params(f"{prefix}.stem_reg")
        yield f"{prefix}.w_cls", self.w_cls
        yield f"{prefix}.b_cls", self.b_cls
        yield f"{prefix}.w_reg", self.w_reg
        yield f"{prefix}.b_reg", self.b_reg

    def states(self, prefix="head"):
        yield from self.stem_cls.states(f"{prefix}.stem_cls")
        yield from self.stem_reg.states(f"{prefix}.stem_reg")


def init_head(in_channels, hidden, num_classes, rng, dtype=np.float64,
              cls_bias_prior=-2.0, bn=None) -> HeadParams:
    bound = 1.0 / np.sqrt(hidden)
    return HeadParams(
        stem_cls=_conv_bn(rng, in_channels, hidden, dtype, bn=bn),
        stem_reg=_conv_bn(rng, in_channels, hidden, dtype, bn=bn),
        w_cls=Tensor(rng.uniform(-bound, bound, size=(num_classes, hidden)).astype(dtype),
                     requires_grad=True),
        b_cls=Tensor(np.full(num_classes, cls_bias_prior, dtype=dtype), requires_grad=True),
        w_reg=Tensor(rng.uniform(-bound, bound, size=(4, hidden)).astype(dtype),
                     requires_grad=True),
        b_reg=Tensor(np.zeros(4, dtype=dtype), requires_grad=True),
    )


def head_forward(pyramid: PyramidFeatures, p: HeadParams, training=True) -> RawPredictions:
    """Shared-across-levels branch towers; distances come out nonnegative."""
    cls_logits, distances = [], []
    for feat in pyramid.levels():
        cls_logits.append(nm.conv1x1(p.stem_cls(feat, training), p.w_cls, p.b_cls))
        distances.append(nm.softplus(nm.conv1x1(p.stem_reg(feat, training), p.w_reg, p.b_reg)))
    return RawPredictions(cls_logits, distances)


def flatten_levels(tensors: list[Tensor]) -> Tensor:
    """Per-level (B,C,H,W) maps -> (B, N, C) in anchor enumeration order."""
    rows = []
    for t in tensors:
        b, c, h, w = t.shape
        rows.append(nm.reshape(nm.transpose(t, (0, 2, 3, 1)), (b, h * w, c)))
    return nm.concat(rows, axis=1)


def decode_boxes(distances: np.ndarray, points_xy: np.ndarray, strides: np.ndarray) -> np.ndarray:
    """(N,4) stride-unit (l,t,r,b) distances at cell centers -> corner boxes."""
    off = distances * strides[:, None]
    return np.stack([points_xy[:, 0] - off[:, 0], points_xy[:, 1] - off[:, 1],
                     points_xy[:, 0] + off[:, 2], points_xy[:, 1] + off[:, 3]], axis=1)


def encode_box(box, point: AnchorPoint) -> tuple[float, float, float, float]:
    """Inverse of decoding for a point interior to the box (stride units)."""
    x1, y1, x2, y2 = box
    s = float(point.stride)
    return ((point.cx - x1) / s, (point.cy - y1) / s, (x2 - point.cx) / s, (y2 - point.cy) / s)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thr: float) -> list[int]:
    """Greedy NMS; returns kept indices in descending score order."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    keep = []
    suppressed = np.zeros(len(scores), dtype=bool)
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(int(i))
        later = order[pos + 1:]
        later = later[~suppressed[later]]
        if len(later):
            ious = iou_matrix(boxes[i:i + 1], boxes[later])[0]
            suppressed[later[ious > iou_thr]] = True
    return keep


def decode(cls_probs: np.ndarray, distances: np.ndarray, points: list[AnchorPoint],
           score_thr: float, nms_iou: float, image_id: int = 0) -> list[Detection]:
    """One image's (N,K) class probabilities + (N,4) distances -> detections."""
    points_xy, strides = points_arrays(points)
    if cls_probs.shape[0] != len(points) or distances.shape[0] != len(points):
        raise ShapeError("decode: predictions do not match the anchor grid")
    boxes = decode_boxes(distances, points_xy, strides)
    detections = []
    for k in range(cls_probs.shape[1]):
        scores = cls_probs[:, k]
        picked = np.where(scores > score_thr)[0]
        if not len(picked):
            continue
        kept = nms(boxes[picked], scores[picked], nms_iou)
        for j in kept:
            idx = picked[j]
            detections.append(Detection(image_id=image_id, category_id=k + 1,
                                        score=float(scores[idx]),
                                        box=tuple(float(v) for v in boxes[idx])))
    detections.sort(key=lambda d: (-d.score, d.category_id))
    return detections


@dataclass
class Detector:
    """Backbone + neck + head bundle with its anchor grid."""

    backbone: BackboneParams
    neck: NeckParams
    head: HeadParams
    num_classes: int
    image_size: int
    score_thr: float = 0.05
    nms_iou: float = 0.65
    dtype: type = np.float64

    def __post_init__(self):
        self.points = anchor_points(self.image_size)
        self.points_xy, self.strides = points_arrays(self.points)

    def input_batch(self, images: np.ndarray) -> Tensor:
        return Tensor(np.asarray(images, dtype=self.dtype))

    def params(self):
        yield from self.backbone.params()
        yield from self.neck.params()
        yield from self.head.params()

    def states(self):
        yield from self.backbone.states()
        yield from self.neck.states()
        yield from self.head.states()

    def state_dict(self) -> dict:
        out = {f"param:{name}": t.data for name, t in self.params()}
        out.update({f"state:{name}": arr for name, arr in self.states()})
        return out

    def load_state_dict(self, arrays: dict):
        from .errors import DataError

        for key, target in [(f"param:{n}", t.data) for n, t in self.params()] \
                + [(f"state:{n}", arr) for n, arr in self.states()]:
            if key not in arrays:
                raise DataError(f"checkpoint is missing '{key}' (model config mismatch?)")
            if arrays[key].shape != target.shape:
                raise DataError(f"checkpoint entry '{key}' has shape {arrays[key].shape}, "
                                f"model expects {target.shape}")
            target[...] = arrays[key]

    def forward(self, images: Tensor, training=True) -> RawPredictions:
        pyramid = neck_forward(backbone_forward(images, self.backbone, training),
                               self.neck, training)
        return head_forward(pyramid, self.head, training)

    def predict_arrays(self, images: np.ndarray):
        """(B,3,H,W) float input -> per-image (probs (N,K), distances (N,4))."""
        with nm.no_grad():
            preds = self.forward(self.input_batch(images), training=False)
            probs = nm.sigmoid(flatten_levels(preds.cls_logits)).data
            dists = flatten_levels(preds.distances).data
        return probs, dists

    def predict(self, images: np.ndarray, image_ids=None) -> list[Detection]:
        probs, dists = self.predict_arrays(images)
        image_ids = image_ids if image_ids is not None else range(len(images))
        out = []
        for b, image_id in enumerate(image_ids):
            out.extend(decode(probs[b], dists[b], self.points,
                              self.score_thr, self.nms_iou, image_id=image_id))
        return out


def build_detector(num_classes: int, image_size: int, backbone_widths,
                   neck_cfg_kwargs: dict, head_channels: int,
                   rng: np.random.Generator, dtype=np.float64,
                   score_thr=0.05, nms_iou=0.65, bn=None) -> Detector:
    if image_size % 32:
        raise ShapeError(f"image_size {image_size} must be divisible by 32")
    widths = tuple(backbone_widths)
    spatial = tuple((image_size // s, image_size // s) for s in STRIDES)
    neck_cfg = NeckConfig(in_channels=widths[2:], spatial=spatial, **neck_cfg_kwargs)
    backbone = init_backbone(widths, rng, dtype, bn=bn)
    neck = init_neck(neck_cfg, rng, dtype, bn=bn)
    head = init_head(neck_cfg.out_channels, head_channels, num_classes, rng, dtype, bn=bn)
    return Detector(backbone=backbone, neck=neck, head=head, num_classes=num_classes,
                    image_size=image_size, score_thr=score_thr, nms_iou=nms_iou,
                    dtype=dtype)
