"""COCO-style detection evaluation with error-type decomposition.

AP averages 101-point-interpolated precision over ten IoU thresholds
(0.50:0.05:0.95); results stratify by class and by ground-truth size bucket,
with -1.0 marking any (class, bucket) stratum that holds no ground truths.
The error decomposition produces the seven progressively forgiving PR curves
(C75, C50, Loc, Sim, Oth, BG, FN) used to apportion detection failures.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import CrackdetError
from .geometry import MEDIUM_MAX_AREA, SMALL_MAX_AREA, iou_matrix

SENTINEL = -1.0

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_GRID = np.linspace(0.0, 1.0, 101)

AREA_RANGES = {
    "all": (0.0, np.inf),
    "small": (0.0, SMALL_MAX_AREA),
    "medium": (SMALL_MAX_AREA, MEDIUM_MAX_AREA),
    "large": (MEDIUM_MAX_AREA, np.inf),
}

ERROR_STAGES = ("C75", "C50", "Loc", "Sim", "Oth", "BG", "FN")


@dataclass
class EvalConfig:
    iou_thresholds: tuple = IOU_THRESHOLDS
    recall_points: int = 101
    max_dets: int = 100
    workers: int = 1

    def __post_init__(self):
        if list(self.iou_thresholds) != sorted(self.iou_thresholds):
            raise CrackdetError("iou thresholds must be sorted ascending")
        if self.recall_points < 2:
            raise CrackdetError("recall grid needs at least two points")

    def recall_grid(self):
        return np.linspace(0.0, 1.0, self.recall_points)


METRIC_KEYS = ("ap", "ap50", "ap75", "ap_small", "ap_medium", "ap_large",
               "ar", "ar_small", "ar_medium", "ar_large")


@dataclass
class EvalReport:
    per_class: dict
    aggregate: dict

    def to_dict(self):
        return {"per_class": self.per_class, "aggregate": self.aggregate}

    def to_table(self) -> str:
        rows = [(info["name"], info) for info in self.per_class.values()]
        rows.append(("ALL", self.aggregate))
        label_w = max(12, max(len(label) for label, _ in rows) + 2)
        header = ["class"] + list(METRIC_KEYS)
        widths = [label_w] + [max(10, len(n) + 2) for n in METRIC_KEYS]
        lines = ["".join(n.ljust(w) for n, w in zip(header, widths))]
        for label, info in rows:
            cells = [label] + [f"{info[k]:.3f}" for k in METRIC_KEYS]
            lines.append("".join(c.ljust(w) for c, w in zip(cells, widths)))
        return "\n".join(lines)


@dataclass
class ErrorBreakdown:
    """Aggregate and per-class APs plus 101-point precision curves per stage."""

    aps: dict
    per_class_aps: dict
    curves: dict
    recall_grid: np.ndarray = field(default_factory=lambda: RECALL_GRID.copy())

    def to_dict(self):
        return {
            "aps": self.aps,
            "per_class_aps": self.per_class_aps,
            "curves": {k: list(v) for k, v in self.curves.items()},
            "recall_grid": list(self.recall_grid),
        }

    def to_csv(self) -> str:
        header = "recall," + ",".join(ERROR_STAGES)
        lines = [header]
        for i, r in enumerate(self.recall_grid):
            cells = [f"{r:.2f}"] + [f"{self.curves[s][i]:.6f}" for s in ERROR_STAGES]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def match_detections(det_boxes, det_scores, gt_boxes, iou_thr, gt_ignore=None):
    """Greedy per-image, per-class matching.

    Detections must arrive sorted by descending score. Each detection takes
    the unmatched ground truth of highest IoU >= iou_thr, preferring
    non-ignored ground truths; a detection whose only match is ignored is
    itself ignored. Returns (tp flags, det_ignore flags, gt_matched flags).
    """
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n_det, n_gt = len(det_boxes), len(gt_boxes)
    gt_ignore = np.zeros(n_gt, dtype=bool) if gt_ignore is None else np.asarray(gt_ignore, dtype=bool)
    order = np.argsort(gt_ignore, kind="stable")
    ious = iou_matrix(det_boxes, gt_boxes) if n_det and n_gt else np.zeros((n_det, n_gt))

    tp = np.zeros(n_det, dtype=bool)
    det_ignore = np.zeros(n_det, dtype=bool)
    gt_matched = np.zeros(n_gt, dtype=bool)
    for d in range(n_det):
        best, m = iou_thr, -1
        for g in order:
            if gt_matched[g]:
                continue
            if m > -1 and not gt_ignore[m] and gt_ignore[g]:
                break
            if ious[d, g] < best:
                continue
            best, m = ious[d, g], g
        if m == -1:
            continue
        gt_matched[m] = True
        if gt_ignore[m]:
            det_ignore[d] = True
        else:
            tp[d] = True
    return tp, det_ignore, gt_matched


def compute_ap(tp, det_ignore, num_gt, recall_grid=RECALL_GRID):
    """101-point interpolated AP from score-ordered TP flags; -1.0 if no GTs."""
    if num_gt == 0:
        return SENTINEL
    tp = np.asarray(tp, dtype=bool)
    keep = ~np.asarray(det_ignore, dtype=bool)
    flags = tp[keep]
    if len(flags) == 0:
        return 0.0
    ctp = np.cumsum(flags)
    cfp = np.cumsum(~flags)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    return float(_interp_precision(recall, precision, recall_grid).mean())


def _interp_precision(recall, precision, grid):
    """Right-to-left precision envelope sampled at the recall grid."""
    prec = np.maximum.accumulate(np.asarray(precision, dtype=np.float64)[::-1])[::-1]
    idx = np.searchsorted(recall, grid, side="left")
    out = np.zeros_like(grid)
    valid = idx < len(prec)
    out[valid] = prec[idx[valid]]
    return out


@dataclass
class _Group:
    """One (image, category) matching unit."""

    det_scores: np.ndarray
    det_order: np.ndarray
    det_boxes: np.ndarray
    gt_areas: np.ndarray
    results: dict = field(default_factory=dict)


def _collect_groups(index, detections, cfg):
    cat_ids = [c.id for c in index.categories]
    cat_set = set(cat_ids)
    image_set = {im.id for im in index.images}
    for i, det in enumerate(detections):
        if det.category_id not in cat_set:
            raise CrackdetError(f"unknown category id {det.category_id} in detections")
        if det.image_id not in image_set:
            raise CrackdetError(f"unknown image id {det.image_id} in detections")

    gts = {}
    for ann in index.annotations:
        gts.setdefault((ann.image_id, ann.category_id), []).append(ann.box)
    dets = {}
    for i, det in enumerate(detections):
        dets.setdefault((det.image_id, det.category_id), []).append((det.score, i, det.box))

    groups = {}
    for key in sorted(set(gts) | set(dets), key=lambda k: (k[0], k[1])):
        rows = sorted(dets.get(key, ()), key=lambda r: (-r[0], r[1]))[:cfg.max_dets]
        gt_boxes = np.array(gts.get(key, ()), dtype=np.float64).reshape(-1, 4)
        areas = (gt_boxes[:, 2] - gt_boxes[:, 0]) * (gt_boxes[:, 3] - gt_boxes[:, 1])
        groups[key] = _Group(
            det_scores=np.array([r[0] for r in rows], dtype=np.float64),
            det_order=np.array([r[1] for r in rows], dtype=np.int64),
            det_boxes=np.array([r[2] for r in rows], dtype=np.float64).reshape(-1, 4),
            gt_areas=areas,
        ), gt_boxes
    return cat_ids, groups


def _match_group(args):
    """Match one (image, category) group at every (threshold, bucket) pair."""
    group, gt_boxes, thresholds, buckets = args
    results = {}
    for bucket in buckets:
        lo, hi = AREA_RANGES[bucket]
        ignore = (group.gt_areas < lo) | (group.gt_areas >= hi)
        for thr in thresholds:
            tp, det_ignore, _ = match_detections(group.det_boxes, group.det_scores,
                                                 gt_boxes, thr, ignore)
            results[(thr, bucket)] = (tp, det_ignore, int((~ignore).sum()))
    return results


def _pool(groups_for_cat, thr, bucket):
    """Concatenate one category's matches across images, score-ordered."""
    scores, orders, tps, igns, num_gt = [], [], [], [], 0
    for group, _ in groups_for_cat:
        tp, det_ignore, n = group.results[(thr, bucket)]
        scores.append(group.det_scores)
        orders.append(group.det_order)
        tps.append(tp)
        igns.append(det_ignore)
        num_gt += n
    if not scores:
        return np.zeros(0, dtype=bool), np.zeros(0, dtype=bool), num_gt
    scores = np.concatenate(scores)
    orders = np.concatenate(orders)
    rank = np.lexsort((orders, -scores))
    return np.concatenate(tps)[rank], np.concatenate(igns)[rank], num_gt


def _aggregate(values):
    live = [v for v in values if v != SENTINEL]
    return float(np.mean(live)) if live else SENTINEL


def evaluate(index, detections, cfg: EvalConfig | None = None) -> EvalReport:
    """Full per-class and aggregate AP/AR report for a dataset's detections."""
    cfg = cfg or EvalConfig()
    cat_ids, groups = _collect_groups(index, detections, cfg)
    thresholds = tuple(cfg.iou_thresholds)
    grid = cfg.recall_grid()
    buckets = tuple(AREA_RANGES)

    keys = sorted(groups)
    tasks = [(groups[k][0], groups[k][1], thresholds, buckets) for k in keys]
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            matched = list(pool.map(_match_group, tasks))
    else:
        matched = [_match_group(t) for t in tasks]
    for key, results in zip(keys, matched):
        groups[key][0].results = results

    names = {c.id: c.name for c in index.categories}
    per_class = {}
    for cat in cat_ids:
        cat_groups = [groups[k] for k in keys if k[1] == cat]
        aps = {}
        recalls = {}
        for bucket in buckets:
            ap_per_thr, rec_per_thr = [], []
            for thr in thresholds:
                tp, ign, num_gt = _pool(cat_groups, thr, bucket)
                ap_per_thr.append(compute_ap(tp, ign, num_gt, grid))
                if num_gt == 0:
                    rec_per_thr.append(SENTINEL)
                else:
                    rec_per_thr.append(float(tp.sum()) / num_gt)
            aps[bucket] = ap_per_thr
            recalls[bucket] = rec_per_thr

        def mean_ap(bucket):
            return _aggregate(aps[bucket]) if aps[bucket][0] != SENTINEL else SENTINEL

        def mean_ar(bucket):
            return _aggregate(recalls[bucket]) if recalls[bucket][0] != SENTINEL else SENTINEL

        per_class[cat] = {
            "name": names[cat],
            "ap": mean_ap("all"),
            "ap50": aps["all"][thresholds.index(0.5)] if 0.5 in thresholds else SENTINEL,
            "ap75": aps["all"][thresholds.index(0.75)] if 0.75 in thresholds else SENTINEL,
            "ap_small": mean_ap("small"),
            "ap_medium": mean_ap("medium"),
            "ap_large": mean_ap("large"),
            "ar": mean_ar("all"),
            "ar_small": mean_ar("small"),
            "ar_medium": mean_ar("medium"),
            "ar_large": mean_ar("large"),
        }

    aggregate = {k: _aggregate([per_class[c][k] for c in cat_ids]) for k in METRIC_KEYS}
    return EvalReport(per_class=per_class, aggregate=aggregate)


def _stage_eval(index, detections, cfg, thr, forgive_cross=None, drop_all_fp=False):
    """One error-analysis stage: AP + interpolated curve per class at one IoU.

    ``forgive_cross`` maps each detection index to True when, if unmatched,
    it should be ignored because it overlaps a same-supercategory GT of
    another class. ``drop_all_fp`` ignores every unmatched detection.
    """
    cat_ids, groups = _collect_groups(index, detections, cfg)
    keys = sorted(groups)
    grid = cfg.recall_grid()
    per_class_ap, per_class_curve = {}, {}
    for cat in cat_ids:
        scores, orders, tps, igns, num_gt = [], [], [], [], 0
        for key in keys:
            if key[1] != cat:
                continue
            group, gt_boxes = groups[key]
            tp, det_ignore, _ = match_detections(group.det_boxes, group.det_scores,
                                                 gt_boxes, thr)
            unmatched = ~tp & ~det_ignore
            if drop_all_fp:
                det_ignore = det_ignore | unmatched
            elif forgive_cross is not None:
                forgiven = np.array([forgive_cross.get(int(i), False) for i in group.det_order],
                                    dtype=bool)
                det_ignore = det_ignore | (unmatched & forgiven)
            scores.append(group.det_scores)
            orders.append(group.det_order)
            tps.append(tp)
            igns.append(det_ignore)
            num_gt += len(gt_boxes)
        if num_gt == 0:
            per_class_ap[cat] = SENTINEL
            per_class_curve[cat] = None
            continue
        if scores:
            s = np.concatenate(scores)
            o = np.concatenate(orders)
            rank = np.lexsort((o, -s))
            tp = np.concatenate(tps)[rank]
            ign = np.concatenate(igns)[rank]
        else:
            tp = np.zeros(0, dtype=bool)
            ign = np.zeros(0, dtype=bool)
        keep = ~ign
        flags = tp[keep]
        if len(flags) == 0:
            per_class_ap[cat] = 0.0
            per_class_curve[cat] = np.zeros_like(grid)
            continue
        ctp = np.cumsum(flags)
        cfp = np.cumsum(~flags)
        curve = _interp_precision(ctp / num_gt, ctp / (ctp + cfp), grid)
        per_class_ap[cat] = float(curve.mean())
        per_class_curve[cat] = curve
    return per_class_ap, per_class_curve


def _cross_class_overlaps(index, detections, iou_thr=0.1):
    """detection index -> True when it overlaps another class's GT >= iou_thr.

    All damage classes share one supercategory, so the Sim and Oth stages use
    the same forgiveness set.
    """
    gts_by_image = {}
    for ann in index.annotations:
        gts_by_image.setdefault(ann.image_id, []).append(ann)
    out = {}
    for i, det in enumerate(detections):
        hit = False
        for ann in gts_by_image.get(det.image_id, ()):
            if ann.category_id == det.category_id:
                continue
            if iou_matrix(np.array([det.box]), np.array([ann.box]))[0, 0] >= iou_thr:
                hit = True
                break
        out[i] = hit
    return out


def error_breakdown(index, detections, cfg: EvalConfig | None = None) -> ErrorBreakdown:
    """Seven progressive PR stages; APs are monotone and FN pins at 1.0."""
    cfg = cfg or EvalConfig()
    cross = _cross_class_overlaps(index, detections)
    cat_ids = [c.id for c in index.categories]
    gt_counts = {c: 0 for c in cat_ids}
    for ann in index.annotations:
        gt_counts[ann.category_id] += 1

    stage_results = {
        "C75": _stage_eval(index, detections, cfg, 0.75),
        "C50": _stage_eval(index, detections, cfg, 0.50),
        "Loc": _stage_eval(index, detections, cfg, 0.10),
        "Sim": _stage_eval(index, detections, cfg, 0.10, forgive_cross=cross),
        "Oth": _stage_eval(index, detections, cfg, 0.10, forgive_cross=cross),
        "BG": _stage_eval(index, detections, cfg, 0.10, drop_all_fp=True),
    }
    fn_aps = {c: (1.0 if gt_counts[c] else SENTINEL) for c in cat_ids}
    grid = cfg.recall_grid()
    fn_curves = {c: (np.ones_like(grid) if gt_counts[c] else None) for c in cat_ids}
    stage_results["FN"] = (fn_aps, fn_curves)

    aps, per_class_aps, curves = {}, {}, {}
    for stage in ERROR_STAGES:
        stage_aps, stage_curves = stage_results[stage]
        per_class_aps[stage] = {c: stage_aps[c] for c in cat_ids}
        live = [c for c in cat_ids if stage_aps[c] != SENTINEL]
        aps[stage] = float(np.mean([stage_aps[c] for c in live])) if live else SENTINEL
        if live:
            curves[stage] = np.mean([stage_curves[c] for c in live], axis=0)
        else:
            curves[stage] = np.zeros_like(grid)
    return ErrorBreakdown(aps=aps, per_class_aps=per_class_aps, curves=curves,
                          recall_grid=grid)
