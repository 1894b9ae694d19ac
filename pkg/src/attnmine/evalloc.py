"""Heatmap-to-box conversion and the ranked-pool localization metrics.

Boxes are axis-aligned, half-open, origin at the top-left, in pixel
units.  Per image up to three boxes come from thresholding the final
heatmap at decreasing intensity fractions; across images they are
arranged rank-major into a pool that is consumed in order until the
average-false-positive budget is exhausted.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .mining import flood_fill_component, normalize01

__all__ = [
    "BBox",
    "EvalConfig",
    "iou",
    "extract_bboxes",
    "build_pool",
    "evaluate",
    "write_predictions",
    "read_predictions",
    "write_ground_truth",
    "read_ground_truth",
    "write_report_csv",
]


@dataclass(frozen=True)
class BBox:
    image_id: str
    cls: int
    x: int
    y: int
    w: int
    h: int
    score: float = 0.0

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValueError(f"degenerate box {self.x, self.y, self.w, self.h}")

    def area(self):
        return self.w * self.h

    def same_extent(self, other):
        return (self.x, self.y, self.w, self.h) == (other.x, other.y, other.w, other.h)


@dataclass
class EvalConfig:
    iou_thresholds: list = field(
        default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]
    )
    bbox_thresholds: list = field(default_factory=lambda: [0.75, 0.5, 0.25])
    afp_upper_bound: float = 10.0

    def __post_init__(self):
        if list(self.bbox_thresholds) != sorted(self.bbox_thresholds, reverse=True):
            raise ValueError("bbox_thresholds must be strictly decreasing")
        if len(set(self.bbox_thresholds)) != len(self.bbox_thresholds):
            raise ValueError("bbox_thresholds must be strictly decreasing")


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union with pixel-area (half-open interval) semantics."""
    ix = max(0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.area() + b.area() - inter
    return inter / union if union > 0 else 0.0


def extract_bboxes(heatmap, image_id, cls, config: EvalConfig, scale=1):
    """Up to len(bbox_thresholds) boxes from one normalized final heatmap.

    For each threshold the box tightly encloses the connected component
    (8-conn) of pixels >= threshold that contains the global maximum.
    The score is the mean heatmap intensity inside the box.  Duplicate
    extents collapse; coordinates are scaled by `scale` to map the
    heatmap grid back to image pixels.  Returns ([], True) on constant
    heatmaps.
    """
    h, degenerate = normalize01(heatmap)
    if degenerate:
        return [], True
    max_loc = np.unravel_index(int(np.argmax(h)), h.shape)
    boxes = []
    for tau in config.bbox_thresholds:
        binary = h >= tau
        comp = flood_fill_component(binary, max_loc, connectivity=8)
        ii, jj = np.nonzero(comp)
        x0, x1 = int(jj.min()), int(jj.max()) + 1
        y0, y1 = int(ii.min()), int(ii.max()) + 1
        score = float(h[y0:y1, x0:x1].mean())
        box = BBox(
            image_id,
            cls,
            x0 * scale,
            y0 * scale,
            (x1 - x0) * scale,
            (y1 - y0) * scale,
            score,
        )
        if not any(box.same_extent(b) for b in boxes):
            boxes.append(box)
    boxes.sort(key=lambda b: -b.score)
    return boxes, False


def build_pool(per_image_boxes):
    """Rank-major pool: all rank-1 boxes in image order, then rank-2, rank-3.

    per_image_boxes: list of per-image ranked box lists (possibly short).
    """
    max_rank = max((len(b) for b in per_image_boxes), default=0)
    pool = []
    for rank in range(max_rank):
        for boxes in per_image_boxes:
            if rank < len(boxes):
                pool.append(boxes[rank])
    return pool


@dataclass
class EvalRow:
    cls: int
    t_iou: float
    acc: float
    afp: float
    boxes_used: int


def evaluate(pool, ground_truth, t_iou, afp_upper_bound):
    """Consume the pool in order; stop before AFP would exceed the bound.

    ground_truth: {image_id: [BBox, ...]} for one class.  A consumed box
    is a hit when it reaches IoU >= t_iou with any ground-truth box of
    its image.  Acc counts images with at least one hit over images with
    ground truth; AFP counts consumed misses per evaluated image.
    """
    gt_images = {iid for iid, boxes in ground_truth.items() if boxes}
    if not gt_images:
        raise ValueError("no ground truth for this class")
    n_images = len(gt_images)
    hit_images = set()
    misses = 0
    used = 0
    for box in pool:
        gt_boxes = ground_truth.get(box.image_id, [])
        hit = any(iou(box, g) >= t_iou for g in gt_boxes)
        if not hit and (misses + 1) / n_images > afp_upper_bound:
            break
        used += 1
        if hit:
            hit_images.add(box.image_id)
        else:
            misses += 1
    acc = len(hit_images & gt_images) / n_images
    afp = misses / n_images
    return acc, afp, used


def evaluate_report(pools_by_class, gt_by_class, config: EvalConfig):
    """Full per-class x per-threshold grid; classes without GT are skipped."""
    rows = []
    skipped = []
    for cls in sorted(pools_by_class):
        gt = gt_by_class.get(cls, {})
        if not any(boxes for boxes in gt.values()):
            skipped.append(cls)
            continue
        for t in config.iou_thresholds:
            acc, afp, used = evaluate(
                pools_by_class[cls], gt, t, config.afp_upper_bound
            )
            rows.append(EvalRow(cls, t, acc, afp, used))
    return rows, skipped


def write_predictions(path, boxes):
    """JSON-lines, one record per box."""
    with open(path, "w") as f:
        for b in boxes:
            rec = {
                "image_id": b.image_id,
                "class": b.cls,
                "x": b.x,
                "y": b.y,
                "w": b.w,
                "h": b.h,
                "score": b.score,
            }
            f.write(json.dumps(rec) + "\n")


def read_predictions(path):
    boxes = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                boxes.append(
                    BBox(
                        str(rec["image_id"]),
                        int(rec["class"]),
                        int(rec["x"]),
                        int(rec["y"]),
                        int(rec["w"]),
                        int(rec["h"]),
                        float(rec.get("score", 0.0)),
                    )
                )
            except (KeyError, ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad prediction record: {exc}")
    return boxes


def write_ground_truth(path, records):
    """JSON-lines: {image_id, class, boxes: [[x,y,w,h],...], labels: [0/1,...]}."""
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


def read_ground_truth(path):
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rec["image_id"] = str(rec["image_id"])
                rec["class"] = int(rec["class"])
                rec["boxes"] = [[int(v) for v in b] for b in rec["boxes"]]
                records.append(rec)
            except (KeyError, ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad ground-truth record: {exc}")
    return records


def ground_truth_by_class(records):
    """{class: {image_id: [BBox, ...]}} from manifest records."""
    out = {}
    for rec in records:
        cls = rec["class"]
        per_img = out.setdefault(cls, {})
        boxes = per_img.setdefault(rec["image_id"], [])
        for x, y, w, h in rec["boxes"]:
            boxes.append(BBox(rec["image_id"], cls, x, y, w, h))
    return out


def write_report_csv(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class", "t_iou", "acc", "afp", "boxes_used"])
        for r in rows:
            writer.writerow(
                [r.cls, f"{r.t_iou:.2f}", f"{r.acc:.6f}", f"{r.afp:.6f}", r.boxes_used]
            )
