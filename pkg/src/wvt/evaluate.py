"""Frame-level detection metrics and annotation I/O.

Ground truth is stored one row per (person, label) pair:
``clip_id,x1,y1,x2,y2,class_id,person_id``. Detections are one row per
(box, class): ``clip_id,x1,y1,x2,y2,class_id,score``. Both files are
headerless CSV with relative coordinates.

Average precision uses greedy matching in descending score order (each
detection takes the highest-IoU unmatched ground-truth box of its clip,
threshold 0.5) and all-points interpolation: the area under the
monotone precision envelope over recall. Classes without ground truth
are excluded from the mean.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InputError, ParseError

Box = Tuple[float, float, float, float]


@dataclass(frozen=True)
class GtRow:
    clip_id: str
    box: Box
    class_id: int
    person_id: int


@dataclass(frozen=True)
class DetRow:
    clip_id: str
    box: Box
    class_id: int
    score: float


@dataclass(frozen=True)
class BoxAnnotation:
    """One person at one keyframe with every concurrent action label."""

    clip_id: str
    box: Box
    class_ids: Tuple[int, ...]
    person_id: int


@dataclass
class APResult:
    per_class_ap: np.ndarray  # (K,), NaN for classes without ground truth
    map: float
    counts: np.ndarray  # (K,) ground-truth instances per class

    @property
    def present(self) -> np.ndarray:
        return self.counts > 0


def _check_box(box: Box) -> Box:
    x1, y1, x2, y2 = box
    if not (0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0):
        raise InputError(f"invalid relative box {box}")
    return box


def iou(a: Box, b: Box) -> float:
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(0.0, ix2 - ix1), max(0.0, iy2 - iy1)
    inter = iw * ih
    if inter == 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def group_annotations(rows: Sequence[GtRow]) -> List[BoxAnnotation]:
    """Merge (person, label) rows into one annotation per person per clip."""
    merged = {}
    for r in rows:
        key = (r.clip_id, r.person_id)
        if key in merged:
            prev = merged[key]
            if prev[0] != r.box:
                raise InputError(f"person {r.person_id} in {r.clip_id} has two boxes")
            prev[1].append(r.class_id)
        else:
            merged[key] = (r.box, [r.class_id])
    return [BoxAnnotation(clip_id=c, box=b, class_ids=tuple(sorted(set(ids))),
                          person_id=p)
            for (c, p), (b, ids) in merged.items()]


def average_precision(dets: Sequence[Tuple[str, Box, float]],
                      gts: Sequence[Tuple[str, Box]],
                      iou_thresh: float = 0.5) -> float:
    """AP for one class; dets are (clip, box, score), gts are (clip, box)."""
    npos = len(gts)
    if npos == 0:
        return float("nan")
    if not dets:
        return 0.0
    by_clip = {}
    for j, (clip, box) in enumerate(gts):
        by_clip.setdefault(clip, []).append(j)
    order = sorted(range(len(dets)), key=lambda i: -dets[i][2])  # stable in ties
    taken = set()
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        clip, box, _ = dets[i]
        best, best_iou = -1, iou_thresh
        for j in by_clip.get(clip, ()):
            if j in taken:
                continue
            v = iou(box, gts[j][1])
            if v > best_iou or (v == best_iou and v > 0 and best < 0):
                best, best_iou = j, v
        if best >= 0 and best_iou >= iou_thresh:
            taken.add(best)
            tp[rank] = 1.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / npos
    precision = cum_tp / np.arange(1, len(dets) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, envelope):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def frame_map(dets: Sequence[DetRow], gts: Sequence[GtRow], num_classes: int,
              iou_thresh: float = 0.5,
              box_filter: Optional[Callable[[Box], bool]] = None) -> APResult:
    """Pool all keyframes and average per-class AP over classes with GT.

    ``box_filter`` restricts the evaluation to a sub-population of boxes
    (applied to ground truth and detections alike).
    """
    for r in list(dets) + list(gts):
        if not 0 <= r.class_id < num_classes:
            raise InputError(f"class id {r.class_id} outside [0, {num_classes})")
    if box_filter is not None:
        dets = [d for d in dets if box_filter(d.box)]
        gts = [g for g in gts if box_filter(g.box)]
    counts = np.zeros(num_classes, dtype=int)
    ap = np.full(num_classes, np.nan)
    for k in range(num_classes):
        k_gts = [(g.clip_id, g.box) for g in gts if g.class_id == k]
        counts[k] = len(k_gts)
        if not k_gts:
            continue
        k_dets = [(d.clip_id, d.box, d.score) for d in dets if d.class_id == k]
        ap[k] = average_precision(k_dets, k_gts, iou_thresh)
    present = ~np.isnan(ap)
    mean = float(np.mean(ap[present])) if present.any() else 0.0
    return APResult(per_class_ap=ap, map=mean, counts=counts)


def _parse_row(parts, n_fields, path, line_no):
    if len(parts) != n_fields:
        raise ParseError(f"{path}: expected {n_fields} fields, got {len(parts)}",
                         line=line_no)
    try:
        box = tuple(float(v) for v in parts[1:5])
        tail = parts[5:]
        return parts[0], box, tail
    except ValueError as e:
        raise ParseError(f"{path}: {e}", line=line_no) from None


def read_gt_csv(path) -> List[GtRow]:
    rows = []
    with open(path, newline="") as f:
        for line_no, parts in enumerate(csv.reader(f), start=1):
            if not parts:
                continue
            clip, box, tail = _parse_row(parts, 7, path, line_no)
            try:
                class_id, person_id = int(tail[0]), int(tail[1])
                _check_box(box)
            except (ValueError, InputError) as e:
                raise ParseError(f"{path}: {e}", line=line_no) from None
            rows.append(GtRow(clip, box, class_id, person_id))
    return rows


def read_detections_csv(path) -> List[DetRow]:
    rows = []
    with open(path, newline="") as f:
        for line_no, parts in enumerate(csv.reader(f), start=1):
            if not parts:
                continue
            clip, box, tail = _parse_row(parts, 7, path, line_no)
            try:
                class_id, score = int(tail[0]), float(tail[1])
                _check_box(box)
            except (ValueError, InputError) as e:
                raise ParseError(f"{path}: {e}", line=line_no) from None
            rows.append(DetRow(clip, box, class_id, score))
    return rows


def write_gt_csv(path, rows: Sequence[GtRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        for r in rows:
            w.writerow([r.clip_id] + [f"{v:.6f}" for v in r.box]
                       + [r.class_id, r.person_id])


def write_detections_csv(path, rows: Sequence[DetRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        for r in rows:
            w.writerow([r.clip_id] + [f"{v:.6f}" for v in r.box]
                       + [r.class_id, f"{r.score:.6f}"])


def frame_map_files(det_path, gt_path, num_classes: int,
                    iou_thresh: float = 0.5, box_filter=None) -> APResult:
    return frame_map(read_detections_csv(det_path), read_gt_csv(gt_path),
                     num_classes, iou_thresh, box_filter)
