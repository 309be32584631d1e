"""Training and evaluation loops for the box detector.

Clips are preloaded into memory (desk-scale datasets are a few dozen
megabytes), proposals come from ground-truth keyframe boxes, and the
loss is the sum of per-class binary sigmoid losses averaged over boxes.
Everything is deterministic given (config, settings, dataset).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special

from . import tensor as tt
from .data import ManifestEntry, read_manifest
from .embed import normalize_clip, read_clip, sample_frames
from .errors import InputError
from .evaluate import (APResult, BoxAnnotation, DetRow, GtRow, frame_map,
                       group_annotations, read_gt_csv)
from .head import Detector, detections_from_scores, multilabel_loss
from .model import ModelConfig
from .optim import Adam
from .tensor import Tensor


@dataclass
class TrainSettings:
    epochs: int = 30
    batch_clips: int = 8
    lr: float = 3e-3
    weight_decay: float = 0.0
    seed: int = 0


@dataclass
class ClipDataset:
    """Preloaded normalized clips plus grouped keyframe annotations."""

    clips: List[np.ndarray]  # each (3, T, H, W)
    annotations: List[List[BoxAnnotation]]
    clip_ids: List[str]
    num_classes: int

    def __len__(self):
        return len(self.clips)

    def gt_rows(self) -> List[GtRow]:
        rows = []
        for anns in self.annotations:
            for a in anns:
                for k in a.class_ids:
                    rows.append(GtRow(a.clip_id, a.box, k, a.person_id))
        return rows


def load_dataset(entries: Sequence[ManifestEntry], gt_rows: Sequence[GtRow],
                 cfg: ModelConfig, root) -> ClipDataset:
    root = Path(root)
    by_clip = {}
    for ann in group_annotations(gt_rows):
        by_clip.setdefault(ann.clip_id, []).append(ann)
    clips, annotations, ids = [], [], []
    for e in entries:
        raw = read_clip(root / e.path)
        picked = sample_frames(raw, cfg.frames, cfg.sample_stride)
        clips.append(normalize_clip(picked))
        annotations.append(sorted(by_clip.get(e.clip_id, []),
                                  key=lambda a: a.person_id))
        ids.append(e.clip_id)
    return ClipDataset(clips, annotations, ids, cfg.num_classes)


def load_dataset_files(manifest_path, gt_path, cfg: ModelConfig) -> ClipDataset:
    entries = read_manifest(manifest_path)
    return load_dataset(entries, read_gt_csv(gt_path), cfg,
                        Path(manifest_path).parent)


def _multi_hot(anns: Sequence[BoxAnnotation], k: int) -> np.ndarray:
    t = np.zeros((len(anns), k), dtype=np.float32)
    for i, a in enumerate(anns):
        t[i, list(a.class_ids)] = 1.0
    return t


def _batch(ds: ClipDataset, idxs: Sequence[int]):
    clip = Tensor(np.stack([ds.clips[i] for i in idxs]))
    boxes, clip_index, anns = [], [], []
    for row, i in enumerate(idxs):
        for a in ds.annotations[i]:
            boxes.append(a.box)
            clip_index.append(row)
            anns.append(a)
    return clip, np.asarray(boxes), np.asarray(clip_index), anns


def train_detector(cfg: ModelConfig, train_ds: ClipDataset,
                   settings: TrainSettings = TrainSettings(),
                   log: Optional[Callable[[str], None]] = None,
                   model: Optional[Detector] = None):
    """Train from scratch; returns (model, per-epoch mean loss history)."""
    if len(train_ds) == 0:
        raise InputError("empty training set")
    rng = np.random.default_rng(np.random.SeedSequence([settings.seed, 0x7261]))
    if model is None:
        model = Detector(cfg, np.random.default_rng(
            np.random.SeedSequence([settings.seed, 0x696e])))
    opt = Adam(model.params(), lr=settings.lr,
               weight_decay=settings.weight_decay)
    history = []
    n = len(train_ds)
    bs = max(1, settings.batch_clips)
    for epoch in range(settings.epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, bs):
            idxs = order[start : start + bs]
            clip, boxes, clip_index, anns = _batch(train_ds, idxs)
            logits = model(clip, boxes, clip_index)
            loss = multilabel_loss(logits, _multi_hot(anns, cfg.num_classes))
            model.zero_grad()
            tt.backward(loss)
            opt.step()
            total += loss.item()
            batches += 1
        history.append(total / max(1, batches))
        if log:
            log(f"epoch {epoch + 1}/{settings.epochs} loss {history[-1]:.4f}")
    return model, history


def predict(model: Detector, ds: ClipDataset, batch_clips: int = 16,
            proposals: Optional[Sequence[Sequence[BoxAnnotation]]] = None
            ) -> List[DetRow]:
    """Score proposals (default: ground-truth boxes) on every clip."""
    rows: List[DetRow] = []
    use = proposals if proposals is not None else ds.annotations
    if len(use) != len(ds):
        raise InputError("one proposal list per clip required")
    with tt.no_grad():
        for start in range(0, len(ds), batch_clips):
            idxs = range(start, min(start + batch_clips, len(ds)))
            clip = Tensor(np.stack([ds.clips[i] for i in idxs]))
            boxes, clip_index, anns = [], [], []
            for row, i in enumerate(idxs):
                for a in use[i]:
                    boxes.append(a.box)
                    clip_index.append(row)
                    anns.append(a)
            if not boxes:
                continue
            logits = model(clip, np.asarray(boxes), np.asarray(clip_index))
            scores = special.expit(logits.data)
            rows.extend(detections_from_scores(anns, scores))
    return rows


def evaluate_detector(model: Detector, ds: ClipDataset,
                      iou_thresh: float = 0.5, box_filter=None,
                      proposals=None) -> Tuple[APResult, List[DetRow]]:
    dets = predict(model, ds, proposals=proposals)
    result = frame_map(dets, ds.gt_rows(), ds.num_classes, iou_thresh, box_filter)
    return result, dets
