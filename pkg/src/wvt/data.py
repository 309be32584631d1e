"""Deterministic synthetic dense-classroom benchmark.

Each clip shows a fixed rows x cols grid of seated actors. Front rows
are larger; back rows are smaller and partially hidden behind static
occlusion bands. Every actor carries 1..5 action labels; each label is
rendered as a small spatio-temporal pattern (intensity oscillation,
flicker, or positional wiggle) at a slot inside the actor box. The slot
an action occupies depends on label order, not on the class, and all
patterns share the same static appearance, so classes can only be told
apart by their local dynamics.

Generation is a pure function of (spec, n_clips): per-clip randomness
comes from a seed sequence spawned per clip index, so files are
bit-identical across runs and safe to render in parallel.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .embed import write_clip
from .errors import ConfigError, InputError, ParseError
from .evaluate import BoxAnnotation, GtRow, write_gt_csv

BACKGROUND = 30.0
BAND_VALUE = 55.0
BODY_VALUE = 120.0
PATTERN_VALUE = 225.0
NOISE_STD = 3.0

# Pattern slots as (cx, cy) fractions of the actor box, kept in the upper
# part so occlusion bands never hide an active pattern.
SLOTS = ((0.50, 0.22), (0.25, 0.50), (0.75, 0.50), (0.50, 0.55), (0.50, 0.38))


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    rows: int = 4
    cols: int = 4
    frames: int = 16
    height: int = 32
    width: int = 32
    num_classes: int = 4
    max_labels: int = 3
    back_scale: float = 0.6  # box scale of the backmost row relative to the front
    occlusion: float = 0.25  # fraction of back-row actor height hidden by a band
    camera: str = "front"

    def validate(self) -> "SceneSpec":
        if self.num_classes < 2:
            raise ConfigError("need at least 2 action classes")
        if not 1 <= self.max_labels <= min(5, len(SLOTS), self.num_classes):
            raise ConfigError(f"max_labels must be in [1, "
                              f"{min(5, len(SLOTS), self.num_classes)}]")
        if self.rows < 1 or self.cols < 1:
            raise ConfigError("need a positive actor grid")
        if self.frames < 4 or self.height < 16 or self.width < 16:
            raise ConfigError("need frames >= 4 and at least 16x16 frames")
        if not 0.2 <= self.back_scale <= 1.0 or not 0.0 <= self.occlusion <= 0.4:
            raise ConfigError("back_scale in [0.2, 1] and occlusion in [0, 0.4]")
        if min(a.box_w for a in actor_layout(self)) < 3:
            raise ConfigError("actor grid does not fit the frame; "
                              "reduce rows/cols or raise the resolution")
        return self


@dataclass(frozen=True)
class Actor:
    row: int
    col: int
    x1: int
    y1: int
    x2: int  # exclusive pixel bounds
    y2: int

    @property
    def box_w(self) -> int:
        return self.x2 - self.x1

    @property
    def box_h(self) -> int:
        return self.y2 - self.y1


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    frames: int
    height: int
    width: int
    keyframe: int  # middle frame carries the annotations
    annotations: Tuple[BoxAnnotation, ...]


@dataclass(frozen=True)
class ManifestEntry:
    clip_id: str
    path: str
    frames: int
    height: int
    width: int
    split: str = "all"


def actor_layout(spec: SceneSpec) -> List[Actor]:
    """Static scene geometry; row 0 is the backmost (top, smallest) row."""
    out = []
    base_w = spec.width / spec.cols * 0.7
    base_h = min(base_w * 1.3, spec.height / spec.rows * 0.92)
    for r in range(spec.rows):
        t = r / (spec.rows - 1) if spec.rows > 1 else 1.0
        scale = spec.back_scale + (1.0 - spec.back_scale) * t
        cy = spec.height * (0.15 + 0.7 * (r + 0.5) / spec.rows)
        for c in range(spec.cols):
            cx = spec.width * (c + 0.5) / spec.cols
            w, h = base_w * scale, base_h * scale
            x1 = int(round(np.clip(cx - w / 2, 1, spec.width - 2)))
            y1 = int(round(np.clip(cy - h / 2, 1, spec.height - 2)))
            x2 = int(round(np.clip(cx + w / 2, x1 + 2, spec.width - 1)))
            y2 = int(round(np.clip(cy + h / 2, y1 + 2, spec.height - 1)))
            out.append(Actor(r, c, x1, y1, x2, y2))
    return out


def back_rows(spec: SceneSpec) -> int:
    """Number of rows counted as the occluded, small-actor back section."""
    return spec.rows // 2


def back_row_area_threshold(spec: SceneSpec) -> float:
    """Relative box area separating back-section actors from the rest."""
    layout = actor_layout(spec)
    frame = spec.height * spec.width
    per_row = {}
    for a in layout:
        per_row.setdefault(a.row, a.box_w * a.box_h / frame)
    cut = back_rows(spec)
    if cut == 0 or cut >= spec.rows:
        return float("inf")
    return (per_row[cut - 1] + per_row[cut]) / 2.0


def _zipf_probs(k: int) -> np.ndarray:
    p = 1.0 / np.arange(1, k + 1)
    return p / p.sum()


def _pattern_wave(class_id: int, frames: int, phase: float):
    """Per-class temporal signature; kind cycles, rate grows with class id."""
    kind = class_id % 4
    speed = 1 + class_id // 4
    t = np.arange(frames)
    if kind == 0:  # smooth intensity oscillation
        return "oscillate", 0.5 + 0.5 * np.sin(2 * np.pi * 2 * speed * t / frames + phase)
    if kind == 1:  # hard on/off flicker, higher rate
        return "flicker", (np.sin(2 * np.pi * 3 * speed * t / frames + phase) > 0) * 1.0
    if kind == 2:  # horizontal wiggle
        return "wiggle_x", np.sin(2 * np.pi * 2 * speed * t / frames + phase)
    return "wiggle_y", np.sin(2 * np.pi * 2 * speed * t / frames + phase)


def _render_pattern(canvas: np.ndarray, actor: Actor, class_id: int,
                    slot_index: int, rng: np.random.Generator) -> None:
    frames = canvas.shape[0]
    fx, fy = SLOTS[slot_index]
    sw = max(1, int(round(actor.box_w * 0.3)))
    sh = max(1, int(round(actor.box_h * 0.22)))
    cx = actor.x1 + fx * actor.box_w
    cy = actor.y1 + fy * actor.box_h
    phase = rng.uniform(0, 2 * np.pi)
    kind, wave = _pattern_wave(class_id, frames, phase)
    amp = max(1, int(round(actor.box_w * 0.15)))
    for t in range(frames):
        dx = dy = 0.0
        level = PATTERN_VALUE
        if kind == "oscillate":
            level = BODY_VALUE + (PATTERN_VALUE - BODY_VALUE) * (0.35 + 0.65 * wave[t])
        elif kind == "flicker":
            level = BODY_VALUE if wave[t] < 0.5 else PATTERN_VALUE
        elif kind == "wiggle_x":
            dx = amp * wave[t]
        else:
            dy = amp * wave[t]
        x1 = int(round(cx + dx - sw / 2))
        y1 = int(round(cy + dy - sh / 2))
        x1 = int(np.clip(x1, actor.x1, actor.x2 - sw))
        y1 = int(np.clip(y1, actor.y1, actor.y2 - sh))
        canvas[t, y1 : y1 + sh, x1 : x1 + sw] = level


def _clip_rng(spec: SceneSpec, clip_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.seed, clip_index]))


def generate_clip(spec: SceneSpec, clip_index: int):
    """Render one clip; returns ((T, H, W, 1) u8 frames, ClipRecord)."""
    rng = _clip_rng(spec, clip_index)
    layout = actor_layout(spec)
    canvas = np.full((spec.frames, spec.height, spec.width), BACKGROUND,
                     dtype=np.float64)

    clip_id = f"clip_{clip_index:05d}"
    probs = _zipf_probs(spec.num_classes)
    label_count_p = 0.55 ** np.arange(spec.max_labels)
    label_count_p = label_count_p / label_count_p.sum()
    annotations = []
    for pid, actor in enumerate(layout):
        body = BODY_VALUE + rng.uniform(-12.0, 12.0)
        canvas[:, actor.y1 : actor.y2, actor.x1 : actor.x2] = body
        n_labels = 1 + rng.choice(spec.max_labels, p=label_count_p)
        classes = rng.choice(spec.num_classes, size=n_labels, replace=False, p=probs)
        for slot, class_id in enumerate(classes):
            _render_pattern(canvas, actor, int(class_id), slot, rng)
        box = (actor.x1 / spec.width, actor.y1 / spec.height,
               actor.x2 / spec.width, actor.y2 / spec.height)
        annotations.append(BoxAnnotation(clip_id, box, tuple(sorted(int(c) for c in classes)), pid))

    # Static bands over the lower edge of each back-section row; sized from
    # the row's actor height so patterns in the upper slots stay visible.
    for r in range(back_rows(spec)):
        row_boxes = [a for a in layout if a.row == r]
        bottom = max(a.y2 for a in row_boxes)
        band_h = max(1, int(round(spec.occlusion * max(a.box_h for a in row_boxes))))
        canvas[:, max(0, bottom - band_h) : bottom, :] = BAND_VALUE

    canvas += rng.normal(0.0, NOISE_STD, canvas.shape)
    frames = np.clip(canvas, 0, 255).astype(np.uint8)[..., None]
    record = ClipRecord(clip_id, spec.frames, spec.height, spec.width,
                        spec.frames // 2, tuple(annotations))
    return frames, record


def manifest_header(spec: SceneSpec, n_clips: int) -> List[str]:
    """Comment lines documenting the generator constants for this dataset."""
    return [
        "# synthetic dense-classroom dataset",
        f"# spec: seed={spec.seed} rows={spec.rows} cols={spec.cols} "
        f"frames={spec.frames} size={spec.height}x{spec.width} "
        f"classes={spec.num_classes} max_labels={spec.max_labels} "
        f"back_scale={spec.back_scale} occlusion={spec.occlusion} "
        f"camera={spec.camera} n_clips={n_clips}",
        "# patterns: class k -> kind (k mod 4) in [oscillate, flicker, "
        "wiggle_x, wiggle_y], rate factor 1 + k//4",
        f"# levels: background={BACKGROUND} band={BAND_VALUE} body={BODY_VALUE} "
        f"pattern={PATTERN_VALUE} noise_std={NOISE_STD}",
        "# columns: clip_id,path,frames,height,width,split",
    ]


def write_manifest(path, entries: Sequence[ManifestEntry], header=()) -> None:
    with open(path, "w") as f:
        for line in header:
            f.write(line.rstrip("\n") + "\n")
        for e in entries:
            f.write(f"{e.clip_id},{e.path},{e.frames},{e.height},{e.width},{e.split}\n")


def read_manifest(path) -> List[ManifestEntry]:
    out = []
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 6:
                raise ParseError(f"{path}: expected 6 manifest fields", line=line_no)
            try:
                out.append(ManifestEntry(parts[0], parts[1], int(parts[2]),
                                         int(parts[3]), int(parts[4]), parts[5]))
            except ValueError as e:
                raise ParseError(f"{path}: {e}", line=line_no) from None
    return out


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("WVT_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class GeneratedDataset:
    out_dir: Path
    manifest_path: Path
    gt_path: Path
    entries: List[ManifestEntry]
    records: List[ClipRecord]


def generate_dataset(spec: SceneSpec, n_clips: int, out_dir,
                     workers: int = None) -> GeneratedDataset:
    """Write clips, ground truth, and manifest; deterministic in (spec, n_clips)."""
    spec.validate()
    if n_clips < 1:
        raise InputError("n_clips must be >= 1")
    out_dir = Path(out_dir)
    clip_dir = out_dir / "clips"
    try:
        clip_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise InputError(f"cannot create output dir {out_dir}: {e}") from None

    def render(i: int) -> ClipRecord:
        frames, record = generate_clip(spec, i)
        write_clip(clip_dir / f"{record.clip_id}.wvf", frames)
        return record

    n_workers = workers if workers is not None else default_workers()
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            records = list(pool.map(render, range(n_clips)))
    else:
        records = [render(i) for i in range(n_clips)]

    gt_rows = []
    for rec in records:
        for ann in rec.annotations:
            for k in ann.class_ids:
                gt_rows.append(GtRow(ann.clip_id, ann.box, k, ann.person_id))
    gt_path = out_dir / "gt.csv"
    write_gt_csv(gt_path, gt_rows)

    entries = [ManifestEntry(r.clip_id, f"clips/{r.clip_id}.wvf", r.frames,
                             r.height, r.width) for r in records]
    manifest_path = out_dir / "manifest.txt"
    write_manifest(manifest_path, entries, manifest_header(spec, n_clips))
    return GeneratedDataset(out_dir, manifest_path, gt_path, entries, list(records))


def split_train_test(entries: Sequence[ManifestEntry], seed: int = 0,
                     test_fraction: float = 0.2):
    """Deterministic disjoint split at clip granularity, about 4:1."""
    if len(entries) < 5:
        raise InputError(f"need at least 5 clips to split, got {len(entries)}")
    order = np.random.default_rng(np.random.SeedSequence([seed, 0x5941])).permutation(
        len(entries))
    n_test = max(1, int(round(len(entries) * test_fraction)))
    test_idx = set(int(i) for i in order[:n_test])
    train = [replace(e, split="train") for i, e in enumerate(entries) if i not in test_idx]
    test = [replace(e, split="test") for i, e in enumerate(entries) if i in test_idx]
    return train, test


def dataset_stats(gt_rows: Sequence[GtRow],
                  resolutions: Dict[str, Tuple[int, int]], bins: int = 20):
    """Class counts plus box area-ratio and pixel aspect-ratio histograms."""
    counts: Dict[int, int] = {}
    areas, aspects = [], []
    seen = set()
    for r in gt_rows:
        counts[r.class_id] = counts.get(r.class_id, 0) + 1
        key = (r.clip_id, r.person_id)
        if key in seen:
            continue  # one box per person regardless of label count
        seen.add(key)
        if r.clip_id not in resolutions:
            raise InputError(f"no resolution for clip {r.clip_id!r}")
        h, w = resolutions[r.clip_id]
        x1, y1, x2, y2 = r.box
        areas.append((x2 - x1) * (y2 - y1))
        aspects.append(((y2 - y1) * h) / ((x2 - x1) * w))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    area_hist, area_edges = np.histogram(areas, bins=bins, range=(0.0, 1.0))
    max_aspect = max(aspects, default=1.0)
    aspect_hist, aspect_edges = np.histogram(aspects, bins=bins,
                                             range=(0.0, max(2.0, max_aspect)))
    return {
        "class_counts": ranked,
        "area_hist": (area_hist, area_edges),
        "aspect_hist": (aspect_hist, aspect_edges),
        "num_boxes": len(seen),
    }
