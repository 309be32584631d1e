"""Plot and image writers for CLI reports.

All figures render headlessly to files; PGM P5 is used for raw
grayscale heatmaps so they can be inspected without any image library.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import DimensionError


def write_pgm(path, image: np.ndarray) -> None:
    """Write a 2D array as binary PGM (P5); floats are scaled to 0..255."""
    if image.ndim != 2:
        raise DimensionError(f"PGM needs a 2D array, got shape {image.shape}")
    if image.dtype != np.uint8:
        img = image.astype(np.float64)
        lo, hi = float(img.min()), float(img.max())
        scale = 255.0 / (hi - lo) if hi > lo else 0.0
        image = ((img - lo) * scale).round().astype(np.uint8)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(image).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        items = []
        while len(items) < 4:  # magic, width, height, maxval
            line = f.readline()
            body = line.split(b"#", 1)[0].split()
            items.extend(body)
        if items[0] != b"P5":
            raise DimensionError(f"not a binary PGM: {path}")
        w, h = int(items[1]), int(items[2])
        return np.frombuffer(f.read(w * h), dtype=np.uint8).reshape(h, w)


def save_curve(xs, ys, xlabel: str, ylabel: str, path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_bars(labels, values, xlabel: str, ylabel: str, path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    ax.bar([str(v) for v in labels], values)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_hist(hist: np.ndarray, edges: np.ndarray, xlabel: str, path,
              title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(edges[:-1], hist, width=np.diff(edges), align="edge")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("boxes")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_stats_figures(stats: dict, out_dir) -> list:
    """Render the dataset statistics report; returns written paths."""
    out_dir = Path(out_dir)
    written = []
    ids = [k for k, _ in stats["class_counts"]]
    counts = [c for _, c in stats["class_counts"]]
    p = out_dir / "class_counts.png"
    save_bars(ids, counts, "class id (sorted by count)", "instances", p,
              "class distribution")
    written.append(p)
    for key, xlabel, name in (("area_hist", "box area / frame area", "area_hist.png"),
                              ("aspect_hist", "box aspect ratio (h/w)", "aspect_hist.png")):
        hist, edges = stats[key]
        p = out_dir / name
        save_hist(hist, edges, xlabel, p)
        written.append(p)
    return written
