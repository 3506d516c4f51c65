"""Evaluation tables and overlay figures."""
from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import binary_erosion

from .metrics import MetricsRecord, _fmt, aggregate

DIAMETER_SPLIT_MM = 6.0
# gray levels in the overlay: image is scaled into [0, IMAGE_MAX]
IMAGE_MAX = 180
GT_LEVEL = 255
PRED_LEVEL = 215


def contour(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask).astype(bool)
    return m & ~binary_erosion(m, border_value=0)


def overlay(image: np.ndarray, pred: np.ndarray, gt: Optional[np.ndarray] = None) -> np.ndarray:
    """uint8 gray image with ground-truth and prediction contours burned in."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = img.min(), img.max()
    scaled = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    out = np.round(scaled * IMAGE_MAX).astype(np.uint8)
    if gt is not None:
        out[contour(gt)] = GT_LEVEL
    out[contour(pred)] = PRED_LEVEL
    return out


def write_ppm(path, gray: np.ndarray) -> None:
    """Binary (P6) portable pixmap with equal R, G and B channels."""
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def write_per_sample_csv(path, records: Sequence[MetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("id", "dsc", "sen", "ppv"))
        for r in records:
            w.writerow((r.tag, _fmt(r.dsc), _fmt(r.sen), _fmt(r.ppv)))


def write_aggregate_csv(path, records: Sequence[MetricsRecord]) -> dict:
    agg = aggregate(records)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("metric", "mean", "std", "n"))
        for key in ("dsc", "sen", "ppv"):
            w.writerow((key, _fmt(agg[key]), _fmt(agg[f"{key}_std"]), agg[f"{key}_n"]))
    return agg


def stratified_table(records: Sequence[MetricsRecord], meta: Sequence[dict],
                     diameter_split: float = DIAMETER_SPLIT_MM) -> list[tuple[str, int, float]]:
    """(group, n, mean DSC) for attached / non-attached / small / large nodules."""
    groups = {
        "attached": lambda m: m.get("attached") is True,
        "non_attached": lambda m: m.get("attached") is False,
        f"diameter_lt_{diameter_split:g}mm": lambda m: m.get("diameter_mm") is not None and m["diameter_mm"] < diameter_split,
        f"diameter_ge_{diameter_split:g}mm": lambda m: m.get("diameter_mm") is not None and m["diameter_mm"] >= diameter_split,
    }
    rows = []
    for name, pred in groups.items():
        vals = [r.dsc for r, m in zip(records, meta) if pred(m) and r.defined]
        rows.append((name, len(vals), float(np.mean(vals)) if vals else math.nan))
    return rows


def write_stratified_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("group", "n", "mean_dsc"))
        for name, n, v in rows:
            w.writerow((name, n, _fmt(v)))
