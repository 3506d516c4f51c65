"""Weighted BCE loss, class weighting, overlap metrics and their CSV logs."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor, note_branch, record

logger = logging.getLogger(__name__)

PRED_CLAMP = 1e-7
METRICS_HEADER = ("epoch", "fold", "split", "loss", "dsc", "sen", "ppv")
UNDEFINED = float("nan")


def _check_binary(name: str, y: np.ndarray) -> None:
    if not np.all((y == 0) | (y == 1)):
        raise ValueError(f"{name} must be a binary mask with values in {{0, 1}}")


def weighted_bce(pred: Tensor, target, pos_weight: float) -> Tensor:
    """-(1/N) sum[w_p y log p + (1-y) log(1-p)], mean over every voxel.

    Predictions are clamped to [1e-7, 1 - 1e-7]; the clamp has zero gradient.
    """
    y = np.asarray(target.data if isinstance(target, Tensor) else target)
    if y.shape != pred.shape:
        raise ValueError(f"weighted_bce: prediction shape {pred.shape} != target shape {y.shape}")
    _check_binary("target", y)
    p = pred.data.astype(np.float64)
    pc = np.clip(p, PRED_CLAMP, 1 - PRED_CLAMP)
    y = y.astype(np.float64)
    n = y.size
    loss = -(pos_weight * y * np.log(pc) + (1 - y) * np.log1p(-pc)).sum() / n
    inside = (p >= PRED_CLAMP) & (p <= 1 - PRED_CLAMP)
    note_branch(inside)

    def bw(g, needs):
        d = -(pos_weight * y / pc - (1 - y) / (1 - pc)) / n
        return ((d * inside * float(g.reshape(()))).astype(pred.dtype),)

    return record("weighted_bce", (pred,), np.full((1, 1, 1, 1), loss, dtype=pred.dtype), bw)


def estimate_class_weight(masks: Iterable) -> float:
    """Pooled negative/positive voxel ratio over all masks."""
    pos = neg = 0
    for m in masks:
        m = np.asarray(m)
        p = int(np.count_nonzero(m))
        pos += p
        neg += m.size - p
    if pos == 0:
        raise ValueError("no positive voxels in the training masks; class weight undefined")
    return neg / pos


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def _counts(gt, sv) -> tuple[int, int, int]:
    gt = np.asarray(gt)
    sv = np.asarray(sv)
    if gt.shape != sv.shape:
        raise ValueError(f"mask shapes differ: {gt.shape} vs {sv.shape}")
    g = gt.astype(bool)
    s = sv.astype(bool)
    return int(np.count_nonzero(g & s)), int(np.count_nonzero(g)), int(np.count_nonzero(s))


def dsc(gt, sv) -> float:
    """Dice overlap; NaN when both masks are empty."""
    inter, vg, vs = _counts(gt, sv)
    return 2 * inter / (vg + vs) if vg + vs else UNDEFINED


def sen(gt, sv) -> float:
    inter, vg, _ = _counts(gt, sv)
    return inter / vg if vg else UNDEFINED


def ppv(gt, sv) -> float:
    inter, _, vs = _counts(gt, sv)
    return inter / vs if vs else UNDEFINED


@dataclass
class MetricsRecord:
    dsc: float
    sen: float
    ppv: float
    loss: float = UNDEFINED
    tag: str = ""

    @classmethod
    def from_masks(cls, gt, sv, loss: float = UNDEFINED, tag: str = "") -> "MetricsRecord":
        inter, vg, vs = _counts(gt, sv)
        return cls(
            dsc=2 * inter / (vg + vs) if vg + vs else UNDEFINED,
            sen=inter / vg if vg else UNDEFINED,
            ppv=inter / vs if vs else UNDEFINED,
            loss=loss,
            tag=tag,
        )

    @property
    def defined(self) -> bool:
        return not math.isnan(self.dsc)


def aggregate(records: Sequence[MetricsRecord]) -> dict:
    """Mean and standard deviation of each metric over defined records."""
    out: dict = {}
    for key in ("dsc", "sen", "ppv", "loss"):
        vals = np.array([getattr(r, key) for r in records], dtype=float)
        ok = vals[~np.isnan(vals)]
        excluded = vals.size - ok.size
        if excluded and key == "dsc":
            logger.info("%d record(s) with undefined DSC excluded from aggregate", excluded)
        out[key] = float(ok.mean()) if ok.size else UNDEFINED
        out[f"{key}_std"] = float(ok.std()) if ok.size else UNDEFINED
        out[f"{key}_n"] = int(ok.size)
    return out


def dsc_histogram(records: Sequence[MetricsRecord], bins: int = 10) -> list[tuple[float, float, int]]:
    """Counts of DSC values in ``bins`` uniform bins over [0, 1] (last bin closed)."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    vals = np.array([r.dsc for r in records if r.defined], dtype=float)
    counts, edges = np.histogram(vals, bins=bins, range=(0.0, 1.0))
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


class MetricsLog:
    """Append-only CSV with header (epoch, fold, split, loss, dsc, sen, ppv)."""

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRICS_HEADER)

    def append(self, epoch: int, fold, split: str, rec: MetricsRecord) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([epoch, fold, split, _fmt(rec.loss), _fmt(rec.dsc),
                                     _fmt(rec.sen), _fmt(rec.ppv)])


def write_histogram_csv(path, hist) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("bin_lo", "bin_hi", "count"))
        for lo, hi, n in hist:
            w.writerow((_fmt(lo), _fmt(hi), n))
