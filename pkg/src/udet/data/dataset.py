"""Samples, the dataset manifest, and slice/mask MHD pairs on disk."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .mhd import MhdVolume, read_mhd, write_mhd

MANIFEST_NAME = "manifest.csv"
MANIFEST_HEADER = ("id", "image_path", "mask_path", "diameter_mm", "attached")
# phantom intensities in [0, 1] are stored as HU-like int16 over [-1000, 400]
HU_LOW, HU_HIGH = -1000.0, 400.0


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} differ in shape")
        if not np.all(np.isfinite(self.image)):
            raise ValueError("image contains non-finite values")

    @property
    def id(self) -> str:
        return str(self.meta.get("id", ""))


def normalize_minmax(img: np.ndarray) -> np.ndarray:
    img = img.astype(np.float64)
    lo, hi = img.min(), img.max()
    if hi == lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def image_to_hu(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * (HU_HIGH - HU_LOW) + HU_LOW).astype(np.int16)


def load_slice(path) -> tuple[np.ndarray, tuple]:
    """First z-slice of an MHD file, min-max normalized to [0, 1]."""
    vol = read_mhd(path)
    return normalize_minmax(vol.data[0]), vol.spacing


def load_mask(path) -> np.ndarray:
    vol = read_mhd(path)
    return (vol.data[0] > 0).astype(np.uint8)


def save_sample(sample: Sample, directory, spacing_mm: float = 0.7) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sid = sample.id
    spacing = (spacing_mm, spacing_mm, 1.0)
    img = write_mhd(MhdVolume(image_to_hu(sample.image), spacing), directory / f"{sid}_image.mhd")
    msk = write_mhd(MhdVolume(sample.mask.astype(np.uint8), spacing), directory / f"{sid}_mask.mhd")
    return img, msk


def write_manifest(directory, samples) -> Path:
    directory = Path(directory)
    path = directory / MANIFEST_NAME
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_HEADER)
        for s in samples:
            d = s.meta.get("diameter_mm")
            a = s.meta.get("attached")
            w.writerow((s.id, f"{s.id}_image.mhd", f"{s.id}_mask.mhd",
                        "" if d is None else f"{d:.3f}", "" if a is None else int(bool(a))))
    return path


@dataclass
class ManifestRow:
    id: str
    image_path: Path
    mask_path: Path
    diameter_mm: Optional[float]
    attached: Optional[bool]


def read_manifest(directory) -> list[ManifestRow]:
    directory = Path(directory)
    path = directory / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {directory}")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for r in reader:
            d = r["diameter_mm"].strip()
            a = r["attached"].strip().lower()
            rows.append(ManifestRow(
                id=r["id"],
                image_path=directory / r["image_path"],
                mask_path=directory / r["mask_path"],
                diameter_mm=float(d) if d else None,
                attached=(a in ("1", "true", "yes")) if a else None,
            ))
    return rows


def load_dataset(directory) -> list[Sample]:
    samples = []
    for row in read_manifest(directory):
        img, _ = load_slice(row.image_path)
        mask = load_mask(row.mask_path)
        meta = {"id": row.id, "diameter_mm": row.diameter_mm, "attached": row.attached}
        samples.append(Sample(img, mask, meta))
    return samples


def diameter_from_mask(mask: np.ndarray, spacing_mm: float) -> float:
    """Equivalent-circle diameter of the mask area."""
    area = float(np.count_nonzero(mask))
    return 2.0 * math.sqrt(area / math.pi) * spacing_mm
