"""Synthetic chest-slice phantoms with exactly known nodule masks."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .dataset import Sample, normalize_minmax

BODY_LEVEL = 0.55
LUNG_LEVEL = 0.12


@dataclass
class NoduleSpec:
    count: int = 1
    radius_range: tuple = (4.0, 10.0)  # pixels
    intensity_range: tuple = (0.7, 0.95)
    attach_to_wall: bool = False
    aspect_range: tuple = (0.85, 1.15)
    # explicit (row, col) centres bypass random placement
    centers: Optional[Sequence[tuple]] = None
    spacing_mm: float = 0.7


def _lung_fields(size: int) -> list[tuple]:
    """(cy, cx, semi-axis y, semi-axis x) of the two lung ellipses."""
    return [
        (0.5 * size, 0.3 * size, 0.32 * size, 0.16 * size),
        (0.5 * size, 0.7 * size, 0.32 * size, 0.16 * size),
    ]


def ellipse_mask(size: int, cy: float, cx: float, ry: float, rx: float, angle: float = 0.0) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(angle), math.sin(angle)
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def _place(rng, lungs, r: float, attach: bool) -> tuple[float, float]:
    cy, cx, ay, ax = lungs[rng.integers(len(lungs))]
    if attach:
        t = rng.uniform(0, 2 * math.pi)
        by, bx = cy + ay * math.sin(t), cx + ax * math.cos(t)
        # inward unit normal of the ellipse at the boundary point
        ny, nx = -math.sin(t) / ay, -math.cos(t) / ax
        norm = math.hypot(ny, nx)
        return by + r * ny / norm, bx + r * nx / norm
    t = rng.uniform(0, 2 * math.pi)
    rho = math.sqrt(rng.uniform(0, 1))
    return cy + (ay - r) * rho * math.sin(t), cx + (ax - r) * rho * math.cos(t)


def generate_phantom(rng: np.random.Generator, size: int = 128, spec: Optional[NoduleSpec] = None,
                     sample_id: str = "phantom") -> Sample:
    """Two dark lung fields in a brighter body, Gaussian texture, bright nodules."""
    spec = spec or NoduleSpec()
    if spec.count < 0:
        raise ValueError("nodule count must be >= 0")
    lungs = _lung_fields(size)
    r_lo, r_hi = spec.radius_range
    if r_lo <= 0 or r_hi < r_lo:
        raise ValueError(f"bad radius range {spec.radius_range}")
    min_axis = min(min(l[2], l[3]) for l in lungs)
    if spec.count and spec.centers is None and r_hi * max(spec.aspect_range) >= min_axis:
        raise ValueError(f"nodule radius up to {r_hi} does not fit a lung field of half-width {min_axis:.1f}")
    if spec.centers is not None and len(spec.centers) != spec.count:
        raise ValueError("number of explicit centres must equal the nodule count")

    img = np.full((size, size), 0.05)
    img[ellipse_mask(size, 0.5 * size, 0.5 * size, 0.45 * size, 0.47 * size)] = BODY_LEVEL
    for cy, cx, ay, ax in lungs:
        img[ellipse_mask(size, cy, cx, ay, ax)] = LUNG_LEVEL
    img = gaussian_filter(img, 1.0)
    img += 0.03 * gaussian_filter(rng.standard_normal((size, size)), 1.5) / 0.19

    mask = np.zeros((size, size), dtype=bool)
    diameters = []
    for k in range(spec.count):
        r = rng.uniform(r_lo, r_hi)
        aspect = rng.uniform(*spec.aspect_range)
        angle = rng.uniform(0, math.pi)
        ry, rx = r * math.sqrt(aspect), r / math.sqrt(aspect)
        if spec.centers is not None:
            cy, cx = spec.centers[k]
            ry = rx = r
        else:
            for _ in range(100):
                cy, cx = _place(rng, lungs, max(ry, rx), spec.attach_to_wall)
                m = ellipse_mask(size, cy, cx, ry, rx, angle)
                if not (m & mask).any():
                    break
            else:
                raise ValueError("could not place non-overlapping nodules; reduce count or radius")
        m = ellipse_mask(size, cy, cx, ry, rx, angle)
        mask |= m
        img[m] = rng.uniform(*spec.intensity_range) + 0.02 * rng.standard_normal(int(m.sum()))
        diameters.append((ry + rx) * spec.spacing_mm)

    # same scaling the MHD loader applies, so saved phantoms reload unchanged
    img = normalize_minmax(np.clip(img, 0.0, 1.0))
    meta = {
        "id": sample_id,
        "diameter_mm": max(diameters) if diameters else None,
        "attached": bool(spec.attach_to_wall) if spec.count else None,
    }
    return Sample(img, mask.astype(np.uint8), meta)
