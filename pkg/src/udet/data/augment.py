"""Paired image/mask augmentation.

All geometric ops are folded into one sampling map, applied with bilinear
interpolation to the image and to the mask; the mask is then re-binarized at
0.5. Because both go through the identical resampling call, feeding a mask in
as the image reproduces the transformed mask exactly after thresholding.
Salt-and-pepper noise touches the image only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .dataset import Sample

GEOMETRIC_OPS = ("flip_h", "flip_v", "shift", "rotate", "zoom", "shear", "elastic")
ALL_OPS = GEOMETRIC_OPS + ("salt_pepper",)


@dataclass
class AugmentSpec:
    enabled: frozenset = frozenset(ALL_OPS)
    probability: float = 0.5  # chance each enabled op fires
    shift: float = 0.1  # fraction of image size
    rotate: tuple = (-15.0, 15.0)  # degrees
    zoom: tuple = (0.9, 1.1)
    shear: tuple = (-10.0, 10.0)  # degrees
    elastic_alpha: float = 30.0
    elastic_sigma: float = 4.0
    salt_pepper: tuple = (0.0, 0.02)

    def __post_init__(self):
        self.enabled = frozenset(self.enabled)
        unknown = self.enabled - set(ALL_OPS)
        if unknown:
            raise ValueError(f"unknown augmentation ops {sorted(unknown)}")
        if not 0 <= self.probability <= 1:
            raise ValueError("probability must be in [0, 1]")
        if self.zoom[0] <= 0:
            raise ValueError("zoom factors must be positive")
        if self.elastic_sigma <= 0 or self.elastic_alpha < 0:
            raise ValueError("elastic needs alpha >= 0 and sigma > 0")
        if not 0 <= self.salt_pepper[0] <= self.salt_pepper[1] <= 0.5:
            raise ValueError("salt-pepper density range must lie in [0, 0.5]")

    @classmethod
    def none(cls) -> "AugmentSpec":
        return cls(enabled=frozenset())


def _elastic_field(shape, alpha: float, sigma: float, rng) -> tuple[np.ndarray, np.ndarray]:
    dy = gaussian_filter(rng.uniform(-1, 1, shape), sigma, mode="constant") * alpha
    dx = gaussian_filter(rng.uniform(-1, 1, shape), sigma, mode="constant") * alpha
    return dy, dx


def _resample(arr: np.ndarray, coords: np.ndarray) -> np.ndarray:
    return map_coordinates(arr.astype(np.float64), coords, order=1, mode="constant", cval=0.0)


def _grid(shape):
    return np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)


def elastic_deform(image: np.ndarray, mask: np.ndarray, alpha: float, sigma: float,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if alpha < 0 or sigma <= 0:
        raise ValueError("elastic_deform needs alpha >= 0 and sigma > 0")
    if alpha == 0:
        return image.copy(), mask.copy()
    dy, dx = _elastic_field(image.shape, alpha, sigma, rng)
    yy, xx = _grid(image.shape)
    coords = np.stack([yy + dy, xx + dx])
    return _resample(image, coords), (_resample(mask, coords) >= 0.5).astype(mask.dtype)


def salt_pepper(image: np.ndarray, density: float, rng: np.random.Generator) -> np.ndarray:
    """Each pixel becomes 0 or 1 (equally likely) with probability ``density``."""
    if not 0 <= density <= 0.5:
        raise ValueError("density must be in [0, 0.5]")
    out = image.copy()
    if density == 0:
        return out
    hit = rng.random(image.shape) < density
    salt = rng.random(image.shape) < 0.5
    out[hit & salt] = 1.0
    out[hit & ~salt] = 0.0
    return out


def augment(sample: Sample, spec: AugmentSpec, rng: np.random.Generator, force: bool = False) -> Sample:
    """Apply a randomly drawn transform; ``force`` fires every enabled op."""
    img = sample.image.astype(np.float64)
    mask = sample.mask
    h, w = img.shape

    def fires(op: str) -> bool:
        return op in spec.enabled and (force or rng.random() < spec.probability)

    if fires("flip_h"):
        img, mask = img[:, ::-1], mask[:, ::-1]
    if fires("flip_v"):
        img, mask = img[::-1, :], mask[::-1, :]
    img = np.ascontiguousarray(img)
    mask = np.ascontiguousarray(mask)

    # output pixel p samples input at A (p - c) + c - t (+ elastic offset)
    a = np.eye(2)
    shift = np.zeros(2)
    warped = False
    if fires("rotate"):
        th = math.radians(rng.uniform(*spec.rotate))
        a = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]]) @ a
        warped = True
    if fires("shear"):
        sh = math.tan(math.radians(rng.uniform(*spec.shear)))
        a = np.array([[1.0, 0.0], [sh, 1.0]]) @ a
        warped = True
    if fires("zoom"):
        z = rng.uniform(*spec.zoom)
        a = a / z
        warped = True
    if fires("shift"):
        shift = rng.uniform(-spec.shift, spec.shift, size=2) * np.array([h, w])
        warped = True
    elastic = None
    if fires("elastic") and spec.elastic_alpha > 0:
        elastic = _elastic_field((h, w), spec.elastic_alpha, spec.elastic_sigma, rng)
        warped = True

    if warped:
        yy, xx = _grid((h, w))
        c = np.array([(h - 1) / 2, (w - 1) / 2])
        py, px = yy - c[0], xx - c[1]
        sy = a[0, 0] * py + a[0, 1] * px + c[0] - shift[0]
        sx = a[1, 0] * py + a[1, 1] * px + c[1] - shift[1]
        if elastic is not None:
            sy = sy + elastic[0]
            sx = sx + elastic[1]
        coords = np.stack([sy, sx])
        img = _resample(img, coords)
        mask = (_resample(mask, coords) >= 0.5).astype(sample.mask.dtype)

    if "salt_pepper" in spec.enabled and (force or rng.random() < spec.probability):
        img = salt_pepper(img, rng.uniform(*spec.salt_pepper), rng)

    return Sample(img, mask.astype(sample.mask.dtype), dict(sample.meta))


def with_ops(spec: AugmentSpec, *ops: str, **ranges) -> AugmentSpec:
    """Copy of ``spec`` restricted to ``ops`` with updated ranges."""
    return replace(spec, enabled=frozenset(ops), **ranges)
