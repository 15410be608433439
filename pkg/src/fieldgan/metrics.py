"""Desk-scale evaluation: PSNR, pixel moments, and a kernel two-sample score.

The kernel score is an unbiased MMD^2 with the cubic polynomial kernel
(x.y/d + 1)^3 on flattened, downsampled pixels. It is NOT comparable to
Inception-feature KID numbers; reports echo the kernel configuration so the
two cannot be confused.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import ContractError, ShapeError


@dataclass
class MetricReport:
    name: str
    value: float
    n_real: int = 0
    n_fake: int = 0
    config: dict = dc_field(default_factory=dict)

    def to_json(self) -> str:
        value = "inf" if math.isinf(self.value) else self.value
        return json.dumps({"name": self.name, "value": value, "n_real": self.n_real,
                           "n_fake": self.n_fake, "config": self.config})


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; inf when equal."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _downsample(images: np.ndarray, target: int) -> np.ndarray:
    """Block-average square images down to target x target (pads ragged edges)."""
    n, h, w, c = images.shape
    if h <= target:
        return images
    # bin pixels by target cell; handles h not divisible by target
    edges = (np.arange(h) * target) // h
    out = np.zeros((n, target, target, c))
    counts = np.zeros((target, target, 1))
    for i in range(h):
        for j in range(w):
            out[:, edges[i], edges[j]] += images[:, i, j]
            counts[edges[i], edges[j]] += 1
    return out / counts


def _flatten_for_kernel(images, downsample_to: int) -> np.ndarray:
    arr = np.asarray(list(images), dtype=np.float64)
    if arr.ndim != 4:
        raise ShapeError(f"expected a set of HxWx3 images, got array shape {arr.shape}")
    arr = _downsample(arr, downsample_to)
    return arr.reshape(arr.shape[0], -1)


def _poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def kid_poly(real, fake, downsample_to: int = 16) -> float:
    """Unbiased polynomial-kernel MMD^2 between two image sets.

    Within-set diagonals are excluded, and cross pairs of bit-identical
    images are excluded by content, so comparing a set against itself (in
    any order) cancels exactly while disjoint sets use every cross pair.
    """
    x = _flatten_for_kernel(real, downsample_to)
    y = _flatten_for_kernel(fake, downsample_to)
    m, n = x.shape[0], y.shape[0]
    if m < 2 or n < 2:
        raise ContractError(f"kid needs at least 2 images per set, got {m} and {n}")
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"image sets disagree in shape: {x.shape[1]} vs {y.shape[1]}")
    kxx = _poly_kernel(x, x)
    kyy = _poly_kernel(y, y)
    kxy = _poly_kernel(x, y)
    term_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    term_y = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    identical = (x[:, None, :] == y[None, :, :]).all(axis=2)
    n_cross = m * n - int(identical.sum())
    if n_cross == 0:
        return 0.0
    cross = (kxy.sum() - kxy[identical].sum()) / n_cross
    return float(term_x + term_y - 2.0 * cross)


def image_stats(images) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and variance over every pixel of the set."""
    arr = np.asarray(list(images), dtype=np.float64)
    if arr.size == 0:
        raise ContractError("image_stats of an empty set")
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeError(f"expected N images HxWx3, got {arr.shape}")
    flat = arr.reshape(-1, 3)
    return flat.mean(axis=0), flat.var(axis=0)


def kid_report(real, fake, downsample_to: int = 16) -> MetricReport:
    real_l, fake_l = list(real), list(fake)
    return MetricReport(name="kid_poly_pixel",
                        value=kid_poly(real_l, fake_l, downsample_to),
                        n_real=len(real_l), n_fake=len(fake_l),
                        config={"kernel": "(x.y/d + 1)^3 on raw pixels",
                                "downsample_to": downsample_to,
                                "inception_comparable": False})
