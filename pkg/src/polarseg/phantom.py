"""Synthetic CTA-like phantoms: bright ellipses on a darker background."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scan import ScanRecord


class PhantomInfeasible(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    height: int = 256
    width: int = 256
    n_slices: int = 16
    min_components: int = 1
    max_components: int = 3
    min_axis: float = 8.0
    max_axis: float = 24.0
    inside_hu: float = 400.0
    outside_hu: float = 100.0
    noise_sd: float = 0.0
    gap_px: float = 3.0
    slice_mm: float = 2.0
    seed: int = 0
    max_attempts: int = 1000

    def __post_init__(self):
        if not 1 <= self.min_components <= self.max_components:
            raise ValueError("need 1 <= min_components <= max_components")
        if not 0 < self.min_axis <= self.max_axis:
            raise ValueError("need 0 < min_axis <= max_axis")
        if self.n_slices < 1 or self.height < 1 or self.width < 1:
            raise ValueError("phantom dimensions must be positive")


def ellipse_mask(shape, center, axes, angle) -> np.ndarray:
    """Pixels whose centres satisfy the ellipse inequality."""
    ys, xs = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    dy = ys - center[0]
    dx = xs - center[1]
    ca, sa = math.cos(angle), math.sin(angle)
    u = dx * ca + dy * sa
    v = -dx * sa + dy * ca
    return (u / axes[0]) ** 2 + (v / axes[1]) ** 2 <= 1.0


def _place(spec: PhantomSpec, k: int, rng: np.random.Generator):
    placed = []
    attempts = 0
    while len(placed) < k:
        attempts += 1
        if attempts > spec.max_attempts:
            raise PhantomInfeasible(
                f"could not place {k} non-overlapping ellipses in {spec.max_attempts} attempts")
        a = rng.uniform(spec.min_axis, spec.max_axis)
        b = rng.uniform(spec.min_axis, spec.max_axis)
        angle = rng.uniform(0.0, math.pi)
        bound = max(a, b)
        lo_r, hi_r = bound + 1, spec.height - 2 - bound
        lo_c, hi_c = bound + 1, spec.width - 2 - bound
        if lo_r > hi_r or lo_c > hi_c:
            continue
        cr = rng.uniform(lo_r, hi_r)
        cc = rng.uniform(lo_c, hi_c)
        if all(math.hypot(cr - r, cc - c) > bound + rb + spec.gap_px for r, c, rb, *_ in placed):
            placed.append((cr, cc, bound, a, b, angle))
    return placed


def generate_phantom(spec: PhantomSpec, scan_id: str = "phantom") -> ScanRecord:
    """Deterministic per seed; each slice draws from its own child generator."""
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_slices)
    shape = (spec.height, spec.width)
    slices = np.empty((spec.n_slices, *shape))
    truth = np.zeros((spec.n_slices, *shape), dtype=bool)
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        k = int(rng.integers(spec.min_components, spec.max_components + 1))
        for cr, cc, _, a, b, angle in _place(spec, k, rng):
            truth[i] |= ellipse_mask(shape, (cr, cc), (a, b), angle)
        img = np.where(truth[i], spec.inside_hu, spec.outside_hu)
        if spec.noise_sd > 0:
            img = img + rng.normal(0.0, spec.noise_sd, size=shape)
        slices[i] = img
    return ScanRecord(scan_id, slices, truth, (1.0, 1.0, spec.slice_mm))
