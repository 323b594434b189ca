"""Connected components, centroids and hysteresis thresholding."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


def _structure(connectivity: int) -> np.ndarray:
    try:
        return _STRUCTURES[connectivity]
    except KeyError:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}") from None


@dataclass(frozen=True)
class Component:
    label: int
    pixels: np.ndarray = field(repr=False)  # (area, 2) int array of (row, col)
    centroid_row: float
    centroid_col: float

    @property
    def area(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def centroid(self) -> tuple[float, float]:
        return (self.centroid_row, self.centroid_col)


@dataclass(frozen=True)
class LabelMap:
    labels: np.ndarray  # int32, 0 = background
    components: list[Component]

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def __len__(self) -> int:
        return len(self.components)


def _build(labels: np.ndarray) -> LabelMap:
    """Components for a label raster whose labels are already 1..n in raster order."""
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat)
    comps = []
    w = labels.shape[1]
    start = counts[0]
    for lab in range(1, len(counts)):
        idx = order[start:start + counts[lab]]
        start += counts[lab]
        pix = np.stack([idx // w, idx % w], axis=1)
        comps.append(Component(lab, pix, float(pix[:, 0].mean()), float(pix[:, 1].mean())))
    return LabelMap(labels, comps)


def _canonical(raw: np.ndarray, n: int) -> np.ndarray:
    """Relabel so label k is the k-th component met in raster order."""
    if n == 0:
        return raw.astype(np.int32)
    flat = raw.ravel()
    fg = np.flatnonzero(flat)
    first = np.full(n + 1, flat.size, dtype=np.int64)
    np.minimum.at(first, flat[fg], fg)
    rank = np.empty(n + 1, dtype=np.int32)
    rank[0] = 0
    rank[1:][np.argsort(first[1:], kind="stable")] = np.arange(1, n + 1, dtype=np.int32)
    return rank[raw]


def label_components(mask, connectivity: int = 8) -> LabelMap:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"expected a 2D mask, got shape {mask.shape}")
    raw, n = ndimage.label(mask, structure=_structure(connectivity))
    return _build(_canonical(raw, n))


def filter_small(lm: LabelMap, min_area: int) -> LabelMap:
    if min_area < 0:
        raise ValueError("min_area must be >= 0")
    keep = [c for c in lm.components if c.area >= min_area]
    if len(keep) == len(lm.components):
        return lm
    lut = np.zeros(len(lm.components) + 1, dtype=np.int32)
    for new, c in enumerate(keep, start=1):
        lut[c.label] = new
    labels = lut[lm.labels]
    comps = [Component(new, c.pixels, c.centroid_row, c.centroid_col)
             for new, c in enumerate(keep, start=1)]
    return LabelMap(labels, comps)


def hysteresis_threshold(prob, low: float = 0.0, high: float = 0.4,
                         connectivity: int = 8) -> np.ndarray:
    """Keep pixels above ``low`` that connect, through pixels above ``low``,
    to at least one pixel at or above ``high``.
    """
    if not (0.0 <= low <= high):
        raise ValueError(f"hysteresis needs 0 <= low <= high, got low={low} high={high}")
    prob = np.asarray(prob, dtype=np.float64)
    if prob.ndim != 2:
        raise ValueError(f"expected a 2D map, got shape {prob.shape}")
    if prob.size and (not np.all(np.isfinite(prob)) or prob.min() < 0.0 or prob.max() > 1.0):
        raise ValueError("hysteresis input must hold finite values in [0, 1]")
    weak = prob > low
    labels, n = ndimage.label(weak, structure=_structure(connectivity))
    if n == 0:
        return np.zeros(prob.shape, dtype=bool)
    seeded = np.zeros(n + 1, dtype=bool)
    seeded[labels[weak & (prob >= high)]] = True
    seeded[0] = False
    return seeded[labels]
