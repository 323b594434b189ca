"""Rough segmentation, per-component polar passes, weighted fusion and hysteresis."""
from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import ccomp, imgcore
from .segmenter import Query, SegmenterBackend


class SliceError(RuntimeError):
    def __init__(self, slice_index: int, cause: Exception):
        super().__init__(f"slice {slice_index}: {cause}")
        self.slice_index = slice_index
        self.cause = cause


@dataclass(frozen=True)
class FusionConfig:
    origin_weight: float = 2.0
    other_weight: float = 1.0
    binarize_threshold: float = 0.5
    hyst_low: float = 0.0
    hyst_high: float = 0.4
    connectivity: int = 8
    min_component_area: int = 4
    normalization: str = "max"  # or "theoretical"
    polar_bins: int = imgcore.DEFAULT_BINS

    def __post_init__(self):
        if not self.origin_weight >= self.other_weight > 0:
            raise ValueError("need origin_weight >= other_weight > 0")
        if not 0.0 <= self.hyst_low <= self.hyst_high <= 1.0:
            raise ValueError("need 0 <= hyst_low <= hyst_high <= 1")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")
        if self.normalization not in ("max", "theoretical"):
            raise ValueError(f"unknown normalization {self.normalization!r}")


@dataclass
class SliceResult:
    final_mask: np.ndarray
    confidence_map: np.ndarray
    rough_mask: np.ndarray
    per_component_predictions: list = field(default_factory=list)  # (PolarGeometry, cartesian map)


def origin_pixel(geom: imgcore.PolarGeometry, shape) -> tuple[int, int]:
    """Rounded (half-up) origin, clamped into the raster."""
    r = min(max(math.floor(geom.origin_row + 0.5), 0), shape[0] - 1)
    c = min(max(math.floor(geom.origin_col + 0.5), 0), shape[1] - 1)
    return r, c


def rough_segment(img, cart_backend: SegmenterBackend, cfg: FusionConfig = FusionConfig(),
                  query: Query | None = None) -> np.ndarray:
    prob = cart_backend.predict([img], [query or Query()])[0]
    return binarize_and_filter(prob, cfg)


def binarize_and_filter(prob, cfg: FusionConfig) -> np.ndarray:
    lm = ccomp.label_components(prob >= cfg.binarize_threshold, cfg.connectivity)
    lm = ccomp.filter_small(lm, cfg.min_component_area)
    return lm.labels > 0


def polar_passes(img, rough, polar_backend: SegmenterBackend, cfg: FusionConfig = FusionConfig(),
                 query: Query | None = None) -> list:
    """One polar prediction per rough component, mapped back to cartesian space."""
    img = imgcore.as_image(img)
    rough = np.asarray(rough, dtype=bool)
    if rough.shape != img.shape:
        raise ValueError(f"rough mask {rough.shape} and slice {img.shape} differ in shape")
    lm = ccomp.label_components(rough, cfg.connectivity)
    if not lm.components:
        return []
    base = query or Query()
    geoms = [imgcore.default_geometry(c.centroid, img.shape, cfg.polar_bins, cfg.polar_bins)
             for c in lm.components]
    polar_imgs = [imgcore.cart_to_polar(img, g, pad=0.0) for g in geoms]
    queries = [Query(base.scan_id, base.slice_index, g) for g in geoms]
    preds = polar_backend.predict(polar_imgs, queries)
    h, w = img.shape
    return [(g, np.clip(imgcore.polar_to_cart(p, g, h, w, pad=0.0), 0.0, 1.0))
            for g, p in zip(geoms, preds)]


def fuse(predictions, cfg: FusionConfig = FusionConfig()) -> np.ndarray:
    """Sum component-weighted binarised predictions and normalise to [0, 1].

    In each prediction the component under that pass's origin gets
    ``origin_weight`` and every other component ``other_weight``.
    """
    if not predictions:
        raise ValueError("fuse needs at least one prediction")
    shape = np.shape(predictions[0][1])
    total = np.zeros(shape, dtype=np.float64)
    for geom, prob in predictions:
        prob = np.asarray(prob, dtype=np.float64)
        if prob.shape != shape:
            raise ValueError(f"prediction shape {prob.shape} != {shape}")
        lm = ccomp.label_components(prob >= cfg.binarize_threshold, cfg.connectivity)
        weights = np.full(len(lm.components) + 1, cfg.other_weight, dtype=np.float64)
        weights[0] = 0.0
        hit = lm.labels[origin_pixel(geom, shape)]
        if hit:
            weights[hit] = cfg.origin_weight
        total += weights[lm.labels]
    if cfg.normalization == "theoretical":
        denom = cfg.origin_weight + (len(predictions) - 1) * cfg.other_weight
    else:
        denom = total.max()
    if denom <= 0:
        return np.zeros(shape, dtype=np.float64)
    return np.clip(total / denom, 0.0, 1.0)


def segment_slice(img, cart_backend, polar_backend, cfg: FusionConfig = FusionConfig(),
                  query: Query | None = None) -> SliceResult:
    img = imgcore.as_image(img)
    rough = rough_segment(img, cart_backend, cfg, query)
    passes = polar_passes(img, rough, polar_backend, cfg, query)
    if not passes:
        empty = np.zeros(img.shape, dtype=bool)
        return SliceResult(empty, np.zeros(img.shape), rough, [])
    conf = fuse(passes, cfg)
    final = ccomp.hysteresis_threshold(conf, cfg.hyst_low, cfg.hyst_high, cfg.connectivity)
    return SliceResult(final, conf, rough, passes)


class _Serialized(SegmenterBackend):
    """Funnels every call to a non-thread-safe backend through one lock."""

    def __init__(self, inner: SegmenterBackend):
        self.inner = inner
        self.name = inner.name
        self.input_space = inner.input_space
        self._lock = threading.Lock()

    def predict(self, batch, queries=None):
        with self._lock:
            return self.inner.predict(batch, queries)


def segment_scan(scan, cart_backend, polar_backend, cfg: FusionConfig = FusionConfig(),
                 workers: int = 1) -> list[SliceResult]:
    """Run the cascade on every slice; output order follows slice order."""
    if workers > 1:
        guards = {}

        def guard(b):
            if getattr(b, "thread_safe", False):
                return b
            return guards.setdefault(id(b), _Serialized(b))

        cart_backend, polar_backend = guard(cart_backend), guard(polar_backend)

    def run(i):
        try:
            return segment_slice(scan.slices[i], cart_backend, polar_backend, cfg,
                                 Query(scan.scan_id, i))
        except Exception as exc:
            raise SliceError(i, exc) from exc

    if workers <= 1:
        return [run(i) for i in range(len(scan))]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, range(len(scan))))
