"""Raster helpers: bilinear sampling, cartesian/polar resampling and resizing.

Images are plain 2D numpy arrays (``float64`` for intensities and
probability maps, ``bool`` for masks) indexed ``[row, col]``.

Polar rasters put the radius on rows (row 0 sits on the origin, the last
row on ``max_radius``) and the angle on columns. Angle 0 points to the
right (+col) and grows counter-clockwise as seen on screen, i.e. towards
decreasing row index.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_BINS = 256


@dataclass(frozen=True)
class PolarGeometry:
    origin_row: float
    origin_col: float
    radial_bins: int = DEFAULT_BINS
    angular_bins: int = DEFAULT_BINS
    max_radius: float = 1.0

    def __post_init__(self):
        if self.radial_bins < 2 or self.angular_bins < 2:
            raise ValueError("radial_bins and angular_bins must be >= 2")
        if not (self.max_radius > 0 and math.isfinite(self.max_radius)):
            raise ValueError(f"max_radius must be positive, got {self.max_radius}")
        if not (math.isfinite(self.origin_row) and math.isfinite(self.origin_col)):
            raise ValueError("polar origin must be finite")

    @property
    def origin(self) -> tuple[float, float]:
        return (self.origin_row, self.origin_col)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.radial_bins, self.angular_bins)

    def radii(self) -> np.ndarray:
        return np.arange(self.radial_bins) * (self.max_radius / (self.radial_bins - 1))

    def angles(self) -> np.ndarray:
        return np.arange(self.angular_bins) * (2.0 * np.pi / self.angular_bins)


def default_geometry(origin, shape, radial_bins=DEFAULT_BINS, angular_bins=DEFAULT_BINS):
    """Geometry whose max radius reaches the farthest pixel-centre corner."""
    r0, c0 = float(origin[0]), float(origin[1])
    h, w = shape
    corners = [(0, 0), (0, w - 1), (h - 1, 0), (h - 1, w - 1)]
    far = max(math.hypot(r - r0, c - c0) for r, c in corners)
    return PolarGeometry(r0, c0, radial_bins, angular_bins, max(far, 1.0))


def as_image(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2D raster, got shape {arr.shape}")
    return arr


def sample_bilinear_many(img, rows, cols, pad=0.0, wrap_cols=False) -> np.ndarray:
    """Vectorised bilinear sampling at fractional ``(rows, cols)``.

    Neighbours that fall outside the raster contribute ``pad``. With
    ``wrap_cols`` the column axis is periodic, which is what the angular
    axis of a polar raster needs.
    """
    img = as_image(img)
    h, w = img.shape
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    r0 = np.floor(rows)
    c0 = np.floor(cols)
    fr = rows - r0
    fc = cols - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)

    def tap(r, c):
        if wrap_cols:
            c = np.mod(c, w)
            ok = (r >= 0) & (r < h)
        else:
            ok = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        out = np.full(r.shape, pad, dtype=np.float64)
        out[ok] = img[r[ok], c[ok]]
        return out

    v00 = tap(r0, c0)
    v01 = tap(r0, c0 + 1)
    v10 = tap(r0 + 1, c0)
    v11 = tap(r0 + 1, c0 + 1)
    # lerp form keeps constants exact
    top = v00 + (v01 - v00) * fc
    bot = v10 + (v11 - v10) * fc
    return top + (bot - top) * fr


def sample_bilinear(img, row: float, col: float, pad: float = 0.0) -> float:
    return float(sample_bilinear_many(img, np.array([row]), np.array([col]), pad)[0])


def sample_nearest_many(img, rows, cols, pad=0, wrap_cols=False) -> np.ndarray:
    """Nearest-neighbour sampling; ties round half-up."""
    arr = np.asarray(img)
    h, w = arr.shape
    r = np.floor(np.asarray(rows, dtype=np.float64) + 0.5).astype(np.int64)
    c = np.floor(np.asarray(cols, dtype=np.float64) + 0.5).astype(np.int64)
    if wrap_cols:
        c = np.mod(c, w)
        ok = (r >= 0) & (r < h)
    else:
        ok = (r >= 0) & (r < h) & (c >= 0) & (c < w)
    out = np.full(r.shape, pad, dtype=arr.dtype)
    out[ok] = arr[r[ok], c[ok]]
    return out


def polar_sample_points(geom: PolarGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Cartesian (row, col) of every polar raster cell."""
    rad = geom.radii()[:, None]
    theta = geom.angles()[None, :]
    rows = geom.origin_row - rad * np.sin(theta)
    cols = geom.origin_col + rad * np.cos(theta)
    return rows, cols


def cart_to_polar(img, geom: PolarGeometry, pad=0.0, mode="bilinear") -> np.ndarray:
    rows, cols = polar_sample_points(geom)
    if mode == "nearest":
        src = np.asarray(img)
        if src.ndim != 2:
            raise ValueError(f"expected a 2D raster, got shape {src.shape}")
        return sample_nearest_many(src, rows, cols, pad=src.dtype.type(pad))
    if mode != "bilinear":
        raise ValueError(f"unknown interpolation mode {mode!r}")
    return sample_bilinear_many(img, rows, cols, pad)


def cart_to_polar_coords(geom: PolarGeometry, out_h: int, out_w: int):
    """Fractional polar (row, col) for each cartesian pixel, plus radius."""
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    dy = geom.origin_row - ys
    dx = xs - geom.origin_col
    radius = np.hypot(dx, dy)
    theta = np.mod(np.arctan2(dy, dx), 2.0 * np.pi)
    prow = radius * ((geom.radial_bins - 1) / geom.max_radius)
    pcol = theta * (geom.angular_bins / (2.0 * np.pi))
    return prow, pcol, radius


def polar_to_cart(polar, geom: PolarGeometry, out_h: int, out_w: int, pad=0.0,
                  mode="bilinear") -> np.ndarray:
    polar = np.asarray(polar)
    if polar.shape != geom.shape:
        raise ValueError(f"polar raster shape {polar.shape} does not match geometry {geom.shape}")
    prow, pcol, radius = cart_to_polar_coords(geom, out_h, out_w)
    if mode == "nearest":
        out = sample_nearest_many(polar, prow, pcol, pad=polar.dtype.type(pad), wrap_cols=True)
    elif mode == "bilinear":
        out = sample_bilinear_many(polar, prow, pcol, pad, wrap_cols=True)
    else:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    out[radius > geom.max_radius] = pad
    return out


def _source_coords(n_in: int, n_out: int) -> np.ndarray:
    # align_corners=False convention
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def resize(img, out_h: int, out_w: int, mode: str = "bilinear") -> np.ndarray:
    """Resample to ``out_h x out_w``. Use ``nearest`` for masks."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target shape must be positive, got {(out_h, out_w)}")
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2D raster, got shape {arr.shape}")
    h, w = arr.shape
    if mode == "nearest":
        ri = np.clip(np.floor((np.arange(out_h) + 0.5) * (h / out_h)).astype(np.int64), 0, h - 1)
        ci = np.clip(np.floor((np.arange(out_w) + 0.5) * (w / out_w)).astype(np.int64), 0, w - 1)
        return arr[np.ix_(ri, ci)].copy()
    if mode != "bilinear":
        raise ValueError(f"unknown interpolation mode {mode!r}")
    arr = arr.astype(np.float64)
    rs = np.clip(_source_coords(h, out_h), 0, h - 1)
    cs = np.clip(_source_coords(w, out_w), 0, w - 1)
    r0 = np.minimum(np.floor(rs).astype(np.int64), h - 1)
    c0 = np.minimum(np.floor(cs).astype(np.int64), w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rs - r0)[:, None]
    fc = (cs - c0)[None, :]
    top = arr[np.ix_(r0, c0)] + (arr[np.ix_(r0, c1)] - arr[np.ix_(r0, c0)]) * fc
    bot = arr[np.ix_(r1, c0)] + (arr[np.ix_(r1, c1)] - arr[np.ix_(r1, c0)]) * fc
    return top + (bot - top) * fr
