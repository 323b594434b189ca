"""CTA slice preprocessing, training augmentation and the polar dataset builder."""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ccomp, imgcore, pgm
from .scan import ScanRecord


@dataclass(frozen=True)
class PreprocessConfig:
    hu_low: float = 200.0
    hu_high: float = 500.0
    out_low: float = -0.5
    out_high: float = 0.5
    global_mean: float = 0.0
    target_h: int = 256
    target_w: int = 256

    def __post_init__(self):
        if not self.hu_low < self.hu_high:
            raise ValueError("hu_low must be below hu_high")
        if not self.out_low < self.out_high:
            raise ValueError("out_low must be below out_high")


@dataclass(frozen=True)
class AugmentConfig:
    affine_prob: float = 0.5
    max_shift_frac: float = 0.0625
    max_scale_frac: float = 0.10
    max_rot_deg: float = 15.0
    hflip_prob: float = 0.3
    jitter_prob: float = 0.3
    jitter_max_px: int = 3
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("affine_prob", "hflip_prob", "jitter_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")
        if self.jitter_max_px < 0:
            raise ValueError("jitter_max_px must be >= 0")


@dataclass(frozen=True)
class PolarSample:
    polar_image: np.ndarray
    polar_label: np.ndarray
    geometry: imgcore.PolarGeometry
    source_scan: str
    source_slice: int
    source_component: int


def range_map(hu, cfg: PreprocessConfig) -> np.ndarray:
    """Window to ``[hu_low, hu_high]`` and map affinely onto ``[out_low, out_high]``."""
    clipped = np.clip(np.asarray(hu, dtype=np.float64), cfg.hu_low, cfg.hu_high)
    frac = (clipped - cfg.hu_low) / (cfg.hu_high - cfg.hu_low)
    return cfg.out_low + frac * (cfg.out_high - cfg.out_low)


def window_and_normalize(hu, cfg: PreprocessConfig) -> np.ndarray:
    return range_map(hu, cfg) - cfg.global_mean


def compute_global_mean(slices) -> float:
    """Mean over every pixel of already range-mapped slices."""
    total = 0.0
    count = 0
    for s in slices:
        s = np.asarray(s, dtype=np.float64)
        total += math.fsum(s.ravel())
        count += s.size
    if count == 0:
        raise ValueError("global mean needs at least one non-empty slice")
    return total / count


def preprocess_slice(hu, cfg: PreprocessConfig) -> np.ndarray:
    out = window_and_normalize(hu, cfg)
    if out.shape != (cfg.target_h, cfg.target_w):
        out = imgcore.resize(out, cfg.target_h, cfg.target_w, "bilinear")
    return out


def preprocess_scan(scan: ScanRecord, cfg: PreprocessConfig) -> ScanRecord:
    """Windowed, mean-centred and resized copy of ``scan`` (truth resized nearest)."""
    slices = np.stack([preprocess_slice(s, cfg) for s in scan.slices])
    truth = None
    if scan.truth is not None:
        truth = np.stack([imgcore.resize(t, cfg.target_h, cfg.target_w, "nearest") for t in scan.truth])
    return ScanRecord(scan.scan_id, slices, truth, scan.spacing)


def scan_global_mean(scans, cfg: PreprocessConfig) -> float:
    return compute_global_mean(range_map(s, cfg) for scan in scans for s in scan.slices)


def _affine_warp(img, mask, scale, rot_deg, shift_r, shift_c):
    h, w = img.shape
    cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    # invert p' = R(s (p - c)) + c + t
    dy = ys - cr - shift_r
    dx = xs - cc - shift_c
    t = math.radians(rot_deg)
    cos_t, sin_t = math.cos(t), math.sin(t)
    src_r = cr + (cos_t * dy - sin_t * dx) / scale
    src_c = cc + (sin_t * dy + cos_t * dx) / scale
    img_out = imgcore.sample_bilinear_many(img, src_r, src_c, pad=0.0)
    mask_out = imgcore.sample_nearest_many(mask, src_r, src_c, pad=False)
    return img_out, mask_out


def augment_pair(img, mask, cfg: AugmentConfig, rng: np.random.Generator):
    """Random affine (scale, rotate, shift) and horizontal flip of an image/mask pair.

    Every parameter is drawn on every call so the random stream advances the
    same way whichever branches fire.
    """
    img = imgcore.as_image(img)
    mask = np.asarray(mask, dtype=bool)
    if img.shape != mask.shape:
        raise ValueError(f"image {img.shape} and mask {mask.shape} differ in shape")
    h, w = img.shape
    do_affine = rng.random() < cfg.affine_prob
    scale = rng.uniform(1.0 - cfg.max_scale_frac, 1.0 + cfg.max_scale_frac)
    rot = rng.uniform(-cfg.max_rot_deg, cfg.max_rot_deg)
    shift_r = rng.uniform(-cfg.max_shift_frac, cfg.max_shift_frac) * h
    shift_c = rng.uniform(-cfg.max_shift_frac, cfg.max_shift_frac) * w
    do_flip = rng.random() < cfg.hflip_prob

    out_img, out_mask = img.copy(), mask.copy()
    if do_affine:
        out_img, out_mask = _affine_warp(out_img, out_mask, scale, rot, shift_r, shift_c)
    if do_flip:
        out_img, out_mask = out_img[:, ::-1].copy(), out_mask[:, ::-1].copy()
    return out_img, out_mask


def jitter_origin(origin, cfg: AugmentConfig, rng: np.random.Generator):
    """Shift an origin by integer offsets in ``[-jitter_max_px, jitter_max_px]``.

    A jittered origin is first rounded half-up to the pixel grid.
    Returns ``(origin, jittered)``.
    """
    if cfg.jitter_prob <= 0 or cfg.jitter_max_px == 0:
        return (float(origin[0]), float(origin[1])), False
    if rng.random() >= cfg.jitter_prob:
        return (float(origin[0]), float(origin[1])), False
    dr, dc = rng.integers(-cfg.jitter_max_px, cfg.jitter_max_px + 1, size=2)
    return (math.floor(origin[0] + 0.5) + float(dr), math.floor(origin[1] + 0.5) + float(dc)), True


def sample_rng(run_seed: int, scan_id: str, slice_index: int, component: int) -> np.random.Generator:
    """Per-sample generator, independent of worker scheduling."""
    key = [int(run_seed) & 0xFFFFFFFF, zlib.crc32(scan_id.encode("utf-8")), int(slice_index), int(component)]
    return np.random.default_rng(np.random.SeedSequence(key))


def build_polar_dataset(scans, cfg: AugmentConfig | None = None, radial_bins=imgcore.DEFAULT_BINS,
                        angular_bins=imgcore.DEFAULT_BINS, connectivity=8, jitter=True):
    """One polar sample per ground-truth component, centred on its centroid.

    The polar label is the transform of the whole slice mask, so other
    components stay visible in every sample.
    """
    cfg = cfg or AugmentConfig()
    samples = []
    for scan in scans:
        if scan.truth is None:
            raise ValueError(f"scan {scan.scan_id!r} has no ground truth")
        for si, (img, truth) in enumerate(zip(scan.slices, scan.truth)):
            lm = ccomp.label_components(truth, connectivity)
            for comp in lm.components:
                origin = comp.centroid
                if jitter:
                    rng = sample_rng(cfg.rng_seed, scan.scan_id, si, comp.label)
                    origin, _ = jitter_origin(origin, cfg, rng)
                geom = imgcore.default_geometry(origin, truth.shape, radial_bins, angular_bins)
                samples.append(PolarSample(
                    polar_image=imgcore.cart_to_polar(img, geom, pad=0.0),
                    polar_label=imgcore.cart_to_polar(truth, geom, pad=False, mode="nearest"),
                    geometry=geom,
                    source_scan=scan.scan_id,
                    source_slice=si,
                    source_component=comp.label,
                ))
    return samples


def export_polar_dataset(samples, out_dir) -> Path:
    """Write PGM pairs per sample plus a key=value manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        scan_dir = out_dir / s.source_scan
        scan_dir.mkdir(exist_ok=True)
        stem = f"{s.source_slice}_{s.source_component}"
        lo = float(s.polar_image.min())
        hi = float(s.polar_image.max())
        span = hi - lo if hi > lo else 1.0
        q = np.round((s.polar_image - lo) / span * 65535.0).astype(np.int64)
        mapping = f"value = {lo!r} + pixel * {span!r} / 65535"
        pgm.write_pgm(scan_dir / f"{stem}.img.pgm", q, 65535, comments=(mapping,))
        pgm.write_pgm(scan_dir / f"{stem}.lbl.pgm", s.polar_label.astype(np.int64) * 255, 255)
        g = s.geometry
        lines.append(" ".join([
            f"scan={s.source_scan}", f"slice={s.source_slice}", f"component={s.source_component}",
            f"image={s.source_scan}/{stem}.img.pgm", f"label={s.source_scan}/{stem}.lbl.pgm",
            f"origin_row={g.origin_row!r}", f"origin_col={g.origin_col!r}",
            f"radial_bins={g.radial_bins}", f"angular_bins={g.angular_bins}",
            f"max_radius={g.max_radius!r}", f"intensity_low={lo!r}", f"intensity_span={span!r}",
        ]))
    manifest = out_dir / "manifest.txt"
    manifest.write_text("".join(line + "\n" for line in lines))
    return manifest
