"""Flat ``key=value`` run configuration and run manifests."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

from . import __version__
from .phantom import PhantomSpec
from .pipeline import FusionConfig
from .preproc import AugmentConfig, PreprocessConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    workers: int = 1
    # preprocessing
    hu_low: float = 200.0
    hu_high: float = 500.0
    out_low: float = -0.5
    out_high: float = 0.5
    target_h: int = 256
    target_w: int = 256
    mean_source: str = "auto"  # auto | fixed | input | train | validation
    global_mean: float = 0.0  # used when mean_source=fixed
    # cascade
    origin_weight: float = 2.0
    other_weight: float = 1.0
    binarize_threshold: float = 0.5
    hyst_low: float = 0.0
    hyst_high: float = 0.4
    connectivity: int = 8
    min_component_area: int = 4
    normalization: str = "max"
    polar_bins: int = 256
    # classical backend, preprocessed intensity units
    classical_low: float = 0.25
    classical_high: float = math.inf
    classical_radius: int = 1
    # evaluation
    folds: int = 3
    sweep_grid: str = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"
    # polar dataset builder
    affine_prob: float = 0.5
    max_shift_frac: float = 0.0625
    max_scale_frac: float = 0.10
    max_rot_deg: float = 15.0
    hflip_prob: float = 0.3
    jitter_prob: float = 0.3
    jitter_max_px: int = 3
    # phantom generator
    phantom_scans: int = 1
    phantom_slices: int = 16
    phantom_height: int = 256
    phantom_width: int = 256
    phantom_min_components: int = 1
    phantom_max_components: int = 3
    phantom_min_axis: float = 8.0
    phantom_max_axis: float = 24.0
    phantom_inside_hu: float = 400.0
    phantom_outside_hu: float = 100.0
    phantom_noise_sd: float = 0.0

    def with_overrides(self, pairs: dict) -> RunConfig:
        types = {f.name: f.type for f in fields(self)}
        parsed = {}
        for key, text in pairs.items():
            if key not in types:
                raise ConfigError(f"unknown configuration key {key!r}")
            parsed[key] = _coerce(key, str(text), getattr(self, key))
        return replace(self, **parsed)

    def lines(self) -> list[str]:
        return [f"{f.name}={_fmt(getattr(self, f.name))}" for f in fields(self)]

    def preprocess(self, global_mean: float = 0.0) -> PreprocessConfig:
        return PreprocessConfig(self.hu_low, self.hu_high, self.out_low, self.out_high,
                                global_mean, self.target_h, self.target_w)

    def fusion(self) -> FusionConfig:
        return FusionConfig(self.origin_weight, self.other_weight, self.binarize_threshold,
                            self.hyst_low, self.hyst_high, self.connectivity,
                            self.min_component_area, self.normalization, self.polar_bins)

    def augment(self) -> AugmentConfig:
        return AugmentConfig(self.affine_prob, self.max_shift_frac, self.max_scale_frac,
                             self.max_rot_deg, self.hflip_prob, self.jitter_prob,
                             self.jitter_max_px, self.seed)

    def classical(self) -> dict:
        return {"intensity_low": self.classical_low, "intensity_high": self.classical_high,
                "opening_radius": self.classical_radius}

    def phantom(self, seed: int) -> PhantomSpec:
        return PhantomSpec(
            height=self.phantom_height, width=self.phantom_width, n_slices=self.phantom_slices,
            min_components=self.phantom_min_components, max_components=self.phantom_max_components,
            min_axis=self.phantom_min_axis, max_axis=self.phantom_max_axis,
            inside_hu=self.phantom_inside_hu, outside_hu=self.phantom_outside_hu,
            noise_sd=self.phantom_noise_sd, seed=seed)

    def grid(self) -> list[float]:
        try:
            return [float(x) for x in self.sweep_grid.split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"bad sweep_grid {self.sweep_grid!r}") from None


def _coerce(key, text, current):
    try:
        if isinstance(current, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


def _fmt(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def parse_pairs(text: str, source: str = "<config>") -> dict:
    pairs = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = cfg.with_overrides(parse_pairs(Path(path).read_text(), str(path)))
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg


def digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path, command: str, cfg: RunConfig, inputs=(), outputs=(), extra=None) -> None:
    """Record everything that determines a run's outputs.

    Files are listed by name and content digest, never by absolute path or
    time, so identical runs produce identical manifests.
    """
    lines = [f"tool=polarseg {__version__}", f"command={command}", "orientation=as-stored"]
    lines += [f"config.{line}" for line in cfg.lines()]
    for key, value in sorted((extra or {}).items()):
        lines.append(f"{key}={_fmt(value)}")
    for p in inputs:
        lines.append(f"input.{Path(p).name}=sha256:{digest(p)}")
    for p in outputs:
        lines.append(f"output.{Path(p).name}=sha256:{digest(p)}")
    Path(path).write_text("".join(line + "\n" for line in lines))
