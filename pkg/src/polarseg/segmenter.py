"""Segmentation backends: anything that maps image batches to probability maps."""
from __future__ import annotations

import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import imgcore


class ConfigurationError(ValueError):
    """Backend and pipeline disagree on shapes or settings."""


class BackendFault(RuntimeError):
    """A backend produced unusable output."""


class ModelLoadError(OSError):
    pass


@dataclass(frozen=True)
class Query:
    """Where a batch item came from. Oracle backends need it; others ignore it."""

    scan_id: str | None = None
    slice_index: int | None = None
    geometry: imgcore.PolarGeometry | None = None


class SegmenterBackend:
    name = "backend"
    input_space = "cartesian"
    thread_safe = True
    expected_shape: tuple[int, int] | None = None

    def _predict(self, batch: list[np.ndarray], queries: list[Query]) -> list[np.ndarray]:
        raise NotImplementedError

    def predict(self, batch, queries=None) -> list[np.ndarray]:
        """Probability maps in [0, 1], one per input image.

        Inputs are never modified. Raises ``ConfigurationError`` on a shape
        mismatch and ``BackendFault`` on non-finite or out-of-range output.
        """
        batch = [imgcore.as_image(b) for b in batch]
        if not batch:
            return []
        if queries is None:
            queries = [Query()] * len(batch)
        if len(queries) != len(batch):
            raise ConfigurationError("one query per batch item is required")
        for img in batch:
            if self.expected_shape is not None and img.shape != tuple(self.expected_shape):
                raise ConfigurationError(
                    f"{self.name}: input shape {img.shape} != expected {tuple(self.expected_shape)}")
        out = self._predict([b.copy() for b in batch], list(queries))
        checked = []
        for img, prob in zip(batch, out):
            prob = np.asarray(prob, dtype=np.float64)
            if prob.shape != img.shape:
                raise BackendFault(f"{self.name}: output shape {prob.shape} != input {img.shape}")
            if not np.all(np.isfinite(prob)):
                raise BackendFault(f"{self.name}: non-finite values in output")
            if prob.min() < 0.0 or prob.max() > 1.0:
                raise BackendFault(f"{self.name}: output outside [0, 1]")
            checked.append(prob)
        return checked


class OracleBackend(SegmenterBackend):
    """Answers with the ground truth of the queried slice.

    In polar space the truth mask is transformed with the query's geometry
    (nearest neighbour), so geometry bookkeeping is exercised for real.
    """

    name = "oracle"

    def __init__(self, truth: dict, input_space: str = "cartesian"):
        if input_space not in ("cartesian", "polar"):
            raise ConfigurationError(f"unknown input space {input_space!r}")
        self.truth = truth
        self.input_space = input_space

    def _lookup(self, q: Query) -> np.ndarray:
        try:
            return np.asarray(self.truth[(q.scan_id, q.slice_index)], dtype=bool)
        except KeyError:
            raise ConfigurationError(
                f"oracle has no ground truth for scan={q.scan_id!r} slice={q.slice_index!r}") from None

    def _predict(self, batch, queries):
        out = []
        for img, q in zip(batch, queries):
            mask = self._lookup(q)
            if self.input_space == "polar":
                if q.geometry is None:
                    raise ConfigurationError("polar oracle needs the query geometry")
                mask = imgcore.cart_to_polar(mask, q.geometry, pad=False, mode="nearest")
            if mask.shape != img.shape:
                raise ConfigurationError(f"oracle truth shape {mask.shape} != input {img.shape}")
            out.append(mask.astype(np.float64))
        return out


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    return x * x + y * y <= r * r


def classical_segment(img, intensity_low=-np.inf, intensity_high=np.inf, opening_radius=0) -> np.ndarray:
    """Band threshold followed by a binary opening with a disk."""
    img = imgcore.as_image(img)
    band = (img >= intensity_low) & (img <= intensity_high)
    if opening_radius > 0:
        band = ndimage.binary_opening(band, structure=disk(opening_radius))
    return band.astype(np.float64)


class ClassicalBackend(SegmenterBackend):
    """Intensity band + morphological opening; a stand-in for a trained network."""

    name = "classical"

    def __init__(self, intensity_low=0.25, intensity_high=np.inf, opening_radius=1,
                 input_space="cartesian"):
        self.intensity_low = float(intensity_low)
        self.intensity_high = float(intensity_high)
        self.opening_radius = int(opening_radius)
        self.input_space = input_space

    def _predict(self, batch, queries):
        return [classical_segment(b, self.intensity_low, self.intensity_high, self.opening_radius)
                for b in batch]


class ExternalModelBackend(SegmenterBackend):
    """Runs an exported network (ONNX, NCHW float32, one input, one output).

    Set the model metadata key ``output_kind`` to ``logits`` when the graph
    emits raw scores; they are squashed with a logistic. Anything else must
    already be a probability.
    """

    name = "model"

    def __init__(self, model_path, input_space="cartesian", shape=(256, 256)):
        self.model_path = Path(model_path)
        self.input_space = input_space
        self.expected_shape = tuple(shape)
        try:
            import onnxruntime as ort
        except ImportError as exc:  # pragma: no cover - depends on the environment
            raise ModelLoadError(f"{self.model_path}: onnxruntime is not installed") from exc
        if not self.model_path.is_file():
            raise ModelLoadError(f"{self.model_path}: model file not found")
        try:
            self.session = ort.InferenceSession(str(self.model_path), providers=["CPUExecutionProvider"])
        except Exception as exc:
            raise ModelLoadError(f"{self.model_path}: cannot load model ({exc})") from exc
        inputs = self.session.get_inputs()
        outputs = self.session.get_outputs()
        if len(inputs) != 1 or len(outputs) != 1:
            raise ConfigurationError(f"{self.model_path}: expected a single-input, single-output model")
        self._input_name = inputs[0].name
        self._check_shape("input", inputs[0].shape)
        self._check_shape("output", outputs[0].shape)
        if inputs[0].type != "tensor(float)":
            raise ConfigurationError(f"{self.model_path}: input must be float32, got {inputs[0].type}")
        meta = self.session.get_modelmeta().custom_metadata_map
        self.raw_scores = meta.get("output_kind", "probability") == "logits"
        self._lock = threading.Lock()

    def _check_shape(self, which, shape):
        h, w = self.expected_shape
        if len(shape) != 4:
            raise ConfigurationError(f"{self.model_path}: {which} must be NCHW, got {shape}")
        n, c, sh, sw = shape
        if not (isinstance(n, str) or n is None or (isinstance(n, int) and n >= 1)):
            raise ConfigurationError(f"{self.model_path}: bad batch dimension {n!r}")
        if (c, sh, sw) != (1, h, w):
            raise ConfigurationError(
                f"{self.model_path}: {which} shape {shape} does not match pipeline (N, 1, {h}, {w})")
        self._fixed_batch = n if isinstance(n, int) else None

    def _predict(self, batch, queries):
        x = np.stack(batch).astype(np.float32)[:, None]
        fixed = self._fixed_batch
        outs = []
        chunks = [x[i:i + fixed] for i in range(0, len(x), fixed)] if fixed else [x]
        for chunk in chunks:
            if fixed and len(chunk) != fixed:
                raise ConfigurationError(f"{self.model_path}: model needs batches of exactly {fixed}")
            with self._lock:
                y = self.session.run(None, {self._input_name: chunk})[0]
            outs.append(np.asarray(y, dtype=np.float64)[:, 0])
        y = np.concatenate(outs)
        if not np.all(np.isfinite(y)):
            raise BackendFault(f"{self.model_path}: model produced non-finite values")
        if self.raw_scores:
            y = 1.0 / (1.0 + np.exp(-y))
        elif y.min() < 0.0 or y.max() > 1.0:
            raise BackendFault(
                f"{self.model_path}: output outside [0, 1] and model does not declare output_kind=logits")
        return list(y)


def make_backend(spec: str, input_space: str, truth: dict | None = None, **classical) -> SegmenterBackend:
    """Build a backend from a CLI spec: ``oracle``, ``classical`` or ``model:<path>``."""
    if spec == "oracle":
        if truth is None:
            raise ConfigurationError("the oracle backend needs ground-truth labels")
        return OracleBackend(truth, input_space)
    if spec == "classical":
        return ClassicalBackend(input_space=input_space, **classical)
    if spec.startswith("model:"):
        return ExternalModelBackend(spec[len("model:"):], input_space)
    raise ConfigurationError(f"unknown backend {spec!r}; use oracle, classical or model:<path>")
