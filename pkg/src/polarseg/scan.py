from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ScanRecord:
    """An axial slice stack with optional per-slice ground truth.

    ``slices`` is a ``(n, h, w)`` float array and ``truth`` a matching bool
    array. ``spacing`` is ``(row_mm, col_mm, slice_mm)``.
    """

    scan_id: str
    slices: np.ndarray
    truth: np.ndarray | None = None
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.slices = np.asarray(self.slices, dtype=np.float64)
        if self.slices.ndim != 3 or self.slices.shape[0] < 1:
            raise ValueError(f"scan {self.scan_id!r}: need at least one 2D slice, got shape {self.slices.shape}")
        if self.truth is not None:
            self.truth = np.asarray(self.truth, dtype=bool)
            if self.truth.shape != self.slices.shape:
                raise ValueError(
                    f"scan {self.scan_id!r}: truth shape {self.truth.shape} does not match slices {self.slices.shape}")

    def __len__(self) -> int:
        return self.slices.shape[0]

    @property
    def slice_shape(self) -> tuple[int, int]:
        return self.slices.shape[1:]
