"""Minimal binary PGM (P5) reader/writer for dataset exports and debug dumps."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def write_pgm(path, data: np.ndarray, maxval: int = 255, comments=()) -> None:
    data = np.asarray(data)
    if data.ndim != 2:
        raise ValueError("PGM holds a single 2D raster")
    if not 0 < maxval < 65536:
        raise ValueError(f"bad PGM maxval {maxval}")
    if data.size and (data.min() < 0 or data.max() > maxval):
        raise ValueError(f"PGM values must lie in [0, {maxval}]")
    h, w = data.shape
    header = "P5\n"
    for c in comments:
        header += f"# {c}\n"
    header += f"{w} {h}\n{maxval}\n"
    dtype = ">u2" if maxval > 255 else "u1"
    Path(path).write_bytes(header.encode("ascii") + data.astype(dtype).tobytes())


def read_pgm(path) -> tuple[np.ndarray, list[str]]:
    """Return the raster and the header comments."""
    raw = Path(path).read_bytes()
    tokens, comments = [], []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            end = raw.index(b"\n", pos)
            comments.append(raw[pos + 1:end].decode("ascii").strip())
            pos = end + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    pos += 1  # single whitespace before the raster
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return data.astype(np.int64), comments
