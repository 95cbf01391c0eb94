"""Binary PGM (P5, 8-bit) image files: the mandatory, bit-exact image format."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_pgm(img: np.ndarray, path) -> None:
    """Quantize a [0,1] grayscale image to 8 bits and write P5."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"PGM needs a 2-d image, got shape {arr.shape}")
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + q.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P5 file back as a [0,1] float32 image."""
    blob = Path(path).read_bytes()
    parts = []
    pos = 0
    while len(parts) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":  # comment line
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        parts.append(blob[start:pos])
    if parts[0] != b"P5":
        raise ValueError(f"not a binary PGM file: magic {parts[0]!r}")
    width, height, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"only 8-bit PGM supported, maxval {maxval}")
    pos += 1  # single whitespace after maxval
    data = np.frombuffer(blob[pos:pos + width * height], dtype=np.uint8)
    if data.size != width * height:
        raise ValueError("truncated PGM payload")
    return (data.reshape(height, width).astype(np.float32) / 255.0)
