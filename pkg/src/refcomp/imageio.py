"""Binary PPM/PGM image files.

Images are (3, H, W) float arrays in [0, 1] quantized to 8-bit levels
(k/255); masks are (H, W) binary floats stored as 0/255.  Round trips are
exact for arrays already on those grids.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap a [0, 1] float image onto the 8-bit grid (values k/255)."""
    levels = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255)
    return (levels / 255.0).astype(np.float32)


def _to_bytes(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[0] != 3:
        raise ImageFormatError(f"expected (3, H, W) image, got {img.shape}")
    _, h, w = img.shape
    data = _to_bytes(img).transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data)


def write_pgm(path, mask: np.ndarray) -> None:
    if mask.ndim != 2:
        raise ImageFormatError(f"expected (H, W) mask, got {mask.shape}")
    h, w = mask.shape
    data = _to_bytes(mask).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data)


def _read_header(blob: bytes, magic: bytes, path) -> tuple[int, int, int]:
    if not blob.startswith(magic):
        raise ImageFormatError(f"{path}: expected {magic.decode()} file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit files supported, maxval {maxval}")
    return w, h, pos


def read_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    w, h, pos = _read_header(blob, b"P6", path)
    if len(blob) - pos < 3 * w * h:
        raise ImageFormatError(f"{path}: truncated pixel data")
    raw = np.frombuffer(blob, dtype=np.uint8, count=3 * w * h, offset=pos)
    img = raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0
    return img.astype(np.float32)


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    w, h, pos = _read_header(blob, b"P5", path)
    if len(blob) - pos < w * h:
        raise ImageFormatError(f"{path}: truncated pixel data")
    raw = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos)
    return (raw.reshape(h, w).astype(np.float32) / 255.0).astype(np.float32)


def read_mask(path) -> np.ndarray:
    """Read a PGM mask back to binary {0, 1} floats."""
    raw = read_pgm(path)
    return (raw > 0.5).astype(np.float32)
