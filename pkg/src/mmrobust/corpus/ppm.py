"""Binary PPM (P6) reading and writing for 8-bit RGB images."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import ArtifactIOError, ValidationError


def write_ppm(path: str | Path, pixels: np.ndarray) -> None:
    """Write ``pixels`` (``uint8[H, W, 3]``) as a P6 file with maxval 255."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValidationError(f"expected uint8[H, W, 3], got {pixels.dtype}{list(pixels.shape)}")
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(pixels).tobytes())


def _tokens(buf: bytes, pos: int, count: int) -> tuple[list[bytes], int]:
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValidationError("truncated PPM header")
        out.append(buf[start:pos])
    return out, pos


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a P6 file into ``uint8[H, W, 3]``."""
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise ArtifactIOError(f"image file not found: {path}") from exc
    if buf[:2] != b"P6":
        raise ValidationError(f"{path}: not a binary PPM (P6) file")
    (w, h, maxval), pos = _tokens(buf, 2, 3)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValidationError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    size = w * h * 3
    data = buf[pos:pos + size]
    if len(data) != size:
        raise ValidationError(f"{path}: expected {size} pixel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def to_uint8(image: np.ndarray) -> np.ndarray:
    """``float[3, H, W]`` in [0, 1] -> ``uint8[H, W, 3]`` (round to nearest)."""
    q = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return q.transpose(1, 2, 0)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    return (pixels.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)).astype(np.float32)
