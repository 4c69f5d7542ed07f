"""Detector checkpoints.

Layout: the 8-byte magic ``MMRDET01``, a little-endian uint64 header length,
the UTF-8 JSON header, then the tensors as little-endian float32 blobs at the
offsets listed in the header (offsets are relative to the start of the blob
section).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import ArtifactIOError, ValidationError
from .model import DetectorConfig, DetectorParams

MAGIC = b"MMRDET01"


def dumps_checkpoint(params: DetectorParams, extra: dict | None = None) -> bytes:
    directory, blobs, offset = [], [], 0
    for name in sorted(params.weights):
        arr = np.ascontiguousarray(params.weights[name], dtype="<f4")
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "config": params.config.to_dict(),
        "alphabet": "".join(params.alphabet),
        "image_shape": list(params.image_shape),
        "n_events": params.n_events,
        "train_seed": params.train_seed,
        "tensors": directory,
        "extra": extra or {},
    }
    head = json.dumps(header, ensure_ascii=False, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)


def loads_checkpoint(buf: bytes) -> DetectorParams:
    if buf[:8] != MAGIC:
        raise ValidationError("not a detector checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    header = json.loads(buf[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    weights = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        if start + 4 * count > len(buf):
            raise ValidationError(f"checkpoint truncated in tensor {entry['name']!r}")
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=start)
        weights[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    cfg = DetectorConfig.from_dict(header["config"])
    return DetectorParams(cfg, tuple(header["alphabet"]), tuple(header["image_shape"]), weights,
                          header["n_events"], header["train_seed"])


def save_checkpoint(params: DetectorParams, path: str | Path, extra: dict | None = None) -> None:
    Path(path).write_bytes(dumps_checkpoint(params, extra))


def load_checkpoint(path: str | Path) -> DetectorParams:
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise ArtifactIOError(f"checkpoint not found: {path}") from exc
    return loads_checkpoint(buf)
