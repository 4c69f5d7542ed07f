"""Dataset persistence: a JSON-lines manifest, a metadata file and one PPM per image.

Layout under the dataset directory::

    manifest.jsonl   {"id", "tokens", "label", "event", "image"} per line
    meta.json        {"alphabet": [...], "meta": {...}}
    images/<id>.ppm
"""
from __future__ import annotations

import json
from pathlib import Path

from ..errors import ArtifactIOError, ManifestParseError, ValidationError
from .data import Dataset, NewsSample
from .ppm import from_uint8, read_ppm, to_uint8, write_ppm

MANIFEST = "manifest.jsonl"
META = "meta.json"


def save_dataset(ds: Dataset, path: str | Path) -> Path:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in ds.samples:
        rel = f"images/{s.id}.ppm"
        write_ppm(root / rel, to_uint8(s.image))
        record = {"id": s.id, "tokens": s.tokens, "label": s.label, "event": s.event_id, "image": rel}
        lines.append(json.dumps(record, ensure_ascii=False))
    (root / MANIFEST).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    meta = {"alphabet": list(ds.alphabet), "meta": ds.meta}
    (root / META).write_text(json.dumps(meta, ensure_ascii=False, sort_keys=True, indent=1), encoding="utf-8")
    return root


def _parse_record(lineno: int, line: str) -> dict:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ManifestParseError(lineno, f"invalid JSON ({exc.msg})") from None
    if not isinstance(rec, dict):
        raise ManifestParseError(lineno, "record must be a JSON object")
    missing = {"id", "tokens", "label", "event", "image"} - rec.keys()
    if missing:
        raise ManifestParseError(lineno, f"missing fields {sorted(missing)}")
    if rec["label"] not in (0, 1) or isinstance(rec["label"], bool):
        raise ManifestParseError(lineno, f"label must be 0 or 1, got {rec['label']!r}")
    if not isinstance(rec["event"], int) or isinstance(rec["event"], bool) or rec["event"] < 0:
        raise ManifestParseError(lineno, f"event must be a non-negative integer, got {rec['event']!r}")
    if not isinstance(rec["tokens"], str) or not isinstance(rec["id"], str):
        raise ManifestParseError(lineno, "id and tokens must be strings")
    return rec


def load_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    manifest = root / MANIFEST
    try:
        text = manifest.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ArtifactIOError(f"manifest not found: {manifest}") from exc
    alphabet, meta = None, {}
    if (root / META).exists():
        info = json.loads((root / META).read_text(encoding="utf-8"))
        alphabet, meta = tuple(info["alphabet"]), info.get("meta", {})
    samples = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        rec = _parse_record(lineno, line)
        img_path = root / rec["image"]
        if not img_path.exists():
            raise ArtifactIOError(f"manifest line {lineno}: image file not found: {img_path}")
        try:
            sample = NewsSample(rec["id"], rec["tokens"], from_uint8(read_ppm(img_path)),
                                rec["label"], rec["event"])
        except ValidationError as exc:
            raise ManifestParseError(lineno, str(exc)) from None
        samples.append(sample)
    if alphabet is None:
        return Dataset(tuple(samples), meta=meta)
    return Dataset(tuple(samples), alphabet, meta)
