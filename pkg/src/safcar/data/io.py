"""On-disk clip and dataset format.

A clip directory holds ``meta.json``, ``tracks.json`` and ``frames.bin``; the
latter is the magic ``SFCR``, a u32 format version, ``T, H, W, C`` as u32 and
then row-major little-endian float32 samples.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .synth import NOUNS, VERBS, ClipRecord

MAGIC = b"SFCR"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


def write_clip(clip: ClipRecord, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    t, h, w, c = clip.frames.shape
    meta = {
        "verb_id": int(clip.verb_id),
        "noun_id": int(clip.noun_id),
        "verb": VERBS[clip.verb_id],
        "noun": NOUNS[clip.noun_id].name,
        "seed": int(clip.seed),
        "dims": [t, h, w],
        "format_version": FORMAT_VERSION,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=1))
    rows = [
        [[float(x1), float(y1), float(x2), float(y2), int(oid), int(p)] for x1, y1, x2, y2, oid, p in frame]
        for frame in clip.tracks
    ]
    (d / "tracks.json").write_text(json.dumps({"tracks": rows}))
    payload = np.ascontiguousarray(clip.frames, dtype="<f4").tobytes()
    (d / "frames.bin").write_bytes(_HEADER.pack(MAGIC, FORMAT_VERSION, t, h, w, c) + payload)
    return d


def read_frames(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: header truncated ({len(raw)} bytes)", offset=len(raw))
    magic, version, t, h, w, c = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}", offset=4)
    if min(t, h, w, c) < 1:
        raise FormatError(f"{path}: zero extent in dims {(t, h, w, c)}", offset=8)
    expected = t * h * w * c * 4
    got = len(raw) - _HEADER.size
    if got != expected:
        raise FormatError(
            f"{path}: payload has {got} bytes, header dims {(t, h, w, c)} need {expected}",
            offset=_HEADER.size + min(got, expected),
        )
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(t, h, w, c).astype(np.float32)


def read_clip(directory) -> ClipRecord:
    d = Path(directory)
    try:
        meta = json.loads((d / "meta.json").read_text())
        rows = json.loads((d / "tracks.json").read_text())["tracks"]
    except (OSError, ValueError, KeyError) as e:
        raise FormatError(f"{d}: unreadable metadata: {e}") from e
    if meta.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{d}/meta.json: unsupported format version {meta.get('format_version')}")
    frames = read_frames(d / "frames.bin")
    if list(frames.shape[:3]) != list(meta["dims"]):
        raise FormatError(f"{d}: frames dims {frames.shape[:3]} disagree with meta dims {meta['dims']}", offset=8)
    tracks = np.asarray(rows, dtype=np.float64)
    if tracks.ndim != 3 or tracks.shape[0] != frames.shape[0] or tracks.shape[2] != 6:
        raise FormatError(f"{d}/tracks.json: shape {tracks.shape} does not match {frames.shape[0]} frames")
    return ClipRecord(frames, tracks, int(meta["verb_id"]), int(meta["noun_id"]), int(meta["seed"]))


def write_index(root, entries) -> Path:
    """``entries``: dicts with ``id``, ``dir``, ``verb_id``, ``noun_id``, ``seed``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    path = root / "index.json"
    path.write_text(json.dumps({"format_version": FORMAT_VERSION, "clips": list(entries)}, indent=1))
    return path


def read_index(root) -> list[dict]:
    path = Path(root) / "index.json"
    try:
        data = json.loads(path.read_text())
        return data["clips"]
    except (OSError, ValueError, KeyError) as e:
        raise FormatError(f"{path}: unreadable dataset index: {e}") from e
