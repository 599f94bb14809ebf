"""In-memory clip collection with batched access for training."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from ..errors import DataError
from ..si import encode_detections
from .io import read_clip, read_index, write_clip, write_index
from .synth import DEFAULT_DIMS, NUM_SLOTS, generate_clip

# frames are quantized to k/255, so uint8 storage is lossless
_LUT = (np.arange(256) / 255.0).astype(np.float32)


def worker_count() -> int:
    env = os.environ.get("SAFCAR_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def _render(args):
    verb, noun, seed, dims = args
    return generate_clip(verb, noun, seed, dims)


def to_uint8(frames: np.ndarray) -> np.ndarray:
    q = np.rint(frames.astype(np.float64) * 255.0)
    out = q.astype(np.uint8)
    if not np.array_equal(_LUT[out], frames):
        raise DataError("frames are not on the 1/255 grid; cannot store losslessly")
    return out


class ClipDataset:
    """Frames (uint8), structured inputs and labels for a set of clips keyed by id."""

    def __init__(self, ids, verbs, nouns, seeds, frames_u8, z, dims):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.verbs = np.asarray(verbs, dtype=np.int64)
        self.nouns = np.asarray(nouns, dtype=np.int64)
        self.seeds = np.asarray(seeds, dtype=np.int64)
        self._frames = frames_u8
        self._z = z.astype(np.float32)
        self.dims = tuple(dims)
        self._row = {int(i): r for r, i in enumerate(self.ids)}
        if len(self._row) != len(self.ids):
            raise DataError("duplicate clip ids")

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_clips(cls, clips, ids=None, num_slots: int = NUM_SLOTS) -> "ClipDataset":
        clips = list(clips)
        if not clips:
            raise DataError("empty clip list")
        ids = list(range(len(clips))) if ids is None else list(ids)
        dims = clips[0].dims
        h, w = dims[1], dims[2]
        frames = np.stack([to_uint8(c.frames) for c in clips])
        z = np.stack([encode_detections(c.tracks, (h, w), num_slots, dims[0]).stacked() for c in clips])
        return cls(
            ids,
            [c.verb_id for c in clips],
            [c.noun_id for c in clips],
            [c.seed for c in clips],
            frames,
            z,
            dims,
        )

    @classmethod
    def generate(cls, verbs, nouns, seeds, dims=DEFAULT_DIMS, workers: int | None = None) -> "ClipDataset":
        """Render every (verb, noun, seed) triple; ids follow that nested order."""
        jobs = [(v, n, s, tuple(dims)) for v in verbs for n in nouns for s in seeds]
        workers = worker_count() if workers is None else workers
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                clips = list(pool.map(_render, jobs, chunksize=8))
        else:
            clips = [_render(j) for j in jobs]
        return cls.from_clips(clips)

    @classmethod
    def load(cls, root) -> "ClipDataset":
        root = Path(root)
        entries = read_index(root)
        clips = [read_clip(root / e["dir"]) for e in entries]
        return cls.from_clips(clips, ids=[e["id"] for e in entries])

    def save(self, root) -> list[dict]:
        root = Path(root)
        entries = []
        for r, iid in enumerate(self.ids):
            d = f"clips/{int(iid):06d}"
            write_clip(self.clip(int(iid)), root / d)
            entries.append(
                {"id": int(iid), "dir": d, "verb_id": int(self.verbs[r]), "noun_id": int(self.nouns[r]), "seed": int(self.seeds[r])}
            )
        write_index(root, entries)
        return entries

    def clip(self, iid: int):
        """Re-render one clip (generation is pure, so this equals the stored record)."""
        r = self.rows([iid])[0]
        return generate_clip(int(self.verbs[r]), int(self.nouns[r]), int(self.seeds[r]), self.dims)

    def instances(self) -> list[tuple[int, int, int]]:
        return [(int(i), int(v), int(n)) for i, v, n in zip(self.ids, self.verbs, self.nouns)]

    def rows(self, ids) -> np.ndarray:
        try:
            return np.array([self._row[int(i)] for i in ids], dtype=np.int64)
        except KeyError as e:
            raise DataError(f"clip id {e.args[0]} not in dataset") from None

    def frames(self, ids) -> np.ndarray:
        return _LUT[self._frames[self.rows(ids)]]

    def structured(self, ids) -> np.ndarray:
        return self._z[self.rows(ids)]

    def labels(self, ids) -> np.ndarray:
        return self.verbs[self.rows(ids)]
