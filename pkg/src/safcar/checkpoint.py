"""Checkpoint directories: ``manifest.json`` + ``weights.bin`` (little-endian float32)."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import Model, ModelConfig

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    classes: list
    seed: int
    params: dict  # name -> float32 array, in registry order
    path: Path | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Model, classes, seed: int, extra=None) -> "Checkpoint":
        params = {n: np.array(p.data, dtype=np.float32) for n, p in model.named_parameters()}
        return cls(model.cfg.to_dict(), [int(c) for c in classes], int(seed), params, extra=dict(extra or {}))

    def build(self) -> Model:
        """Instantiate a model and load the stored weights into it."""
        model = Model(ModelConfig.from_dict(self.config), np.random.default_rng(0))
        load_into(model, self.params)
        return model

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        registry, offset, blobs = [], 0, []
        for name, arr in self.params.items():
            blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            registry.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += len(blob)
            blobs.append(blob)
        manifest = {
            "format_version": FORMAT_VERSION,
            "seed": self.seed,
            "config": self.config,
            "classes": self.classes,
            "registry": registry,
            "extra": self.extra,
        }
        (d / "weights.bin").write_bytes(b"".join(blobs))
        (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
        self.path = d
        return d

    @classmethod
    def load(cls, directory) -> "Checkpoint":
        d = Path(directory)
        try:
            manifest = json.loads((d / "manifest.json").read_text())
        except (OSError, ValueError) as e:
            raise FormatError(f"{d}/manifest.json: unreadable: {e}") from e
        if manifest.get("format_version") != FORMAT_VERSION:
            raise FormatError(f"{d}/manifest.json: unsupported format version {manifest.get('format_version')}")
        try:
            raw = (d / "weights.bin").read_bytes()
        except OSError as e:
            raise FormatError(f"{d}/weights.bin: unreadable: {e}") from e
        params, expected = {}, 0
        for entry in manifest["registry"]:
            shape = tuple(int(s) for s in entry["shape"])
            nbytes = int(np.prod(shape, dtype=np.int64)) * 4
            off = int(entry["offset"])
            if off != expected:
                raise FormatError(f"{d}/manifest.json: parameter {entry['name']} offset {off}, expected {expected}")
            if off + nbytes > len(raw):
                raise FormatError(f"{d}/weights.bin: truncated inside {entry['name']}", offset=len(raw))
            params[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape).astype(np.float32)
            expected = off + nbytes
        if expected != len(raw):
            raise FormatError(f"{d}/weights.bin: {len(raw) - expected} trailing bytes", offset=expected)
        return cls(manifest["config"], manifest["classes"], int(manifest["seed"]), params, d, manifest.get("extra", {}))

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()


def load_into(model: Model, params: dict) -> None:
    own = model.parameters()
    if list(own) != list(params):
        missing = sorted(set(own) ^ set(params))
        raise FormatError(f"parameter registry does not match the model: {missing[:5]}")
    for name, p in own.items():
        if p.data.shape != params[name].shape:
            raise FormatError(f"parameter {name}: shape {params[name].shape}, model expects {p.data.shape}")
        p.data = np.array(params[name], dtype=p.data.dtype)
