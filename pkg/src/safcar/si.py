"""Structured-information pathway: box tracks -> temporal features.

The structured input stacks, per frame, the normalized ``(x1, y1, x2, y2)`` of
every object slot (``4N`` rows) and optionally a presence row per slot. The
temporal model is a stack of kernel-3, stride-1 1-D convolutions, optionally
with residual blocks (v2/v3) or transformer encoder layers on top (v1).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import CapacityError, ConfigError, DimensionError
from .nn import Conv1d, LayerNorm, Linear, Module
from .tensor import Tensor

VARIANTS = ("v0", "v1", "v2", "v3")


@dataclass
class StructuredInput:
    matrix: np.ndarray  # [4N, T], normalized coordinates
    presence: np.ndarray  # [N, T], 0/1

    def stacked(self, with_presence: bool = True) -> np.ndarray:
        if not with_presence:
            return self.matrix
        return np.concatenate([self.matrix, self.presence], axis=0)


def encode_detections(tracks, frame_dims, num_slots: int, num_frames: int) -> StructuredInput:
    """Build the ``[4N, T]`` coordinate matrix from per-frame box lists.

    ``tracks`` is ``[T, K, 6]`` (array) or a per-frame list of
    ``[x1, y1, x2, y2, object_id, present]`` rows in any order. Slots follow
    ascending object id; absent objects and unused slots stay zero.
    """
    h, w = frame_dims
    if len(tracks) < num_frames:
        raise DimensionError(f"tracks cover {len(tracks)} frames, need {num_frames}")
    ids = set()
    for t in range(num_frames):
        for row in tracks[t]:
            ids.add(int(row[4]))
    if len(ids) > num_slots:
        raise CapacityError(f"{len(ids)} distinct object ids exceed {num_slots} slots")
    slot_of = {oid: i for i, oid in enumerate(sorted(ids))}
    matrix = np.zeros((4 * num_slots, num_frames))
    presence = np.zeros((num_slots, num_frames))
    scale = np.array([w, h, w, h], dtype=np.float64)
    for t in range(num_frames):
        for row in tracks[t]:
            if not row[5]:
                continue
            s = slot_of[int(row[4])]
            matrix[4 * s : 4 * s + 4, t] = np.clip(np.asarray(row[:4], dtype=np.float64) / scale, 0.0, 1.0)
            presence[s, t] = 1.0
    return StructuredInput(matrix, presence)


@dataclass
class SIVariantConfig:
    variant: str = "v1"
    widths: tuple = (64, 64, 64)
    encoder_layers: int = 0
    heads: int = 2
    residual: bool = False
    ff_mult: int = 2
    kernel: int = 3

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown SI variant {self.variant!r}")
        if self.kernel != 3:
            raise ConfigError("SI convolutions use kernel length 3")
        if not self.widths:
            raise ConfigError("SI pathway needs at least one conv layer")
        if self.residual and len(set(self.widths[1:])) > 1:
            raise ConfigError("residual blocks need a constant width")
        if self.encoder_layers and self.widths[-1] % self.heads:
            raise ConfigError(f"width {self.widths[-1]} not divisible by {self.heads} heads")

    @classmethod
    def preset(cls, variant: str, width: int | None = None) -> "SIVariantConfig":
        if variant == "v0":
            w = width or 64
            return cls("v0", (w, w, w))
        if variant == "v1":
            w = width or 64
            return cls("v1", (w, w, w), encoder_layers=2, heads=2)
        if variant == "v2":
            w = width or 64
            return cls("v2", (w,) * 5, residual=True)
        if variant == "v3":
            # ~2x the parameters of v2: width scales with sqrt(2)
            w = width or 90
            return cls("v3", (w,) * 5, residual=True)
        raise ConfigError(f"unknown SI variant {variant!r}")

    @property
    def num_stages(self) -> int:
        return len(self.widths)

    @property
    def out_channels(self) -> int:
        return self.widths[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SIVariantConfig":
        return cls(**d)


class TransformerEncoderLayer(Module):
    """Pre-norm encoder block: multi-head self-attention then a 2-layer MLP, both residual."""

    def __init__(self, rng, channels: int, heads: int, ff_mult: int = 2):
        if channels % heads:
            raise ConfigError(f"channels {channels} not divisible by {heads} heads")
        self._heads = heads
        self.norm1 = LayerNorm(channels)
        self.q = Linear(rng, channels, channels, bias=False)
        self.k = Linear(rng, channels, channels, bias=False)
        self.v = Linear(rng, channels, channels, bias=False)
        self.out = Linear(rng, channels, channels)
        self.norm2 = LayerNorm(channels)
        self.ff1 = Linear(rng, channels, ff_mult * channels)
        self.ff2 = Linear(rng, ff_mult * channels, channels)
        self.attention = None

    def zero_output_projections(self) -> None:
        for lin in (self.out, self.ff2):
            lin.weight.data[...] = 0
            lin.bias.data[...] = 0

    def _split(self, x: Tensor, b: int, t: int) -> Tensor:
        d = x.shape[-1] // self._heads
        return T.transpose(T.reshape(x, (b, t, self._heads, d)), (0, 2, 1, 3))

    def forward(self, s: Tensor) -> Tensor:
        batched = s.ndim == 3
        x = s if batched else T.reshape(s, (1,) + s.shape)
        b, t, c = x.shape
        d = c // self._heads
        h = self.norm1(x)
        q, k, v = (self._split(f(h), b, t) for f in (self.q, self.k, self.v))
        logits = T.mul(T.matmul(q, T.swapaxes(k)), 1.0 / np.sqrt(d))
        weights = T.softmax(logits)
        self.attention = weights.data
        mixed = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (b, t, c))
        x = x + self.out(mixed)
        x = x + self.ff2(T.relu(self.ff1(self.norm2(x))))
        return x if batched else T.reshape(x, s.shape)


def transformer_encoder_layer(s: Tensor, heads: int, rng=None) -> Tensor:
    """Apply a freshly initialized encoder layer (convenience for one-off use)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    return TransformerEncoderLayer(rng, s.shape[-1], heads)(s)


class SIPathway(Module):
    """Temporal conv stack over ``[B, D, T]`` structured input.

    Stages are the conv layers; for v1 the encoder layers belong to the last
    stage. Output of :meth:`forward` is time-major ``[B, T, C_S]``.
    """

    def __init__(self, rng, cfg: SIVariantConfig, in_channels: int):
        self.cfg = cfg
        self._in = in_channels
        chans = (in_channels,) + cfg.widths
        self.convs = [Conv1d(rng, chans[i], chans[i + 1], k=cfg.kernel) for i in range(cfg.num_stages)]
        self.encoders = [
            TransformerEncoderLayer(rng, cfg.out_channels, cfg.heads, cfg.ff_mult) for _ in range(cfg.encoder_layers)
        ]

    @property
    def num_stages(self) -> int:
        return self.cfg.num_stages

    def stem(self, z) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.ndim == 2:
            z = T.reshape(z, (1,) + z.shape)
        if z.shape[1] != self._in:
            raise DimensionError(f"SI input has {z.shape[1]} rows, config expects {self._in}")
        return z

    def stage(self, i: int, x: Tensor) -> Tensor:
        """Apply stage ``i`` (0-based) to channel-major ``[B, C, T]`` features."""
        y = T.relu(self.convs[i](x))
        if self.cfg.residual and i > 0:
            y = y + x
        return y

    def finish(self, x: Tensor) -> Tensor:
        """Channel-major conv output -> time-major features, through any encoder layers."""
        s = T.swapaxes(x, 1, 2)
        for enc in self.encoders:
            s = enc(s)
        return s

    def forward(self, z) -> Tensor:
        x = self.stem(z)
        for i in range(self.num_stages):
            x = self.stage(i, x)
        return self.finish(x)


def si_forward(z, cfg: SIVariantConfig, rng=None, pathway: SIPathway | None = None) -> Tensor:
    """Run the SI pathway on one structured input (``StructuredInput`` or array)."""
    arr = z.stacked() if isinstance(z, StructuredInput) else np.asarray(z)
    if pathway is None:
        pathway = SIPathway(rng if rng is not None else np.random.default_rng(0), cfg, arr.shape[-2])
    out = pathway(arr)
    return T.reshape(out, out.shape[1:]) if arr.ndim == 2 else out
