"""Visual-information pathway: a small temporal-shift conv net over frames."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import Conv2d, Linear, Module
from .tensor import Tensor

TOKEN_MODES = ("per-frame", "flattened-3d")


def _shift(a: np.ndarray, offset: int, axis: int) -> np.ndarray:
    out = np.zeros_like(a)
    n = a.shape[axis]
    if abs(offset) >= n:
        return out
    src = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    if offset > 0:
        src[axis], dst[axis] = slice(0, n - offset), slice(offset, n)
    else:
        src[axis], dst[axis] = slice(-offset, n), slice(0, n + offset)
    out[tuple(dst)] = a[tuple(src)]
    return out


def shift_counts(channels: int, fraction: float) -> int:
    """Channels moved in each direction: ``floor(fraction * C / 2)``."""
    if not 0.0 <= fraction <= 0.5:
        raise ConfigError(f"shift fraction must be in [0, 0.5], got {fraction}")
    return int(np.floor(fraction * channels / 2 + 1e-9))


def temporal_shift(f: Tensor, fraction: float, time_axis: int = 0, channel_axis: int = 1, direction: int = 1) -> Tensor:
    """Move a block of channels one step forward in time and another block back.

    With the default ``direction=1`` the first ``fold`` channels take the value
    of the previous frame (frame 0 becomes zero) and the next ``fold`` channels
    take the value of the following frame; ``direction=-1`` swaps the two.
    """
    time_axis %= f.ndim
    channel_axis %= f.ndim
    c = f.shape[channel_axis]
    fold = shift_counts(c, fraction)
    if fold == 0:
        return T.custom_op("temporal_shift", (f,), f.data.copy(), lambda g: (g,))

    def take(a, lo, hi):
        index = [slice(None)] * a.ndim
        index[channel_axis] = slice(lo, hi)
        return tuple(index)

    def apply(a, sign):
        out = a.copy()
        first, second = take(a, 0, fold), take(a, fold, 2 * fold)
        out[first] = _shift(a[first], sign * direction, time_axis)
        out[second] = _shift(a[second], -sign * direction, time_axis)
        return out

    return T.custom_op("temporal_shift", (f,), apply(f.data, 1), lambda g: (apply(g, -1),))


@dataclass
class VIConfig:
    channels: tuple = (16, 32, 64)
    strides: tuple = (2, 2, 2)
    shift_fraction: float = 0.25
    pooled_tokens: str = "per-frame"
    kernel: int = 3

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.strides = tuple(int(s) for s in self.strides)
        if len(self.channels) != len(self.strides) or not self.channels:
            raise ConfigError("VI config needs one stride per conv stage")
        if self.pooled_tokens not in TOKEN_MODES:
            raise ConfigError(f"pooled_tokens must be one of {TOKEN_MODES}")
        shift_counts(max(self.channels), self.shift_fraction)

    @property
    def num_stages(self) -> int:
        return len(self.channels)

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VIConfig":
        return cls(**d)


class VIPathway(Module):
    """Per stage: temporal shift -> strided conv2d -> relu, on ``[B, T, H, W, C]`` maps."""

    def __init__(self, rng, cfg: VIConfig, in_channels: int = 3):
        self.cfg = cfg
        self._in = in_channels
        chans = (in_channels,) + cfg.channels
        self.convs = [
            Conv2d(rng, chans[i], chans[i + 1], k=cfg.kernel, stride=cfg.strides[i]) for i in range(cfg.num_stages)
        ]

    @property
    def num_stages(self) -> int:
        return self.cfg.num_stages

    def stem(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim == 4:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 5 or x.shape[-1] != self._in:
            raise DimensionError(f"VI input must be [B, T, H, W, {self._in}], got {x.shape}")
        s = self.cfg.total_stride
        if x.shape[2] % s or x.shape[3] % s:
            raise DimensionError(f"frame size {x.shape[2]}x{x.shape[3]} not divisible by total stride {s}")
        return x

    def stage(self, i: int, x: Tensor) -> Tensor:
        b, t = x.shape[:2]
        x = temporal_shift(x, self.cfg.shift_fraction, time_axis=1, channel_axis=-1)
        y = self.convs[i](T.reshape(x, (b * t,) + x.shape[2:]))
        y = T.relu(y)
        return T.reshape(y, (b, t) + y.shape[1:])

    @staticmethod
    def tokens(x: Tensor, mode: str) -> Tensor:
        """``[B, T, H, W, C]`` map -> ``[B, D_v, C]`` tokens."""
        b, t, h, w, c = x.shape
        if mode == "per-frame":
            return T.mean(x, axis=(2, 3))
        return T.reshape(x, (b, t * h * w, c))

    def forward(self, x) -> Tensor:
        x = self.stem(x)
        for i in range(self.num_stages):
            x = self.stage(i, x)
        return self.tokens(x, self.cfg.pooled_tokens)


def vi_forward(x, cfg: VIConfig, rng=None, pathway: VIPathway | None = None) -> Tensor:
    """Visual tokens ``[D_v, C_V]`` for one clip ``[T, H, W, C]`` (or a batch)."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if pathway is None:
        pathway = VIPathway(rng if rng is not None else np.random.default_rng(0), cfg, arr.shape[-1])
    out = pathway(x)
    return T.reshape(out, out.shape[1:]) if arr.ndim == 4 else out


def classify(features: Tensor, head: Linear) -> Tensor:
    """Global mean-pool over tokens, affine head, softmax."""
    pooled = T.mean(features, axis=-2)
    if pooled.ndim == 1:
        return T.reshape(T.softmax(head(T.reshape(pooled, (1, -1)))), (-1,))
    return T.softmax(head(pooled))
