"""Model assembly: the two pathways, their fusion topology, and the classification head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data.synth import DEFAULT_DIMS, NUM_SLOTS
from .errors import ConfigError, DimensionError
from .nn import Linear, Module
from .saf import SAFWeights, saf_fuse
from .si import SIPathway, SIVariantConfig
from .tensor import Tensor
from .vi import VIConfig, VIPathway

TOPOLOGIES = ("late", "cascaded", "sequential", "concat", "si-only", "vi-only")
FUSED = ("late", "cascaded", "sequential")


@dataclass
class FusionTopology:
    """How the pathways are wired.

    ``si_stages``/``vi_stages`` are 1-based stage indices of each SAF insertion
    (one pair per SAF module). Empty means "use the topology's default".
    """

    kind: str = "late"
    si_stages: tuple = ()
    vi_stages: tuple = ()

    def __post_init__(self):
        if self.kind not in TOPOLOGIES:
            raise ConfigError(f"unknown topology {self.kind!r}; choose from {TOPOLOGIES}")
        self.si_stages = tuple(int(s) for s in self.si_stages)
        self.vi_stages = tuple(int(s) for s in self.vi_stages)
        if self.kind not in FUSED and (self.si_stages or self.vi_stages):
            raise ConfigError(f"topology {self.kind!r} carries no SAF modules")
        if len(self.si_stages) != len(self.vi_stages):
            raise ConfigError("si_stages and vi_stages must pair up")

    @property
    def uses_si(self) -> bool:
        return self.kind != "vi-only"

    @property
    def uses_vi(self) -> bool:
        return self.kind != "si-only"

    def resolve(self, n_si: int, n_vi: int) -> "FusionTopology":
        """Fill default stage indices and validate them against pathway depths."""
        si, vi = self.si_stages, self.vi_stages
        if self.kind == "late":
            si, vi = si or (n_si,), vi or (n_vi,)
            if si != (n_si,) or vi != (n_vi,):
                raise ConfigError("late fusion sits on the final stage of both pathways")
        elif self.kind == "cascaded":
            si, vi = si or (n_si,), vi or (max(n_vi - 1, 1),)
            if len(si) != 1:
                raise ConfigError("cascaded fusion uses exactly one SAF module")
            if vi[0] >= n_vi:
                raise ConfigError("cascaded fusion must feed an intermediate VI stage")
            if si[0] < vi[0]:
                raise ConfigError("cascaded fusion sends a later SI stage into an earlier VI stage")
        elif self.kind == "sequential":
            si = si or tuple(range(max(n_si - 1, 1), n_si + 1))
            vi = vi or tuple(range(max(n_vi - 1, 1), n_vi + 1))
            if len(si) < 2:
                raise ConfigError("sequential fusion needs at least two SAF modules")
            if list(si) != sorted(set(si)) or list(vi) != sorted(set(vi)):
                raise ConfigError("sequential stages must be strictly increasing")
            if si[-1] != n_si or vi[-1] != n_vi:
                raise ConfigError("sequential fusion ends at the final stage of both pathways")
        for s in si:
            if not 1 <= s <= n_si:
                raise ConfigError(f"SI stage {s} outside 1..{n_si}")
        for v in vi:
            if not 1 <= v <= n_vi:
                raise ConfigError(f"VI stage {v} outside 1..{n_vi}")
        return FusionTopology(self.kind, si, vi)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "si_stages": list(self.si_stages), "vi_stages": list(self.vi_stages)}

    @classmethod
    def from_dict(cls, d: dict) -> "FusionTopology":
        return cls(d["kind"], tuple(d.get("si_stages", ())), tuple(d.get("vi_stages", ())))


@dataclass
class ModelConfig:
    topology: FusionTopology = field(default_factory=FusionTopology)
    si: SIVariantConfig = field(default_factory=lambda: SIVariantConfig.preset("v1"))
    vi: VIConfig = field(default_factory=VIConfig)
    num_classes: int = 8
    saf_dim: int = 64
    shared_saf: bool = True
    # SAF output projections start at zero, so a fused model starts as its
    # concat baseline and the attention branch grows in from there
    saf_zero_init: bool = True
    num_slots: int = NUM_SLOTS
    presence_rows: bool = True
    dims: tuple = DEFAULT_DIMS
    # frames are standardized before the VI pathway; defaults are the
    # benchmark's measured pixel mean / std
    frame_mean: float = 0.26
    frame_std: float = 0.09

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.frame_std <= 0:
            raise ConfigError("frame_std must be positive")

    @property
    def si_in_channels(self) -> int:
        return (5 if self.presence_rows else 4) * self.num_slots

    def to_dict(self) -> dict:
        return {
            "topology": self.topology.to_dict(),
            "si": self.si.to_dict(),
            "vi": self.vi.to_dict(),
            "num_classes": self.num_classes,
            "saf_dim": self.saf_dim,
            "shared_saf": self.shared_saf,
            "saf_zero_init": self.saf_zero_init,
            "num_slots": self.num_slots,
            "presence_rows": self.presence_rows,
            "dims": list(self.dims),
            "frame_mean": self.frame_mean,
            "frame_std": self.frame_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["topology"] = FusionTopology.from_dict(d["topology"])
        d["si"] = SIVariantConfig.from_dict(d["si"])
        d["vi"] = VIConfig.from_dict(d["vi"])
        return cls(**d)


class Model(Module):
    """Two-pathway classifier. ``forward(frames, z)`` returns logits ``[B, K]``.

    ``frames`` is ``[B, T, H, W, 3]`` and ``z`` the stacked structured input
    ``[B, D, T]``; a pathway the topology does not use ignores its argument.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        topo = cfg.topology
        self._topology = topo.resolve(cfg.si.num_stages, cfg.vi.num_stages)
        if topo.uses_si:
            self.si = SIPathway(rng, cfg.si, cfg.si_in_channels)
        if topo.uses_vi:
            self.vi = VIPathway(rng, cfg.vi)
        self.saf = [
            SAFWeights(
                rng,
                cfg.si.widths[s - 1],
                cfg.vi.channels[v - 1],
                cfg.saf_dim,
                shared=cfg.shared_saf,
                zero_out=cfg.saf_zero_init,
            )
            for s, v in zip(self._topology.si_stages, self._topology.vi_stages)
        ]
        self.head = Linear(rng, self.feature_dim, cfg.num_classes)

    @property
    def topology(self) -> FusionTopology:
        return self._topology

    @property
    def feature_dim(self) -> int:
        d = 0
        if self._topology.uses_si:
            d += self.cfg.si.out_channels
        if self._topology.uses_vi:
            d += self.cfg.vi.out_channels
        return d

    def replace_head(self, num_classes: int, rng) -> None:
        self.cfg.num_classes = num_classes
        self.head = Linear(rng, self.feature_dim, num_classes)

    def standardize(self, frames):
        if frames is None:
            return None
        scale = 1.0 / self.cfg.frame_std
        if isinstance(frames, Tensor):
            return T.mul(T.add(frames, -self.cfg.frame_mean), scale)
        return Tensor((np.asarray(frames) - self.cfg.frame_mean) * scale)

    def features(self, frames, z) -> Tensor:
        """Pooled head input ``[B, F]``."""
        kind = self._topology.kind
        if kind != "si-only":
            frames = self.standardize(frames)
        if kind == "si-only":
            return T.mean(self.si(z), axis=1)
        if kind == "vi-only":
            return T.mean(self.vi(frames), axis=1)
        if kind == "concat":
            return T.concat([T.mean(self.si(z), axis=1), T.mean(self.vi(frames), axis=1)], axis=-1)
        f_s, f_v = self._fused(frames, z)
        return T.concat([T.mean(f_s, axis=1), T.mean(f_v, axis=1)], axis=-1)

    def _fused(self, frames, z):
        topo = self._topology
        si, vi = self.si, self.vi
        pooled = self.cfg.vi.pooled_tokens
        x_s = si.stem(z)
        x_v = vi.stem(frames)
        if x_s.shape[0] != x_v.shape[0]:
            raise DimensionError(f"batch mismatch: SI {x_s.shape[0]} vs VI {x_v.shape[0]}")
        done_s = done_v = 0
        f_s = f_v = None
        for s_stage, v_stage, weights in zip(topo.si_stages, topo.vi_stages, self.saf):
            for i in range(done_s, s_stage):
                x_s = si.stage(i, x_s)
            for i in range(done_v, v_stage):
                x_v = vi.stage(i, x_v)
            done_s, done_v = s_stage, v_stage
            last_s = s_stage == si.num_stages
            s_tok = si.finish(x_s) if last_s else T.swapaxes(x_s, 1, 2)
            if v_stage == vi.num_stages:
                f_s, f_v = saf_fuse(s_tok, vi.tokens(x_v, pooled), weights)
            else:
                # intermediate VI maps are fused position by position, then continue
                f_s, flat = saf_fuse(s_tok, VIPathway.tokens(x_v, "flattened-3d"), weights)
                x_v = T.reshape(flat, x_v.shape)
            if not last_s:
                x_s = T.swapaxes(f_s, 1, 2)
        if done_s < si.num_stages:
            for i in range(done_s, si.num_stages):
                x_s = si.stage(i, x_s)
            f_s = si.finish(x_s)
        if done_v < vi.num_stages:
            for i in range(done_v, vi.num_stages):
                x_v = vi.stage(i, x_v)
            f_v = vi.tokens(x_v, pooled)
        return f_s, f_v

    def forward(self, frames, z) -> Tensor:
        return self.head(self.features(frames, z))


def assemble_model(topology, si_cfg: SIVariantConfig, vi_cfg: VIConfig, num_classes: int, rng=None, **kwargs) -> Model:
    """Build a model; ``topology`` may be a kind string or a :class:`FusionTopology`."""
    if isinstance(topology, str):
        topology = FusionTopology(topology)
    cfg = ModelConfig(topology=topology, si=si_cfg, vi=vi_cfg, num_classes=num_classes, **kwargs)
    return Model(cfg, rng if rng is not None else np.random.default_rng(0))


def build_model(cfg: ModelConfig, rng) -> Model:
    return Model(cfg, rng)
