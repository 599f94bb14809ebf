"""Structured attention fusion between the two pathways.

``S`` (``[T_S, C_S]``) and ``V`` (``[D_v, C_V]``) are projected to a shared width
``C``; each attends to the other with single-head scaled dot-product attention
and adds ``relu(layer_norm(attended)) @ W_out`` back to itself.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .nn import LayerNorm, Module, uniform_init
from .tensor import Tensor


class SAFWeights(Module):
    def __init__(self, rng, c_s: int, c_v: int, c: int = 64, shared: bool = True, zero_out: bool = False):
        if c <= 0:
            raise DimensionError(f"attention width must be positive, got {c}")
        self._c = c
        self._shared = shared
        self.W_S = uniform_init(rng, (c_s, c), c_s, c)
        self.W_V = uniform_init(rng, (c_v, c), c_v, c)
        if not shared:
            # separate projections for the V -> S direction
            self.W_S2 = uniform_init(rng, (c_s, c), c_s, c)
            self.W_V2 = uniform_init(rng, (c_v, c), c_v, c)
        self.W_sy = uniform_init(rng, (c, c_s), c, c_s)
        self.W_vy = uniform_init(rng, (c, c_v), c, c_v)
        self.norm_s = LayerNorm(c)
        self.norm_v = LayerNorm(c)
        if zero_out:
            self.zero_output_projections()

    @property
    def width(self) -> int:
        return self._c

    @property
    def shared(self) -> bool:
        return self._shared

    def zero_output_projections(self) -> None:
        self.W_sy.data[...] = 0
        self.W_vy.data[...] = 0


def _check(S: Tensor, V: Tensor, w: SAFWeights) -> None:
    if S.shape[-1] != w.W_S.shape[0] or V.shape[-1] != w.W_V.shape[0] or S.shape[:-2] != V.shape[:-2]:
        raise DimensionError(
            f"SAF inputs S{S.shape} / V{V.shape} do not match W_S{w.W_S.shape} / W_V{w.W_V.shape}"
        )


def saf_attend(S: Tensor, V: Tensor, w: SAFWeights, return_weights: bool = False):
    """Bidirectional cross-attention; returns ``(A_sv, A_vs)`` (and the two attention maps)."""
    _check(S, V, w)
    scale = 1.0 / np.sqrt(w.width)
    s_proj = T.matmul(S, w.W_S)
    v_proj = T.matmul(V, w.W_V)
    p_sv = T.softmax(T.mul(T.matmul(s_proj, T.swapaxes(v_proj)), scale))
    a_sv = T.matmul(p_sv, v_proj)
    if not w.shared:
        s_proj = T.matmul(S, w.W_S2)
        v_proj = T.matmul(V, w.W_V2)
    p_vs = T.softmax(T.mul(T.matmul(v_proj, T.swapaxes(s_proj)), scale))
    a_vs = T.matmul(p_vs, s_proj)
    if return_weights:
        return a_sv, a_vs, (p_sv.data, p_vs.data)
    return a_sv, a_vs


def saf_fuse(S: Tensor, V: Tensor, w: SAFWeights):
    """Residual fusion ``F_S, F_V``; output shapes equal input shapes."""
    a_sv, a_vs = saf_attend(S, V, w)
    f_s = T.matmul(T.relu(w.norm_s(a_sv)), w.W_sy) + S
    f_v = T.matmul(T.relu(w.norm_v(a_vs)), w.W_vy) + V
    return f_s, f_v
