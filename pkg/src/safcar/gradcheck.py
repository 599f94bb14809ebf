"""Finite-difference gradient checks for every differentiable building block.

Each case builds a tiny float64 problem, reduces the output to a scalar with a
fixed random weighting (so every output coordinate matters) and compares
backprop against central differences.
"""

from __future__ import annotations

import time

import numpy as np

from . import tensor as T
from .model import assemble_model
from .saf import SAFWeights, saf_fuse
from .si import SIVariantConfig, TransformerEncoderLayer
from .tensor import Tensor, grad_check, precision
from .vi import VIConfig, temporal_shift

TOLERANCE = 1e-4


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return T.sum_(T.mul(out, Tensor(w)))


def case_conv1d(rng, eps):
    x, k, b = rng.normal(size=(2, 3, 7)), rng.normal(size=(4, 3, 3)), rng.normal(size=4)
    w = rng.normal(size=(2, 4, 7))
    return grad_check(lambda x, k, b: _weighted(T.conv1d(x, k, b, stride=1, pad=1), w), [x, k, b], eps)


def case_conv2d(rng, eps):
    x, k, b = rng.normal(size=(2, 6, 5, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)
    w = rng.normal(size=(2, 3, 3, 3))
    return grad_check(lambda x, k, b: _weighted(T.conv2d(x, k, b, stride=2, pad=1), w), [x, k, b], eps)


def case_layer_norm(rng, eps):
    x, g, b = rng.normal(size=(3, 5)), rng.normal(size=5), rng.normal(size=5)
    w = rng.normal(size=(3, 5))
    return grad_check(lambda x, g, b: _weighted(T.layer_norm(x, g, b), w), [x, g, b], eps)


def case_softmax(rng, eps):
    x, w = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
    return grad_check(lambda x: _weighted(T.softmax_rows(x), w), [x], eps)


def case_temporal_shift(rng, eps):
    x, w = rng.normal(size=(4, 8, 2, 2)), rng.normal(size=(4, 8, 2, 2))
    return grad_check(lambda x: _weighted(temporal_shift(x, 0.5), w), [x], eps)


def case_transformer_encoder_layer(rng, eps):
    layer = TransformerEncoderLayer(rng, 8, 2).astype(np.float64)
    s, w = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
    params = list(layer.parameters().values())
    return grad_check(lambda s, *_: _weighted(layer(s), w), [s] + params, eps)


def case_saf_fuse(rng, eps):
    saf = SAFWeights(rng, 4, 6, 4).astype(np.float64)
    S, V = rng.normal(size=(3, 4)), rng.normal(size=(5, 6))
    ws, wv = rng.normal(size=(3, 4)), rng.normal(size=(5, 6))
    params = list(saf.parameters().values())

    def f(s, v, *_):
        f_s, f_v = saf_fuse(s, v, saf)
        return _weighted(f_s, ws) + _weighted(f_v, wv)

    return grad_check(f, [S, V] + params, eps)


def case_late_saf_loss(rng, eps):
    """Cross-entropy of a small Late-SAF model on one synthetic batch, w.r.t. every parameter.

    SAF output projections are drawn at random here: zeroed ones would block
    the gradient into the attention weights and make the check vacuous.
    """
    from .data.dataset import ClipDataset

    ds = ClipDataset.generate([0, 4, 5], [0, 7], [0], dims=(4, 16, 16), workers=1)
    ids = ds.ids[[0, 3, 5]]
    si = SIVariantConfig("v1", (6, 6), encoder_layers=1, heads=2)
    vi = VIConfig(channels=(4, 6), strides=(2, 2), shift_fraction=0.5)
    model = assemble_model("late", si, vi, 8, rng, dims=(4, 16, 16), saf_dim=4, saf_zero_init=False).astype(np.float64)
    frames = ds.frames(ids).astype(np.float64)
    z = ds.structured(ids).astype(np.float64)
    labels = ds.labels(ids)
    params = list(model.parameters().values())
    return grad_check(lambda *_: T.cross_entropy(model(frames, z), labels), params, eps)


CASES = {
    "conv1d": case_conv1d,
    "conv2d": case_conv2d,
    "layer_norm": case_layer_norm,
    "softmax": case_softmax,
    "temporal_shift": case_temporal_shift,
    "transformer_encoder_layer": case_transformer_encoder_layer,
    "saf_fuse": case_saf_fuse,
    "late_saf_loss": case_late_saf_loss,
}


def run_suite(seed: int = 0, eps: float = 1e-5, names=None) -> dict[str, tuple[float, float]]:
    """``{case: (max relative error, seconds)}`` for the selected cases."""
    results = {}
    with precision(np.float64):
        for name in names or CASES:
            start = time.perf_counter()
            err = CASES[name](np.random.default_rng([seed, len(name)]), eps)
            results[name] = (float(err), time.perf_counter() - start)
    return results
