import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safcar import tensor as T
from safcar.errors import CapacityError, ConfigError, DimensionError
from safcar.si import (
    VARIANTS,
    SIPathway,
    SIVariantConfig,
    TransformerEncoderLayer,
    encode_detections,
    si_forward,
    transformer_encoder_layer,
)
from safcar.tensor import Tensor, grad_check, precision


def test_encode_normalizes_box():
    z = encode_detections([[[16, 16, 32, 32, 7, 1]]], (64, 64), 1, 1)
    np.testing.assert_array_equal(z.matrix[:, 0], [0.25, 0.25, 0.5, 0.5])
    assert z.presence[0, 0] == 1


def test_encode_empty_frame_is_zero():
    z = encode_detections([[[0, 0, 10, 10, 1, 1]], []], (64, 64), 2, 2)
    np.testing.assert_array_equal(z.matrix[:, 1], 0)
    np.testing.assert_array_equal(z.presence[:, 1], 0)


def test_encode_shape():
    z = encode_detections([[], [], []], (64, 64), 2, 3)
    assert z.matrix.shape == (8, 3) and z.presence.shape == (2, 3)
    assert z.stacked().shape == (10, 3) and z.stacked(False).shape == (8, 3)


def test_encode_absent_rows_stay_zero():
    z = encode_detections([[[4, 4, 8, 8, 0, 1], [1, 2, 3, 4, 1, 0]]], (16, 16), 2, 1)
    np.testing.assert_array_equal(z.matrix[4:, 0], 0)
    assert z.presence[:, 0].tolist() == [1, 0]


def test_encode_capacity():
    tracks = [[[0, 0, 1, 1, 0, 1], [0, 0, 1, 1, 1, 1], [0, 0, 1, 1, 2, 1]]]
    with pytest.raises(CapacityError):
        encode_detections(tracks, (8, 8), 2, 1)


def test_encode_x_by_width_y_by_height():
    z = encode_detections([[[10, 20, 30, 40, 0, 1]]], (40, 100), 1, 1)
    np.testing.assert_allclose(z.matrix[:, 0], [0.1, 0.5, 0.3, 1.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.randoms(use_true_random=False))
def test_encode_invariant_to_listing_order(n_obj, t, r):
    rng = np.random.default_rng(r.randint(0, 999))
    ids = rng.choice(50, size=n_obj, replace=False)
    frames = []
    for _ in range(t):
        rows = []
        for oid in ids:
            x1, y1 = rng.uniform(0, 30, 2)
            rows.append([x1, y1, x1 + 5, y1 + 5, oid, int(rng.integers(0, 2))])
        frames.append(rows)
    shuffled = [r.sample(rows, len(rows)) for rows in frames]
    a = encode_detections(frames, (64, 64), 4, t)
    b = encode_detections(shuffled, (64, 64), 4, t)
    np.testing.assert_array_equal(a.matrix, b.matrix)
    np.testing.assert_array_equal(a.presence, b.presence)
    assert np.all((a.matrix >= 0) & (a.matrix <= 1))


def test_presets():
    v0, v1, v2, v3 = (SIVariantConfig.preset(v) for v in VARIANTS)
    assert v0.widths == v1.widths == (64, 64, 64)
    assert v1.encoder_layers == 2 and v1.heads == 2 and v0.encoder_layers == 0
    assert v2.residual and v3.residual and not v0.residual
    rng = np.random.default_rng(0)
    n2 = SIPathway(rng, v2, 15).num_parameters()
    n3 = SIPathway(rng, v3, 15).num_parameters()
    assert 1.8 < n3 / n2 < 2.2  # "almost double"


def test_config_validation():
    with pytest.raises(ConfigError):
        SIVariantConfig("v9")
    with pytest.raises(ConfigError):
        SIVariantConfig("v0", kernel=5)
    with pytest.raises(ConfigError):
        SIVariantConfig("v1", (63, 63), encoder_layers=1, heads=2)
    cfg = SIVariantConfig.preset("v3")
    assert SIVariantConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("variant", VARIANTS)
def test_output_shape_each_variant(variant):
    cfg = SIVariantConfig.preset(variant)
    z = np.random.default_rng(0).uniform(size=(15, 16))
    out = si_forward(z, cfg, np.random.default_rng(1))
    assert out.shape == (16, cfg.out_channels)


@pytest.mark.parametrize("variant", ["v0", "v2", "v3"])
def test_zero_input_zero_output(variant):
    out = si_forward(np.zeros((15, 16)), SIVariantConfig.preset(variant), np.random.default_rng(0))
    np.testing.assert_array_equal(out.data, 0)


def test_wrong_rows_dimension_error():
    p = SIPathway(np.random.default_rng(0), SIVariantConfig.preset("v0"), 15)
    with pytest.raises(DimensionError):
        p(np.zeros((12, 16)))


@pytest.mark.parametrize("variant", ["v0", "v2"])
def test_time_translation_covariance(variant):
    """Shift input right by one frame; interior outputs shift with it."""
    cfg = SIVariantConfig.preset(variant, width=8)
    p = SIPathway(np.random.default_rng(0), cfg, 6)
    z = np.random.default_rng(1).normal(size=(6, 12))
    shifted = np.zeros_like(z)
    shifted[:, 1:] = z[:, :-1]
    with precision(np.float64):
        p.astype(np.float64)
        a, b = p(z).data[0], p(shifted).data[0]
    # each conv layer widens the boundary-affected region by one frame
    m = cfg.num_stages
    np.testing.assert_allclose(b[1 + m : 12 - m], a[m : 11 - m], atol=1e-12)


def test_v1_with_identity_encoders_equals_v0():
    rng_a, rng_b = np.random.default_rng(4), np.random.default_rng(4)
    p0 = SIPathway(rng_a, SIVariantConfig.preset("v0"), 15)
    p1 = SIPathway(rng_b, SIVariantConfig.preset("v1"), 15)
    for enc in p1.encoders:
        enc.zero_output_projections()
    z = np.random.default_rng(0).uniform(size=(2, 15, 16))
    np.testing.assert_array_equal(p0(z).data, p1(z).data)


def test_single_token_attention():
    layer = TransformerEncoderLayer(np.random.default_rng(0), 8, 2)
    s = Tensor(np.random.default_rng(1).normal(size=(1, 8)))
    layer(s)
    np.testing.assert_allclose(layer.attention, np.ones((1, 2, 1, 1)))


def test_attention_rows_sum_to_one():
    layer = TransformerEncoderLayer(np.random.default_rng(0), 8, 2)
    layer(Tensor(np.random.default_rng(1).normal(size=(3, 5, 8))))
    assert layer.attention.shape == (3, 2, 5, 5)
    np.testing.assert_allclose(layer.attention.sum(-1), 1.0, atol=1e-6)


def test_encoder_bad_heads():
    with pytest.raises(ConfigError):
        transformer_encoder_layer(Tensor(np.ones((4, 6))), heads=4)


def test_encoder_grad_check():
    rng = np.random.default_rng(2)
    s = rng.normal(size=(4, 8))
    w = Tensor(rng.normal(size=(4, 8)), dtype=np.float64)
    with precision(np.float64):
        layer = TransformerEncoderLayer(np.random.default_rng(3), 8, 2).astype(np.float64)
    params = list(layer.parameters().values())

    def f(x, *ps):
        return T.sum_(T.mul(layer(x), w))

    assert grad_check(f, [s] + params) < 1e-4


def test_si_forward_grad_check():
    rng = np.random.default_rng(5)
    cfg = SIVariantConfig("v2", (6, 6, 6), residual=True)
    with precision(np.float64):
        p = SIPathway(np.random.default_rng(6), cfg, 5).astype(np.float64)
    z = rng.uniform(size=(5, 7))
    w = Tensor(rng.normal(size=6), dtype=np.float64)
    assert grad_check(lambda x: T.sum_(T.mul(T.mean(p(x), axis=1), w)), [z]) < 1e-4
