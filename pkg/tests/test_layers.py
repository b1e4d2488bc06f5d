import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dermhybrid import layers as L
from dermhybrid import tensor as T
from dermhybrid.errors import ConfigError, DimensionError
from dermhybrid.gradcheck import grad_check
from dermhybrid.rng import Rng
from dermhybrid.tensor import Tensor


def pe_entry(pos, j, d):
    # sin on even feature 2i, cos on odd feature 2i+1, same frequency
    i = j // 2
    angle = pos / 10000 ** (2 * i / d)
    return math.sin(angle) if j % 2 == 0 else math.cos(angle)


# -- positional encoding --------------------------------------------------------


def test_pe_known_values():
    table = L.positional_encoding(3, 4).table
    assert table[1, 0] == pytest.approx(0.841471, abs=1e-6)
    assert table[1, 1] == pytest.approx(0.540302, abs=1e-6)
    # pos 1, i = 1, d = 4: sin(1 / 100)
    assert table[1, 2] == pytest.approx(0.0099998, abs=1e-7)


def test_pe_position_zero():
    table = L.positional_encoding(1, 16).table
    np.testing.assert_array_equal(table[0, 0::2], 0.0)
    np.testing.assert_array_equal(table[0, 1::2], 1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 64), st.integers(1, 32).map(lambda k: 2 * k))
def test_pe_matches_closed_form(seq_len, d):
    table = L.positional_encoding(seq_len, d).table
    assert np.abs(table).max() <= 1.0
    for pos in {0, seq_len // 2, seq_len - 1}:
        for j in range(d):
            assert abs(table[pos, j] - pe_entry(pos, j, d)) < 1e-9


def test_pe_odd_dimension_rejected():
    with pytest.raises(ConfigError):
        L.positional_encoding(4, 5)


def test_pe_addition_shape_checked():
    pe = L.positional_encoding(4, 6)
    with pytest.raises(DimensionError):
        L.add_positional_encoding(Tensor(np.zeros((1, 5, 6))), pe)


# -- attention and encoder ------------------------------------------------------


def test_attention_single_token_weight_is_one():
    attn = L.MultiHeadSelfAttention(8, 2, Rng(0))
    _, w = attn.attend(Tensor(np.random.default_rng(0).normal(size=(3, 1, 8)).astype(np.float32)))
    np.testing.assert_allclose(w.data, 1.0, atol=1e-6)


def test_attention_shape():
    attn = L.MultiHeadSelfAttention(64, 4, Rng(0))
    out = attn.forward(Tensor(np.zeros((2, 196, 64), dtype=np.float32)))
    assert out.shape == (2, 196, 64)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_attention_weights_are_distributions(seed, length):
    attn = L.MultiHeadSelfAttention(8, 4, Rng(seed))
    x = Tensor(np.random.default_rng(seed).normal(size=(2, length, 8)).astype(np.float32))
    _, w = attn.attend(x)
    assert (w.data >= 0).all()
    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_attention_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    attn = L.MultiHeadSelfAttention(8, 2, Rng(seed))
    x = rng.normal(size=(2, 5, 8)).astype(np.float32)
    perm = rng.permutation(5)
    out = attn.forward(Tensor(x)).data
    out_perm = attn.forward(Tensor(x[:, perm])).data
    np.testing.assert_allclose(out_perm, out[:, perm], atol=1e-6)


def test_attention_key_projection_has_no_bias():
    attn = L.MultiHeadSelfAttention(8, 2, Rng(0))
    names = [n for n, _ in attn.named_parameters()]
    assert "k_proj.weight" in names and "k_proj.bias" not in names


def test_zero_layer_encoder_is_identity():
    cfg = L.TransformerEncoderConfig(d_model=8, n_heads=2, n_layers=0)
    enc = L.TransformerEncoder(cfg, Rng(0))
    x = np.random.default_rng(0).normal(size=(2, 3, 8)).astype(np.float32)
    assert enc.forward(Tensor(x)).data.tobytes() == x.tobytes()


def test_encoder_config_validation():
    with pytest.raises(ConfigError):
        L.TransformerEncoderConfig(d_model=10, n_heads=4)


def test_dropout_only_with_rng():
    cfg = L.TransformerEncoderConfig(d_model=8, n_heads=2, n_layers=1, dropout_prob=0.5)
    enc = L.TransformerEncoder(cfg, Rng(0))
    x = Tensor(np.random.default_rng(0).normal(size=(1, 4, 8)).astype(np.float32))
    eval_a, eval_b = enc.forward(x).data, enc.forward(x).data
    assert eval_a.tobytes() == eval_b.tobytes()
    train_a = enc.forward(x, Rng(1)).data
    assert train_a.tobytes() != eval_a.tobytes()
    assert enc.forward(x, Rng(1)).data.tobytes() == train_a.tobytes()


# -- fusion heads ---------------------------------------------------------------


def test_perceptron_fusion_hand_example():
    out = L.kan_fusion_perceptron(Tensor([[1.0, -1.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[1.0, 1.0]]))
    assert out.data[0, 0] == pytest.approx(0.731059, abs=1e-6)


def test_perceptron_fusion_zero_weights_give_half():
    f = Tensor(np.random.default_rng(0).normal(size=(4, 6)))
    out = L.kan_fusion_perceptron(f, Tensor(np.zeros((5, 6))), Tensor(np.zeros((3, 5))))
    np.testing.assert_array_equal(out.data, 0.5)


def test_perceptron_fusion_width_must_match():
    fusion = L.KanPerceptronFusion(192, 16, 8, Rng(0))
    fusion.forward(Tensor(np.zeros((2, 192), dtype=np.float32)))
    with pytest.raises(DimensionError):
        fusion.forward(Tensor(np.zeros((2, 191), dtype=np.float32)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_perceptron_fusion_outputs_inside_unit_interval(seed):
    fusion = L.KanPerceptronFusion(6, 4, 3, Rng(seed), dtype=np.float64)
    f = Tensor(np.random.default_rng(seed).normal(size=(5, 6)))
    out = fusion.forward(f).data
    assert ((out > 0) & (out < 1)).all()


# -- spline layer ---------------------------------------------------------------


@pytest.mark.parametrize("grid,order", [(8, 3), (5, 2), (4, 1), (3, 0)])
def test_partition_of_unity(grid, order):
    knots = L.uniform_knots(grid, order, (-2.0, 2.0))
    x = np.linspace(-2.0, 2.0, 1001)
    np.testing.assert_allclose(L.bspline_basis_values(x, knots, order).sum(axis=-1), 1.0, atol=1e-9)


def test_basis_nonnegative_and_sized():
    knots = L.uniform_knots(8, 3, (-2.0, 2.0))
    vals = L.bspline_basis_values(np.linspace(-2, 2, 50), knots, 3)
    assert vals.shape == (50, 11)
    assert (vals >= 0).all()


def test_zero_layer_outputs_zero():
    layer = L.KanSplineLayer(L.KanSplineLayerConfig(3, 2), Rng(0))
    layer.coeff.data[...] = 0
    layer.base_weight.data[...] = 0
    out = layer.forward(Tensor(np.random.default_rng(0).normal(size=(4, 3)).astype(np.float32)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_fit_reproduces_linear_target():
    layer = L.KanSplineLayer(L.KanSplineLayerConfig(1, 1), Rng(0), dtype=np.float64)
    layer.base_weight.data[...] = 0
    xs = np.linspace(-2, 2, 400)
    layer.fit_edge(0, 0, xs, 2 * xs)
    probe = np.linspace(-1.98, 1.98, 100)
    out = layer.forward(Tensor(probe[:, None])).data[:, 0]
    assert np.abs(out - 2 * probe).max() < 1e-4


def test_coefficient_shape_and_knot_validation():
    cfg = L.KanSplineLayerConfig(4, 3, grid_size=8, spline_order=3)
    layer = L.KanSplineLayer(cfg, Rng(0))
    assert layer.coeff.shape == (3, 4, 11)
    bad = L.uniform_knots(8, 3, (-2.0, 2.0))
    bad[5] = bad[4]
    with pytest.raises(ConfigError):
        L.KanSplineLayer(cfg, Rng(0), knots=bad)
    with pytest.raises(ConfigError):
        L.KanSplineLayer(cfg, Rng(0), knots=np.arange(5.0))


@pytest.mark.parametrize("seed", range(5))
def test_spline_basis_derivative(seed):
    rng = np.random.default_rng(seed)
    knots = L.uniform_knots(4, 3, (-2.0, 2.0))
    with T.default_dtype(np.float64):
        x = Tensor(rng.uniform(-1.9, 1.9, size=(6, 2)), requires_grad=True)
        r = Tensor(rng.normal(size=(6, 2, 7)))
        err = grad_check(lambda: T.mul(L.BSplineBasis.apply(x, knots=knots, order=3), r).sum(), [x])
    assert err < 1e-5


# -- cnn backbone ---------------------------------------------------------------


@pytest.mark.parametrize("size,grid", [(224, 14), (64, 4)])
def test_backbone_grid(size, grid):
    assert L.CnnBackboneConfig().output_grid(size, size) == (grid, grid)


def test_backbone_forward_shape():
    net = L.CnnBackbone(L.CnnBackboneConfig([4, 8, 8, 16]), Rng(0))
    out = net.forward(Tensor(np.zeros((2, 3, 64, 64), dtype=np.float32)))
    assert out.shape == (2, 16, 4, 4)


def test_backbone_rejects_indivisible():
    with pytest.raises(ConfigError, match="divisible by 16"):
        L.CnnBackboneConfig().output_grid(50, 50)


# -- every layer at random points -----------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_layers_gradcheck(seed):
    rng = np.random.default_rng(seed)
    with T.default_dtype(np.float64):
        lin = L.Linear(4, 3, Rng(seed), dtype=np.float64)
        conv = L.Conv2d(2, 3, 3, Rng(seed), padding=1, dtype=np.float64)
        block = L.TransformerBlock(L.TransformerEncoderConfig(4, 2, 1, 6, 0.0), Rng(seed), dtype=np.float64)
        fusion = L.KanPerceptronFusion(4, 5, 2, Rng(seed), dtype=np.float64)
        x_lin = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        x_img = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
        x_seq = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        cases = [
            (lambda: T.mul(lin.forward(x_lin), Tensor(rng_w[0])).sum(), [x_lin] + lin.parameters()),
            (lambda: T.mul(T.max_pool2d(conv.forward(x_img)), Tensor(rng_w[1])).sum(), [x_img] + conv.parameters()),
            (lambda: T.mul(block.forward(x_seq), Tensor(rng_w[2])).sum(), [x_seq] + block.parameters()),
            (lambda: T.mul(fusion.forward(x_lin), Tensor(rng_w[3])).sum(), [x_lin] + fusion.parameters()),
        ]
        rng_w = [rng.normal(size=s) for s in [(2, 3), (1, 3, 2, 2), (2, 3, 4), (2, 2)]]
        for fn, params in cases:
            assert grad_check(fn, params) < 1e-5
