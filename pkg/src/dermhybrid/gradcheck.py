"""Central-difference gradient checking in float64."""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import GradCheckError
from . import tensor as T
from .tensor import Tensor, backward


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-12, abs(analytic) + abs(numeric))


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` rebuilds the scalar loss from the current values of ``params`` on
    every call. Parameters must be float64. With ``max_coords`` only that many
    coordinates per parameter are probed (chosen with ``rng``).
    """
    for p in params:
        if p.dtype != np.float64:
            raise GradCheckError(f"grad_check needs float64 parameters, got {p.dtype} for {p.name or p.shape}")
        p.grad = None
    loss = fn()
    if not np.isfinite(loss.data).all():
        raise GradCheckError("loss is not finite at the check point")
    analytic = [g.copy() for g in backward(loss, params)]

    worst = 0.0
    for k, (p, ga) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        coords = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = sorted(rng.choice(flat.size, size=max_coords, replace=False).tolist())
        ga_flat = ga.reshape(-1)
        label = p.name or f"param[{k}]"
        for i in coords:
            x = flat[i]
            h = 1e-6 * max(1.0, abs(x))
            flat[i] = x + h
            fp = fn().item()
            flat[i] = x - h
            fm = fn().item()
            flat[i] = x
            numeric = (fp - fm) / (2 * h)
            if not (math.isfinite(fp) and math.isfinite(fm) and math.isfinite(ga_flat[i])):
                raise GradCheckError(f"non-finite value at {label} coordinate {i}")
            worst = max(worst, relative_error(float(ga_flat[i]), numeric))
    return worst


# -- layer suite ----------------------------------------------------------------


def _weighted_sum(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    r = Tensor(rng.normal(size=out.shape))
    return lambda y: T.mul(y, r).sum()


def _suite_cases(seed: int):
    """(name, builder) pairs; each builder returns (loss_fn, params) in float64."""
    from . import layers as L
    from .models import ModelConfig, build_model
    from .rng import Rng
    from .training import class_weights, weighted_bce_logits

    def leaf(rng, *shape, scale=1.0):
        return Tensor(rng.normal(size=shape) * scale, requires_grad=True)

    def conv(rng):
        x, w, b = leaf(rng, 2, 2, 5, 5), leaf(rng, 3, 2, 3, 3), leaf(rng, 3)
        head = _weighted_sum(T.conv2d(x, w, b, stride=2, padding=1), rng)
        return (lambda: head(T.conv2d(x, w, b, stride=2, padding=1))), [x, w, b]

    def linear(rng):
        x, w, b = leaf(rng, 3, 4), leaf(rng, 5, 4), leaf(rng, 5)
        head = _weighted_sum(T.linear(x, w, b), rng)
        return (lambda: head(T.linear(x, w, b))), [x, w, b]

    def pool(rng):
        x = leaf(rng, 2, 2, 4, 4)
        head = _weighted_sum(T.max_pool2d(x), rng)
        return (lambda: head(T.max_pool2d(x))), [x]

    def layer_norm(rng):
        x, g, b = leaf(rng, 3, 6), leaf(rng, 6), leaf(rng, 6)
        head = _weighted_sum(T.layer_norm(x, g, b), rng)
        return (lambda: head(T.layer_norm(x, g, b))), [x, g, b]

    def attention(rng):
        layer = L.MultiHeadSelfAttention(4, 2, Rng(seed), dtype=np.float64)
        x = leaf(rng, 2, 3, 4)
        head = _weighted_sum(layer.forward(x), rng)
        return (lambda: head(layer.forward(x))), [x] + layer.parameters()

    def encoder_block(rng):
        cfg = L.TransformerEncoderConfig(d_model=4, n_heads=2, n_layers=1, ffn_dim=6, dropout_prob=0.0)
        enc = L.TransformerEncoder(cfg, Rng(seed), dtype=np.float64)
        x = leaf(rng, 2, 3, 4)
        head = _weighted_sum(enc.forward(x), rng)
        return (lambda: head(enc.forward(x))), [x] + enc.parameters()

    def pe_addition(rng):
        pe = L.positional_encoding(5, 4)
        x = leaf(rng, 2, 5, 4)
        w = leaf(rng, 3, 4)
        head = _weighted_sum(T.linear(L.add_positional_encoding(x, pe), w), rng)
        return (lambda: head(T.linear(L.add_positional_encoding(x, pe), w))), [x, w]

    def perceptron_fusion(rng):
        f, w1, w2 = leaf(rng, 3, 6), leaf(rng, 5, 6), leaf(rng, 2, 5)
        head = _weighted_sum(L.kan_fusion_perceptron(f, w1, w2), rng)
        return (lambda: head(L.kan_fusion_perceptron(f, w1, w2))), [f, w1, w2]

    def spline_layer(rng):
        layer = L.KanSplineLayer(L.KanSplineLayerConfig(3, 2, grid_size=4), Rng(seed), dtype=np.float64)
        layer.coeff.data[...] = rng.normal(size=layer.coeff.shape)
        # stratified inputs: every grid interval holds a sample, so no coefficient
        # is reached only through a vanishing B-spline tail
        cols = [rng.permutation(np.linspace(-1.9, 1.9, 8)) + rng.uniform(-0.05, 0.05, 8) for _ in range(3)]
        x = Tensor(np.stack(cols, axis=1), requires_grad=True)
        head = _weighted_sum(layer.forward(x), rng)
        return (lambda: head(layer.forward(x))), [x] + layer.parameters()

    def bce(rng):
        z = leaf(rng, 6, 1, scale=2.0)
        y = np.array([[1], [0], [1], [1], [0], [0]], dtype=np.float64)
        w = class_weights(2, 4)
        return (lambda: weighted_bce_logits(z, y, w)), [z]

    def model(kind: str, fusion: str):
        def build(rng):
            cfg = ModelConfig(
                kind=kind, image_size=8, backbone_channels=[3, 4], d_model=4, n_heads=2, n_layers=1,
                ffn_dim=8, dropout=0.0, patch_size=4, fusion=fusion, fusion_hidden=6, fusion_out=3,
                init_seed=seed,
            )
            net = build_model(cfg, dtype=np.float64)
            x = Tensor(rng.normal(size=(2, 3, 8, 8)))
            y = np.array([[1.0], [0.0]])
            return (lambda: weighted_bce_logits(net(x), y)), net.parameters()

        return build

    return [
        ("conv2d", conv),
        ("linear", linear),
        ("max_pool2d", pool),
        ("layer_norm", layer_norm),
        ("attention", attention),
        ("encoder_block", encoder_block),
        ("pe_addition", pe_addition),
        ("perceptron_fusion", perceptron_fusion),
        ("spline_layer", spline_layer),
        ("weighted_bce", bce),
        ("sequential_model", model("sequential", "spline")),
        ("parallel_model_perceptron", model("parallel", "perceptron")),
        ("parallel_model_spline", model("parallel", "spline")),
    ]


SUITE_TOLERANCE = 1e-5


def run_suite(seed: int = 0, only: Sequence[str] | None = None) -> list[tuple[str, float]]:
    """Max relative gradient error for every layer kind and both full models."""
    rows = []
    with T.default_dtype(np.float64):
        for index, (name, build) in enumerate(_suite_cases(seed)):
            if only and name not in only:
                continue
            fn, params = build(np.random.default_rng([seed, index]))
            rows.append((name, grad_check(fn, params)))
    return rows
