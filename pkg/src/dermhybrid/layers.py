"""Network building blocks on top of :mod:`dermhybrid.tensor`.

Layers are plain parameter containers with a ``forward``. Parameters are leaf
tensors with ``requires_grad=True``; only the optimizer mutates them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .rng import Rng
from .tensor import Function, Tensor


class Module:
    """Minimal parameter container; walks attributes to find parameters."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (e.g. to float64 for gradient checks)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def _param(values: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=True)


def _dropout(x: Tensor, p: float, rng: Rng | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = 1.0 - p
    mask = (rng.random_array(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
    return T.dropout(x, mask)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: Rng, bias: bool = True, dtype=np.float32):
        self.weight = _param(rng.normal_array((out_dim, in_dim)) / math.sqrt(in_dim), dtype)
        self.bias = _param(np.zeros(out_dim), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: Rng, stride: int = 1, padding: int = 0, dtype=np.float32):
        fan_in = in_ch * kernel * kernel
        self.weight = _param(rng.normal_array((out_ch, in_ch, kernel, kernel)) * math.sqrt(2.0 / fan_in), dtype)
        self.bias = _param(np.zeros(out_ch), dtype)
        self.stride, self.padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = _param(np.ones(dim), dtype)
        self.beta = _param(np.zeros(dim), dtype)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, eps=self.eps)


# -- CNN backbone -------------------------------------------------------------


@dataclass
class CnnBackboneConfig:
    stage_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    input_channels: int = 3

    @property
    def reduction(self) -> int:
        return 2 ** len(self.stage_channels)

    def output_grid(self, h: int, w: int) -> tuple[int, int]:
        r = self.reduction
        if h % r or w % r:
            raise ConfigError(
                f"input {h}x{w} must be divisible by {r} (2^{len(self.stage_channels)} for "
                f"{len(self.stage_channels)} pooling stages)"
            )
        return h // r, w // r


class CnnBackbone(Module):
    """Stages of 3x3 conv (padding 1), ReLU and 2x2 max-pool."""

    def __init__(self, config: CnnBackboneConfig, rng: Rng, dtype=np.float32):
        self.config = config
        chans = [config.input_channels] + list(config.stage_channels)
        self.stages = [Conv2d(cin, cout, 3, rng, padding=1, dtype=dtype) for cin, cout in zip(chans, chans[1:])]

    @property
    def out_channels(self) -> int:
        return self.config.stage_channels[-1]

    def forward(self, images: Tensor) -> Tensor:
        self.config.output_grid(images.shape[2], images.shape[3])
        x = images
        for conv in self.stages:
            x = T.max_pool2d(T.relu(conv.forward(x)))
        return x


# -- positional encoding ------------------------------------------------------


@dataclass
class PositionalEncodingTable:
    seq_len: int
    d: int
    table: np.ndarray


def positional_encoding(seq_len: int, d: int) -> PositionalEncodingTable:
    """Sinusoidal table: sin on even features, cos on odd, float64."""
    if d % 2 or d <= 0:
        raise ConfigError(f"positional encoding dimension must be even and positive, got {d}")
    if seq_len < 1:
        raise ConfigError(f"seq_len must be >= 1, got {seq_len}")
    pos = np.arange(seq_len, dtype=np.float64)[:, None]
    two_i = np.arange(0, d, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, two_i / d)
    table = np.empty((seq_len, d), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return PositionalEncodingTable(seq_len, d, table)


def add_positional_encoding(tokens: Tensor, pe: PositionalEncodingTable) -> Tensor:
    bsz, length, d = tokens.shape
    if (length, d) != (pe.seq_len, pe.d):
        raise DimensionError(f"positional table {pe.seq_len}x{pe.d} does not match tokens {length}x{d}")
    table = np.broadcast_to(pe.table.astype(tokens.dtype), tokens.shape).copy()
    return tokens + Tensor(table)


# -- transformer encoder ------------------------------------------------------


@dataclass
class TransformerEncoderConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ffn_dim: int = 128
    dropout_prob: float = 0.1

    def __post_init__(self):
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ConfigError(f"dropout_prob must be in [0, 1), got {self.dropout_prob}")


class MultiHeadSelfAttention(Module):
    # Keys carry no bias: a key bias only shifts every logit in a row by the
    # same amount, which softmax cancels.
    def __init__(self, d_model: int, n_heads: int, rng: Rng, dtype=np.float32):
        if d_model % n_heads:
            raise ConfigError(f"d_model {d_model} is not divisible by n_heads {n_heads}")
        self.d_model, self.n_heads = d_model, n_heads
        self.q_proj = Linear(d_model, d_model, rng, dtype=dtype)
        self.k_proj = Linear(d_model, d_model, rng, bias=False, dtype=dtype)
        self.v_proj = Linear(d_model, d_model, rng, dtype=dtype)
        self.out_proj = Linear(d_model, d_model, rng, dtype=dtype)

    def _split(self, x: Tensor) -> Tensor:
        b, l, _ = x.shape
        dh = self.d_model // self.n_heads
        return x.reshape(b, l, self.n_heads, dh).transpose(0, 2, 1, 3)

    def attend(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return (output, attention weights of shape B x heads x L x L)."""
        if x.ndim != 3 or x.shape[-1] != self.d_model:
            raise DimensionError(f"attention expects B x L x {self.d_model}, got {x.shape}")
        b, l, _ = x.shape
        q = self._split(self.q_proj.forward(x))
        k = self._split(self.k_proj.forward(x))
        v = self._split(self.v_proj.forward(x))
        dh = self.d_model // self.n_heads
        logits = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        weights = T.softmax(logits, axis=-1)
        ctx = T.matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, l, self.d_model)
        return self.out_proj.forward(ctx), weights

    def forward(self, x: Tensor) -> Tensor:
        return self.attend(x)[0]


class TransformerBlock(Module):
    """Pre-norm block: x + attn(LN(x)), then x + ffn(LN(x))."""

    def __init__(self, config: TransformerEncoderConfig, rng: Rng, dtype=np.float32):
        self.norm1 = LayerNorm(config.d_model, dtype=dtype)
        self.attn = MultiHeadSelfAttention(config.d_model, config.n_heads, rng, dtype=dtype)
        self.norm2 = LayerNorm(config.d_model, dtype=dtype)
        self.ff1 = Linear(config.d_model, config.ffn_dim, rng, dtype=dtype)
        self.ff2 = Linear(config.ffn_dim, config.d_model, rng, dtype=dtype)
        self.dropout_prob = config.dropout_prob

    def forward(self, x: Tensor, rng: Rng | None = None) -> Tensor:
        h = self.attn.forward(self.norm1.forward(x))
        x = x + _dropout(h, self.dropout_prob, rng)
        h = self.ff2.forward(T.relu(self.ff1.forward(self.norm2.forward(x))))
        return x + _dropout(h, self.dropout_prob, rng)


class TransformerEncoder(Module):
    def __init__(self, config: TransformerEncoderConfig, rng: Rng, dtype=np.float32):
        self.config = config
        self.blocks = [TransformerBlock(config, rng, dtype=dtype) for _ in range(config.n_layers)]

    def forward(self, x: Tensor, rng: Rng | None = None) -> Tensor:
        """``rng`` enables dropout (train mode); pass None for deterministic eval."""
        for block in self.blocks:
            x = block.forward(x, rng)
        return x


# -- fusion heads -------------------------------------------------------------


_SQUASH = {"sigmoid": T.sigmoid, "relu": T.relu, "silu": T.silu, "identity": lambda t: t}


def kan_fusion_perceptron(f_concat: Tensor, w1: Tensor, w2: Tensor, squash: str = "sigmoid") -> Tensor:
    """sigma(W2 relu(W1 f)) applied to every row of ``f_concat``."""
    if f_concat.ndim != 2 or w1.ndim != 2 or w2.ndim != 2:
        raise DimensionError(f"kan_fusion_perceptron expects 2-D operands, got {f_concat.shape}, {w1.shape}, {w2.shape}")
    if f_concat.shape[1] != w1.shape[1]:
        raise DimensionError(f"fusion input width {f_concat.shape[1]} does not match W1 {w1.shape}")
    if w2.shape[1] != w1.shape[0]:
        raise DimensionError(f"W2 {w2.shape} does not compose with W1 {w1.shape}")
    hidden = T.relu(T.linear(f_concat, w1))
    return _SQUASH[squash](T.linear(hidden, w2))


class KanPerceptronFusion(Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: Rng, squash: str = "sigmoid", dtype=np.float32):
        if squash not in _SQUASH:
            raise ConfigError(f"unknown fusion activation {squash!r}")
        self.w1 = _param(rng.normal_array((hidden, in_dim)) * math.sqrt(2.0 / in_dim), dtype)
        self.w2 = _param(rng.normal_array((out_dim, hidden)) / math.sqrt(hidden), dtype)
        self.squash = squash
        self.in_dim, self.out_dim = in_dim, out_dim

    def forward(self, f: Tensor) -> Tensor:
        return kan_fusion_perceptron(f, self.w1, self.w2, self.squash)


def uniform_knots(grid_size: int, spline_order: int, grid_range: tuple[float, float]) -> np.ndarray:
    """grid_size intervals over grid_range, extended by spline_order knots per side."""
    lo, hi = grid_range
    step = (hi - lo) / grid_size
    return lo + step * np.arange(-spline_order, grid_size + spline_order + 1, dtype=np.float64)


def _cox_de_boor(x: np.ndarray, knots: np.ndarray, order: int) -> list[np.ndarray]:
    """Basis values for orders 0..order; entry k has shape x.shape + (len(knots)-1-k,)."""
    xe = x[..., None]
    inside = (xe >= knots[:-1]) & (xe < knots[1:])
    # close the last interval so x == knots[-1] is covered
    inside[..., -1] |= xe[..., 0] == knots[-1]
    bases = [inside.astype(np.float64)]
    for k in range(1, order + 1):
        prev = bases[-1]
        left = (xe - knots[: -k - 1]) / (knots[k:-1] - knots[: -k - 1]) * prev[..., :-1]
        right = (knots[k + 1 :] - xe) / (knots[k + 1 :] - knots[1:-k]) * prev[..., 1:]
        bases.append(left + right)
    return bases


def bspline_basis_values(x: np.ndarray, knots: np.ndarray, order: int) -> np.ndarray:
    return _cox_de_boor(np.asarray(x, dtype=np.float64), knots, order)[-1]


class BSplineBasis(Function):
    """x[B, n] -> B-spline basis values [B, n, len(knots) - order - 1]."""

    def forward(self, x, knots: np.ndarray, order: int):
        bases = _cox_de_boor(x.astype(np.float64), knots, order)
        self.knots, self.order = knots, order
        self.save(bases[-2] if order > 0 else None, x.dtype)
        return bases[-1].astype(x.dtype)

    def backward(self, g):
        lower, dtype = self.saved
        if lower is None:
            return (np.zeros(g.shape[:-1], dtype=g.dtype),)
        t, k = self.knots, self.order
        # d/dx B_{j,k} = k/(t[j+k]-t[j]) B_{j,k-1} - k/(t[j+k+1]-t[j+1]) B_{j+1,k-1}
        a = k / (t[k:-1] - t[: -k - 1])
        c = k / (t[k + 1 :] - t[1:-k])
        deriv = a * lower[..., :-1] - c * lower[..., 1:]
        return ((g * deriv).sum(axis=-1).astype(dtype),)


@dataclass
class KanSplineLayerConfig:
    in_dim: int
    out_dim: int
    grid_size: int = 8
    spline_order: int = 3
    grid_range: tuple[float, float] = (-2.0, 2.0)

    @property
    def n_basis(self) -> int:
        return self.grid_size + self.spline_order


class KanSplineLayer(Module):
    """Each input-output edge carries base_weight * silu(x) + a learnable B-spline.

    Inputs outside grid_range reach the spline clamped to the range edge; the
    silu term still sees the raw value.
    """

    def __init__(self, config: KanSplineLayerConfig, rng: Rng, dtype=np.float32, knots: np.ndarray | None = None):
        if config.grid_size < 1 or config.spline_order < 0:
            raise ConfigError(f"invalid spline grid: grid_size={config.grid_size}, order={config.spline_order}")
        if knots is None:
            if not config.grid_range[0] < config.grid_range[1]:
                raise ConfigError(f"grid_range must be increasing, got {config.grid_range}")
            knots = uniform_knots(config.grid_size, config.spline_order, config.grid_range)
        knots = np.asarray(knots, dtype=np.float64)
        expected = config.grid_size + 2 * config.spline_order + 1
        if knots.shape != (expected,):
            raise ConfigError(f"knot vector must have {expected} entries, got {knots.shape}")
        if np.any(np.diff(knots) <= 0):
            raise ConfigError("knot vector must be strictly increasing")
        self.config = config
        self._knots = knots
        self._lo = float(knots[config.spline_order])
        self._hi = float(knots[-config.spline_order - 1])
        n = config.n_basis
        self.base_weight = _param(rng.normal_array((config.out_dim, config.in_dim)) / math.sqrt(config.in_dim), dtype)
        self.coeff = _param(rng.normal_array((config.out_dim, config.in_dim, n)) * 0.1, dtype)

    @property
    def knots(self) -> np.ndarray:
        return self._knots

    def basis(self, x: Tensor) -> Tensor:
        clamped = T.clip(x, self._lo, self._hi)
        return BSplineBasis.apply(clamped, knots=self._knots, order=self.config.spline_order)

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.config
        if x.ndim != 2 or x.shape[1] != cfg.in_dim:
            raise DimensionError(f"spline layer expects B x {cfg.in_dim}, got {x.shape}")
        b = x.shape[0]
        base = T.linear(T.silu(x), self.base_weight)
        flat_basis = self.basis(x).reshape(b, cfg.in_dim * cfg.n_basis)
        spline = T.linear(flat_basis, self.coeff.reshape(cfg.out_dim, cfg.in_dim * cfg.n_basis))
        return base + spline

    def fit_edge(self, out_index: int, in_index: int, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Least-squares spline coefficients for one edge so that it maps xs to ys.

        Writes them into ``coeff`` and returns them. The base term is untouched.
        """
        design = bspline_basis_values(np.clip(xs, self._lo, self._hi), self._knots, self.config.spline_order)
        sol, *_ = np.linalg.lstsq(design, np.asarray(ys, dtype=np.float64), rcond=None)
        self.coeff.data[out_index, in_index] = sol
        return sol
