"""The two hybrid classifiers.

``SequentialHybridModel`` runs CNN features through a Transformer encoder as
tokens; ``ParallelFusionModel`` runs a CNN branch and a patch-token Transformer
branch side by side, concatenates the pooled features and fuses them with a
KAN-style layer. Both return one raw logit per image.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .layers import (
    CnnBackbone,
    CnnBackboneConfig,
    Conv2d,
    KanPerceptronFusion,
    KanSplineLayer,
    KanSplineLayerConfig,
    Linear,
    Module,
    TransformerEncoder,
    TransformerEncoderConfig,
    add_positional_encoding,
    positional_encoding,
)
from .rng import Rng
from .tensor import Tensor

GROUPS = ("theta", "phi", "psi", "omega")


@dataclass
class ModelConfig:
    kind: str = "sequential"
    image_size: int = 224
    backbone_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ffn_dim: int = 128
    dropout: float = 0.1
    patch_size: int = 16
    fusion: str = "spline"
    fusion_hidden: int = 64
    fusion_out: int = 16
    fusion_activation: str = "sigmoid"
    spline_grid_size: int = 8
    spline_order: int = 3
    spline_grid_min: float = -2.0
    spline_grid_max: float = 2.0
    init_seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.kind not in ("sequential", "parallel"):
            raise ConfigError(f"model kind must be 'sequential' or 'parallel', got {self.kind!r}")
        if self.fusion not in ("perceptron", "spline"):
            raise ConfigError(f"fusion must be 'perceptron' or 'spline', got {self.fusion!r}")
        if not self.backbone_channels or any(c < 1 for c in self.backbone_channels):
            raise ConfigError(f"backbone_channels must be positive, got {self.backbone_channels}")
        if self.d_model % 2:
            raise ConfigError(f"d_model must be even for positional encoding, got {self.d_model}")
        self.encoder_config()
        self.backbone_config().output_grid(self.image_size, self.image_size)
        if self.kind == "parallel" and (self.patch_size < 1 or self.image_size % self.patch_size):
            raise ConfigError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        return self

    def backbone_config(self) -> CnnBackboneConfig:
        return CnnBackboneConfig(stage_channels=list(self.backbone_channels))

    def encoder_config(self) -> TransformerEncoderConfig:
        return TransformerEncoderConfig(self.d_model, self.n_heads, self.n_layers, self.ffn_dim, self.dropout)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d).validate()


class HybridModel(Module):
    config: ModelConfig

    def group_of(self, name: str) -> str:
        raise NotImplementedError

    def parameter_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        groups: dict[str, list[tuple[str, Tensor]]] = {g: [] for g in GROUPS}
        for name, p in self.named_parameters():
            groups[self.group_of(name)].append((name, p))
        return groups

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def forward(self, images: Tensor, mode: str = "eval", rng: Rng | None = None) -> Tensor:
        raise NotImplementedError

    def __call__(self, images, mode: str = "eval", rng: Rng | None = None) -> Tensor:
        return self.forward(T.as_tensor(images), mode, rng)

    @staticmethod
    def _train_rng(mode: str, rng: Rng | None) -> Rng | None:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        return rng if mode == "train" else None


class SequentialHybridModel(HybridModel):
    """CNN -> tokens -> projection -> +PE -> encoder -> mean pool -> linear."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        config.validate()
        self.config = config
        rng = Rng(config.init_seed)
        self.cnn = CnnBackbone(config.backbone_config(), rng, dtype=dtype)
        c = self.cnn.out_channels
        self.token_projection = Linear(c, config.d_model, rng, dtype=dtype) if c != config.d_model else None
        gh, gw = config.backbone_config().output_grid(config.image_size, config.image_size)
        self._pe = positional_encoding(gh * gw, config.d_model)
        self.encoder = TransformerEncoder(config.encoder_config(), rng, dtype=dtype)
        self.head = Linear(config.d_model, 1, rng, dtype=dtype)

    @property
    def pe(self):
        return self._pe

    def group_of(self, name: str) -> str:
        if name.startswith("cnn."):
            return "theta"
        if name.startswith(("token_projection.", "encoder.")):
            return "phi"
        return "omega"

    def tokens(self, images: Tensor) -> Tensor:
        feats = self.cnn.forward(images)
        b, c, h, w = feats.shape
        if h * w != self._pe.seq_len:
            raise DimensionError(
                f"image gives {h}x{w} tokens but the model was built for {self._pe.seq_len} "
                f"(image_size={self.config.image_size})"
            )
        tokens = feats.reshape(b, c, h * w).transpose(0, 2, 1)
        if self.token_projection is not None:
            tokens = self.token_projection.forward(tokens)
        return tokens

    def forward(self, images: Tensor, mode: str = "eval", rng: Rng | None = None) -> Tensor:
        drop_rng = self._train_rng(mode, rng)
        x = add_positional_encoding(self.tokens(images), self._pe)
        x = self.encoder.forward(x, drop_rng)
        pooled = T.mean(x, axis=1)
        return self.head.forward(pooled)


class ParallelFusionModel(HybridModel):
    """CNN branch (global average pool) and patch-Transformer branch (mean pool), fused."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        config.validate()
        self.config = config
        rng = Rng(config.init_seed)
        self.cnn = CnnBackbone(config.backbone_config(), rng, dtype=dtype)
        p = config.patch_size
        self.patch_embed = Conv2d(3, config.d_model, p, rng, stride=p, dtype=dtype)
        grid = config.image_size // p
        self._pe = positional_encoding(grid * grid, config.d_model)
        self.encoder = TransformerEncoder(config.encoder_config(), rng, dtype=dtype)
        self.d1 = self.cnn.out_channels
        self.d2 = config.d_model
        width = self.d1 + self.d2
        if config.fusion == "perceptron":
            self.fusion = KanPerceptronFusion(
                width, config.fusion_hidden, config.fusion_out, rng, squash=config.fusion_activation, dtype=dtype
            )
        else:
            spline_cfg = KanSplineLayerConfig(
                width,
                config.fusion_out,
                config.spline_grid_size,
                config.spline_order,
                (config.spline_grid_min, config.spline_grid_max),
            )
            self.fusion = KanSplineLayer(spline_cfg, rng, dtype=dtype)
        self.head = Linear(config.fusion_out, 1, rng, dtype=dtype)

    @property
    def fusion_width(self) -> int:
        return self.d1 + self.d2

    def group_of(self, name: str) -> str:
        if name.startswith("cnn."):
            return "theta"
        if name.startswith(("patch_embed.", "encoder.")):
            return "phi"
        if name.startswith("fusion."):
            return "psi"
        return "omega"

    def cnn_features(self, images: Tensor) -> Tensor:
        feats = self.cnn.forward(images)
        b, c, h, w = feats.shape
        return T.mean(feats.reshape(b, c, h * w), axis=2)

    def transformer_features(self, images: Tensor, rng: Rng | None = None) -> Tensor:
        patches = self.patch_embed.forward(images)
        b, d, h, w = patches.shape
        if h * w != self._pe.seq_len:
            raise DimensionError(f"image gives {h * w} patches, model expects {self._pe.seq_len}")
        tokens = add_positional_encoding(patches.reshape(b, d, h * w).transpose(0, 2, 1), self._pe)
        return T.mean(self.encoder.forward(tokens, rng), axis=1)

    def fuse(self, f_cnn: Tensor, f_trans: Tensor) -> Tensor:
        f_concat = T.concat([f_cnn, f_trans], axis=1)
        if f_concat.shape[1] != self.fusion_width:
            raise DimensionError(f"fusion input width {f_concat.shape[1]} != {self.fusion_width}")
        return self.head.forward(self.fusion.forward(f_concat))

    def forward(self, images: Tensor, mode: str = "eval", rng: Rng | None = None) -> Tensor:
        drop_rng = self._train_rng(mode, rng)
        return self.fuse(self.cnn_features(images), self.transformer_features(images, drop_rng))


def build_model(config: ModelConfig, dtype=np.float32) -> HybridModel:
    config.validate()
    if config.kind == "sequential":
        return SequentialHybridModel(config, dtype=dtype)
    return ParallelFusionModel(config, dtype=dtype)


def predict(logits, threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Probabilities via sigmoid and labels with ties going to malignant (1)."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64).reshape(-1)
    # keep probabilities strictly inside (0, 1) even for saturated logits
    eps = np.finfo(np.float64)
    probs = np.clip(T._sigmoid(z), eps.tiny, 1.0 - eps.epsneg)
    return (probs >= threshold).astype(np.int64), probs
