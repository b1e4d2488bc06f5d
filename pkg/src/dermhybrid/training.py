"""Class-weighted BCE, Adam with decoupled weight decay, StepLR and the epoch loop."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import AugmentationConfig, LabeledDataset, load_batch, make_batches
from .errors import ConfigError, DataError, DivergenceError
from .metrics import MetricsReport, evaluate_predictions
from .models import HybridModel, ModelConfig, build_model, predict
from .rng import Rng, derive_seed
from .tensor import Tensor

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
LOGIT_CLAMP = math.log((1.0 - PROB_CLAMP) / PROB_CLAMP)


@dataclass(frozen=True)
class ClassWeights:
    # rationals, so w0 * n0 + w1 * n1 == n0 + n1 holds exactly; the loss
    # converts them to floats
    w0: Fraction
    w1: Fraction
    n0: int
    n1: int


def class_weights(n0: int, n1: int) -> ClassWeights:
    """w_c = N / (2 n_c), so each class carries half of the total weight."""
    if n0 < 1 or n1 < 1:
        raise DataError(f"class weights need both classes present, got n0={n0}, n1={n1}")
    n = n0 + n1
    return ClassWeights(w0=Fraction(n, 2 * n0), w1=Fraction(n, 2 * n1), n0=n0, n1=n1)


UNIT_WEIGHTS = ClassWeights(Fraction(1), Fraction(1), 1, 1)


def _sample_weights(labels: np.ndarray, weights: ClassWeights, dtype) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    if not np.isin(y, (0.0, 1.0)).all():
        raise DataError("labels must be 0 or 1")
    w = np.where(y == 1.0, float(weights.w1), float(weights.w0))
    return y.astype(dtype), w.astype(dtype)


def weighted_bce(probabilities: Tensor, labels, weights: ClassWeights = UNIT_WEIGHTS) -> Tensor:
    """-(1/B) sum w(y) [y log p + (1 - y) log(1 - p)], p clamped to [1e-7, 1 - 1e-7]."""
    probabilities = T.as_tensor(probabilities)
    y, w = _sample_weights(labels, weights, probabilities.dtype)
    if y.shape != probabilities.shape:
        raise DataError(f"labels {y.shape} do not match probabilities {probabilities.shape}")
    p = T.clip(probabilities, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = T.mul(Tensor(y), T.log(p)) + T.mul(Tensor(1 - y), T.log(1.0 - p))
    return -T.mean(T.mul(Tensor(w), ll))


def weighted_bce_logits(logits: Tensor, labels, weights: ClassWeights = UNIT_WEIGHTS) -> Tensor:
    """The same loss evaluated from logits.

    log(sigmoid(z)) = -softplus(-z) avoids the cancellation in 1 - p; clamping
    z to +-logit(1 - 1e-7) matches the probability clamp.
    """
    logits = T.as_tensor(logits)
    y, w = _sample_weights(labels, weights, logits.dtype)
    if y.shape != logits.shape:
        raise DataError(f"labels {y.shape} do not match logits {logits.shape}")
    z = T.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    nll = T.mul(Tensor(y), T.softplus(-z)) + T.mul(Tensor(1 - y), T.softplus(z))
    return T.mean(T.mul(Tensor(w), nll))


# -- optimizer ------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimizerState, names: Sequence[str] | None = None) -> OptimizerState:
    """One Adam update with bias correction, then decoupled weight decay."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for k, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ValueError(f"shape mismatch for parameter {k}: param {p.shape}, grad {g.shape}, moment {state.m[k].shape}")
        if not np.isfinite(g).all():
            label = names[k] if names else f"#{k}"
            raise DivergenceError(f"non-finite gradient for parameter {label}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k, (p, g) in enumerate(zip(params, grads)):
        dt = p.data.dtype.type
        m, v = state.m[k], state.v[k]
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * (g * g)
        m_hat = m / dt(c1)
        v_hat = v / dt(c2)
        p.data -= dt(state.lr) * m_hat / (np.sqrt(v_hat) + dt(state.eps))
        if state.weight_decay:
            p.data -= dt(state.lr * state.weight_decay) * p.data
    return state


# -- schedule -----------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-4
    lr_step: int = 5
    lr_gamma: float = 0.5
    weight_decay: float = 1e-5
    seed: int = 0
    deterministic: bool = True
    select_on: str = "weighted_f1"

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.lr_step < 1 or not self.lr_gamma > 0:
            raise ConfigError(f"lr_step must be >= 1 and lr_gamma > 0, got {self.lr_step}, {self.lr_gamma}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.select_on not in ("weighted_f1", "f1"):
            raise ConfigError(f"select_on must be 'weighted_f1' or 'f1', got {self.select_on!r}")
        return self


def step_lr(epoch_index: int, config: TrainConfig) -> float:
    """Learning rate for a 0-based epoch: lr * gamma ** (epoch // lr_step)."""
    return config.lr * config.lr_gamma ** (epoch_index // config.lr_step)


# -- loop ---------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_accuracy: float
    val_precision: float
    val_recall: float
    val_f1: float

    def as_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class TrainResult:
    model: HybridModel
    best_state: dict[str, np.ndarray]
    best_epoch: int
    best_val_f1: float
    optimizer: OptimizerState  # as it was right after the best epoch
    log: list[EpochRecord]


def forward_loss(model: HybridModel, images: np.ndarray, labels: np.ndarray, weights: ClassWeights, mode: str, rng: Rng | None = None) -> Tensor:
    return weighted_bce_logits(model(Tensor(images), mode=mode, rng=rng), labels, weights)


def train_epoch(
    model: HybridModel,
    batches: Sequence[tuple[np.ndarray, np.ndarray]],
    weights: ClassWeights,
    state: OptimizerState,
    dropout_seed: int | None = None,
) -> float:
    """One pass of forward, backward and Adam over the given batches; returns mean loss."""
    named = list(model.named_parameters())
    names = [n for n, _ in named]
    params = [p for _, p in named]
    total, count = 0.0, 0
    for b, (images, labels) in enumerate(batches):
        rng = Rng(derive_seed(dropout_seed, b)) if dropout_seed is not None else None
        for p in params:
            p.grad = None
        loss = forward_loss(model, images, labels, weights, "train", rng)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite training loss at batch {b}")
        grads = T.backward(loss, params)
        adam_step(params, grads, state, names)
        total += value * len(labels)
        count += len(labels)
    return total / count


def predict_dataset(model: HybridModel, dataset: LabeledDataset, image_size: int, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode logits and labels over a whole dataset, in manifest order."""
    logits, labels = [], []
    with T.no_grad():
        for idx in make_batches(len(dataset), batch_size, shuffle=False):
            images, y = load_batch(dataset, idx, image_size)
            logits.append(model(Tensor(images), mode="eval").data.reshape(-1))
            labels.append(y.reshape(-1))
    return np.concatenate(logits), np.concatenate(labels).astype(np.int64)


def evaluate(model: HybridModel, batches, weights: ClassWeights) -> tuple[float, MetricsReport]:
    """Mean weighted loss and metrics over pre-assembled eval batches."""
    logits, labels = [], []
    total = 0.0
    with T.no_grad():
        for images, y in batches:
            z = model(Tensor(images), mode="eval")
            total += weighted_bce_logits(z, y, weights).item() * len(y)
            logits.append(z.data.reshape(-1))
            labels.append(y.reshape(-1))
    z = np.concatenate(logits)
    y = np.concatenate(labels).astype(np.int64)
    pred, prob = predict(z)
    return total / len(y), evaluate_predictions(y, pred, prob)


def train(
    model_config: ModelConfig,
    train_set: LabeledDataset,
    val_set: LabeledDataset,
    config: TrainConfig,
    augmentation: AugmentationConfig | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Train with per-epoch validation; keeps the state with the best validation F1."""
    config.validate()
    if len(train_set) == 0 or len(val_set) == 0:
        raise DataError("train and validation splits must be nonempty")
    n0, n1 = train_set.class_counts()
    weights = class_weights(n0, n1) if n0 and n1 else UNIT_WEIGHTS
    model = build_model(model_config)
    size = model_config.image_size
    state = OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    val_batches = [load_batch(val_set, idx, size) for idx in make_batches(len(val_set), config.batch_size, shuffle=False)]

    log: list[EpochRecord] = []
    best_f1, best_epoch, best_state, best_optimizer = -1.0, -1, None, state
    for epoch in range(config.epochs):
        state.lr = step_lr(epoch, config)
        index_batches = make_batches(len(train_set), config.batch_size, config.seed, shuffle=True, epoch=epoch)
        batches = (
            load_batch(train_set, idx, size, augmentation, config.seed, epoch) for idx in index_batches
        )
        try:
            train_loss = train_epoch(model, batches, weights, state, derive_seed(config.seed, epoch, 0xD0))
        except DivergenceError as exc:
            raise DivergenceError(f"epoch {epoch}: {exc}") from exc
        val_loss, report = evaluate(model, val_batches, weights)
        if not math.isfinite(val_loss):
            raise DivergenceError(f"epoch {epoch}: non-finite validation loss")
        f1 = report.weighted_f1 if config.select_on == "weighted_f1" else report.f1
        record = EpochRecord(
            epoch=epoch,
            lr=state.lr,
            train_loss=train_loss,
            val_loss=val_loss,
            val_accuracy=report.accuracy,
            val_precision=report.weighted_precision if config.select_on == "weighted_f1" else report.precision,
            val_recall=report.weighted_recall if config.select_on == "weighted_f1" else report.recall,
            val_f1=f1,
        )
        log.append(record)
        logger.info("epoch %d lr=%.3g train_loss=%.4f val_loss=%.4f val_f1=%.4f", epoch, state.lr, train_loss, val_loss, f1)
        if f1 > best_f1:
            best_f1, best_epoch = f1, epoch
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
            best_optimizer = copy.deepcopy(state)
        if on_epoch is not None:
            on_epoch(record)
    for name, p in model.named_parameters():
        p.data[...] = best_state[name]
    return TrainResult(model, best_state, best_epoch, best_f1, best_optimizer, log)
