"""
Logistic classification head on frozen features: BCE loss, Adam, exponential
learning-rate decay, and early stopping on validation AUC with best-checkpoint
restore.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import ExperimentData, stack
from .features import FeatureBank, extract_array
from .metrics import auc
from .noise import NoisePolicy, augment, make_rng

PROB_CLAMP = 1e-7
_CKPT_HEADER = struct.Struct("<QQ")  # dim, best_epoch


@dataclass
class HeadParams:
    weights: np.ndarray
    bias: float = 0.0

    @classmethod
    def zeros(cls, dim: int) -> "HeadParams":
        return cls(np.zeros(dim), 0.0)

    def as_vector(self) -> np.ndarray:
        return np.append(self.weights, self.bias)

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "HeadParams":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[:-1].copy(), float(vec[-1]))

    def copy(self) -> "HeadParams":
        return HeadParams(self.weights.copy(), float(self.bias))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, n_params: int) -> "AdamState":
        return cls(np.zeros(n_params), np.zeros(n_params))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    lr_decay_gamma: float = 0.99
    max_epochs: int = 100
    patience: int = 5
    batch_size: int = 32
    noise_policy: NoisePolicy | None = None
    seed: int = 0
    shuffle_seed: int | None = None
    noise_seed: int | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 < self.lr_decay_gamma <= 1.0:
            raise ValueError("lr_decay_gamma must be in (0, 1]")
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("max_epochs, patience and batch_size must be >= 1")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_auc: float
    lr: float


@dataclass
class TrainedModel:
    head: HeadParams
    history: list[EpochRecord] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0

    def record(self, epoch: int) -> EpochRecord:
        return self.history[epoch - 1]


def sigmoid(z):
    # split by sign so large |z| never overflows exp
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward(head: HeadParams, f: np.ndarray) -> np.ndarray | float:
    """Probability of class 1: ``sigmoid(w . f + b)`` for one vector or an (N, d) batch."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] != head.weights.shape[0]:
        raise ValueError(f"feature dim {f.shape[-1]} does not match head dim {head.weights.shape[0]}")
    p = sigmoid(f @ head.weights + head.bias)
    return float(p) if p.ndim == 0 else p


def bce_loss(probs, labels) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if probs.size == 0:
        raise ValueError("bce_loss needs at least one sample")
    if probs.shape != labels.shape:
        raise ValueError(f"length mismatch: {probs.shape} vs {labels.shape}")
    p = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.mean(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p)))


def grad(head: HeadParams, features: np.ndarray, labels) -> tuple[np.ndarray, float]:
    """Analytic gradient of mean BCE through sigmoid and the linear layer."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.float64)
    if features.shape[0] == 0:
        raise ValueError("grad needs a nonempty batch")
    if features.shape[0] != labels.shape[0]:
        raise ValueError(f"length mismatch: {features.shape[0]} features vs {labels.shape[0]} labels")
    residual = forward(head, features) - labels
    return residual @ features / len(labels), float(residual.mean())


def adam_step(state: AdamState, params: HeadParams, g: tuple[np.ndarray, float], lr: float):
    """One bias-corrected Adam update; returns new (state, params), inputs untouched."""
    theta = params.as_vector()
    gv = np.append(np.asarray(g[0], dtype=np.float64), g[1])
    if gv.shape != theta.shape or state.m.shape != theta.shape:
        raise ValueError("gradient, parameter and optimizer state shapes disagree")
    t = state.step_count + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * gv
    v = state.beta2 * state.v + (1.0 - state.beta2) * gv * gv
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = AdamState(m, v, t, state.beta1, state.beta2, state.epsilon)
    return new_state, HeadParams.from_vector(theta)


class EarlyStopping:
    """Track the best validation AUC; stop after ``patience`` epochs without a new strict maximum."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_score = -np.inf
        self.best_epoch = 0
        self.counter = 0

    def update(self, epoch: int, score: float) -> bool:
        """Record ``score`` for ``epoch``; return True when training should stop."""
        if score > self.best_score:
            self.best_score = score
            self.best_epoch = epoch
            self.counter = 0
            return False
        self.counter += 1
        return self.counter >= self.patience


def replay_early_stopping(val_aucs, patience: int, max_epochs: int | None = None) -> tuple[int, int]:
    """Walk a val-AUC history through the stopping rule; returns (stopped_epoch, best_epoch)."""
    stopper = EarlyStopping(patience)
    limit = len(val_aucs) if max_epochs is None else min(max_epochs, len(val_aucs))
    epoch = 0
    for epoch in range(1, limit + 1):
        if stopper.update(epoch, val_aucs[epoch - 1]):
            break
    return epoch, stopper.best_epoch


def _check_both_classes(labels: np.ndarray, split: str) -> None:
    if len(labels) == 0 or len(np.unique(labels)) != 2:
        raise ValueError(f"{split} split must contain both classes")


def _noised_stack(images: np.ndarray, policy: NoisePolicy, rng) -> np.ndarray:
    return np.stack([augment(img, policy, rng)[0] for img in images])


def train(data: ExperimentData, bank: FeatureBank, cfg: TrainConfig) -> TrainedModel:
    """Train a zero-initialised logistic head on ``data.train``.

    Each epoch reshuffles the training set; with a noise policy every training
    image is re-noised before feature extraction. Validation images are always
    clean. Randomness comes from ``cfg.shuffle_seed`` and ``cfg.noise_seed``,
    which default to ``cfg.seed ^ 2`` and ``cfg.seed ^ 3``.
    """
    train_imgs, train_y = stack(data.train)
    val_imgs, val_y = stack(data.validation)
    _check_both_classes(train_y, "train")
    _check_both_classes(val_y, "validation")
    val_feats = extract_array(bank, val_imgs)
    clean_train_feats = None if cfg.noise_policy is not None else extract_array(bank, train_imgs)

    shuffle_rng = make_rng(cfg.shuffle_seed if cfg.shuffle_seed is not None else cfg.seed ^ 2)
    noise_rng = make_rng(cfg.noise_seed if cfg.noise_seed is not None else cfg.seed ^ 3)

    head = HeadParams.zeros(bank.feature_dim)
    state = AdamState.zeros(bank.feature_dim + 1)
    stopper = EarlyStopping(cfg.patience)
    best_head = head.copy()
    history: list[EpochRecord] = []
    n = len(train_y)

    for epoch in range(1, cfg.max_epochs + 1):
        lr = cfg.learning_rate * cfg.lr_decay_gamma ** (epoch - 1)
        if cfg.noise_policy is not None:
            feats = extract_array(bank, _noised_stack(train_imgs, cfg.noise_policy, noise_rng))
        else:
            feats = clean_train_feats
        order = shuffle_rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = feats[idx], train_y[idx]
            losses.append(bce_loss(forward(head, xb), yb) * len(idx))
            state, head = adam_step(state, head, grad(head, xb, yb), lr)
        val_auc = auc(forward(head, val_feats), val_y)
        history.append(EpochRecord(epoch, float(sum(losses) / n), val_auc, lr))
        improved_before = stopper.best_epoch
        stop = stopper.update(epoch, val_auc)
        if stopper.best_epoch != improved_before:
            best_head = head.copy()
        if stop:
            break

    return TrainedModel(best_head, history, stopped_epoch=epoch, best_epoch=stopper.best_epoch)


def write_history(model: TrainedModel, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_auc", "lr"])
        for rec in model.history:
            writer.writerow([rec.epoch, repr(rec.train_loss), repr(rec.val_auc), repr(rec.lr)])


def save_checkpoint(model: TrainedModel, path: str | os.PathLike) -> None:
    """16-byte header (dim, best_epoch) then weights and bias as little-endian float64."""
    head = model.head
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(head.weights.shape[0], model.best_epoch))
        fh.write(head.as_vector().astype("<f8").tobytes())


def load_checkpoint(path: str | os.PathLike) -> tuple[HeadParams, int]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CKPT_HEADER.size:
        raise ValueError(f"checkpoint {path} is truncated")
    dim, best_epoch = _CKPT_HEADER.unpack_from(raw)
    body = np.frombuffer(raw, dtype="<f8", offset=_CKPT_HEADER.size)
    if body.size != dim + 1:
        raise ValueError(f"checkpoint {path} has {body.size} values, expected {dim + 1}")
    return HeadParams.from_vector(body.astype(np.float64)), int(best_epoch)
