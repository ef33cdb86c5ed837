"""Losses, AdamW, plateau scheduling, the training loop and cross-validation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentConfig, augment
from .data import Manifest, sample_rng
from .layers import BcosModel, ModelConfig, Mode, build_model, forward
from .metrics import model_metrics
from .tensor import Tensor

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


# losses ----------------------------------------------------------------------

def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy against integer class ``targets``."""
    targets = np.asarray(targets, dtype=np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    n = len(targets)
    loss = np.mean(logsumexp - z[np.arange(n), targets])

    def backward(g):
        p = np.exp(z - logsumexp[:, None])
        p[np.arange(n), targets] -= 1
        return (g * p / n,)

    return Tensor.from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def binary_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean per-class sigmoid cross-entropy (numerically stable with-logits form)."""
    x = logits.data
    y = np.asarray(targets, dtype=x.dtype)
    if y.shape != x.shape:
        raise ValueError(f"targets {y.shape} do not match logits {x.shape}")
    loss = np.mean(np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x))))

    def backward(g):
        return (g * (1 / (1 + np.exp(-x)) - y) / x.size,)

    return Tensor.from_op(np.asarray(loss, dtype=x.dtype), (logits,), backward)


LOSSES = {"cross_entropy": cross_entropy, "binary_cross_entropy": binary_cross_entropy}


# optimisation ------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay: ``w <- w(1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps)``."""

    def __init__(self, params, lr=1e-3, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            if self.weight_decay:
                p.data *= p.data.dtype.type(1 - self.lr * self.weight_decay)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)


class PlateauScheduler:
    """Multiply the lr by ``factor`` once the monitored value has not improved for ``patience`` epochs."""

    def __init__(self, optimizer: AdamW, patience: int = 3, factor: float = 0.1):
        self.optimizer = optimizer
        self.patience = patience
        self.factor = factor
        self.best = -math.inf
        self.bad_epochs = 0

    def step(self, value: float) -> bool:
        """Record one epoch's value; returns True when the lr was reduced."""
        if value > self.best:
            self.best = value
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.optimizer.lr *= self.factor
            self.bad_epochs = 0
            return True
        return False


# training ----------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-5
    weight_decay: float = 1e-3
    scheduler_patience: int = 3
    scheduler_factor: float = 0.1
    loss: str = "cross_entropy"
    seed: int = 0
    augment: str = "none"  # none | light | heavy

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.augment not in ("none", "light", "heavy"):
            raise ValueError(f"unknown augment mode {self.augment!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr < 0 or self.weight_decay < 0 or self.scheduler_patience < 1:
            raise ValueError("lr/weight_decay must be non-negative and patience positive")
        if not 0 < self.scheduler_factor < 1:
            raise ValueError("scheduler_factor must lie in (0, 1)")


LOG_FIELDS = ("epoch", "split", "loss", "accuracy", "precision", "recall", "f1", "auc", "lr")


@dataclass
class TrainResult:
    model: BcosModel
    log: list[dict] = field(default_factory=list)

    def write_log(self, path) -> None:
        write_log(self.log, path)


def write_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for row in rows:
            w.writerow([_fmt(row.get(k)) for k in LOG_FIELDS])


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.8g}"
    return str(v)


def _check_loss(model: BcosModel, cfg: TrainConfig) -> None:
    multilabel = model.config.mode is Mode.MULTILABEL
    if multilabel and cfg.loss != "binary_cross_entropy":
        raise ValueError("multi-label models train with binary_cross_entropy")


def _loss_targets(manifest: Manifest, model: BcosModel, cfg: TrainConfig, idx) -> np.ndarray:
    labels = manifest.label_matrix()[idx]
    if cfg.loss == "cross_entropy":
        return labels.argmax(axis=1)
    return labels.astype(np.float64)


def predict_logits(model: BcosModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    dtype = model.parameters()[0].dtype
    for start in range(0, len(images), batch_size):
        out.append(forward(model, Tensor(images[start:start + batch_size], dtype=dtype)).data)
    return np.concatenate(out).astype(np.float64)


def evaluate_model(model: BcosModel, manifest: Manifest, cfg: TrainConfig | None = None) -> dict:
    """Loss and classification metrics of ``model`` on ``manifest``."""
    cfg = cfg or TrainConfig(loss="binary_cross_entropy" if model.config.mode is Mode.MULTILABEL
                             else "cross_entropy")
    logits = predict_logits(model, manifest.images())
    idx = np.arange(len(manifest))
    targets = _loss_targets(manifest, model, cfg, idx)
    loss = float(LOSSES[cfg.loss](Tensor(logits, dtype=np.float64), targets).data)
    multilabel = model.config.mode is Mode.MULTILABEL
    metric_targets = manifest.label_matrix() if multilabel else manifest.label_matrix().argmax(axis=1)
    out = model_metrics(logits, metric_targets, multilabel)
    out["loss"] = loss
    return out


def predicted_positive(model: BcosModel, logits: np.ndarray, decision_threshold: float = 0.5) -> np.ndarray:
    """Boolean [N, K] predictions: argmax for multi-class, sigmoid >= threshold for multi-label."""
    if model.config.mode is Mode.MULTILABEL:
        return 1 / (1 + np.exp(-logits)) >= decision_threshold
    pred = np.zeros(logits.shape, dtype=bool)
    pred[np.arange(len(logits)), logits.argmax(axis=1)] = True
    return pred


def _batch_images(manifest: Manifest, idx, cfg: TrainConfig, aug: AugmentConfig | None, epoch: int):
    imgs = []
    for i in idx:
        s = manifest.samples[i]
        if cfg.augment == "none" or aug is None:
            imgs.append(s.image)
        else:
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, aug.rng_seed, epoch, int(i)]))
            imgs.append(augment(s.image, s.boxes, aug, rng)[0])
    return np.stack(imgs)[:, None]


def train(model: BcosModel, train_set: Manifest, val_set: Manifest | None, cfg: TrainConfig,
          augment_cfg: AugmentConfig | None = None) -> TrainResult:
    """Mini-batch AdamW training with a plateau scheduler on validation F1.

    Shuffling and augmentation draw from streams derived from ``cfg.seed`` so
    identical inputs reproduce identical weights.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    _check_loss(model, cfg)
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = PlateauScheduler(opt, cfg.scheduler_patience, cfg.scheduler_factor)
    rng = np.random.default_rng(cfg.seed)
    dtype = model.parameters()[0].dtype
    history: list[dict] = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = Tensor(_batch_images(train_set, idx, cfg, augment_cfg, epoch), dtype=dtype)
            loss = LOSSES[cfg.loss](forward(model, x), _loss_targets(train_set, model, cfg, idx))
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(f"loss became {value} at epoch {epoch}, step {start // cfg.batch_size}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value * len(idx)
            count += len(idx)
        history.append({"epoch": epoch, "split": "train", "loss": total / count, "lr": opt.lr})
        if val_set is not None and len(val_set):
            metrics = evaluate_model(model, val_set, cfg)
            history.append({"epoch": epoch, "split": "val", **metrics, "lr": opt.lr})
            if sched.step(metrics["f1"]):
                log.info("epoch %d: lr reduced to %g", epoch, opt.lr)
            log.info("epoch %d train_loss=%.4f val_acc=%.3f val_f1=%.3f", epoch,
                     total / count, metrics["accuracy"], metrics["f1"])
    return TrainResult(model, history)


# cross-validation -----------------------------------------------------------

METRIC_KEYS = ("accuracy", "precision", "recall", "f1", "auc")


def cross_validate(manifest: Manifest, model_config: ModelConfig, cfg: TrainConfig, k: int = 5,
                   augment_cfg: AugmentConfig | None = None, prepare_train=None) -> dict:
    """Train one model per fold (held-out fold = validation) and aggregate metrics.

    ``prepare_train`` optionally transforms each training split (e.g. oversampling).
    Returns ``{"folds": [per-fold dict], "mean": {...}, "std": {...}, "models": [...]}``.
    """
    folds = []
    models = []
    for f in range(k):
        train_set, val_set = manifest.split(f)
        if prepare_train is not None:
            train_set = prepare_train(train_set)
        model = build_model(model_config)
        result = train(model, train_set, val_set, cfg, augment_cfg)
        metrics = evaluate_model(result.model, val_set, cfg)
        folds.append({"fold": f, "n_val": len(val_set), **metrics})
        models.append(result.model)
    return {"folds": folds, **summarize(folds), "models": models}


def summarize(folds: list[dict]) -> dict:
    mean, std = {}, {}
    for key in METRIC_KEYS:
        vals = [f[key] for f in folds if f.get(key) is not None]
        mean[key] = float(np.mean(vals)) if vals else None
        std[key] = float(np.std(vals)) if vals else None
    return {"mean": mean, "std": std}
