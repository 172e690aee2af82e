"""Frozen-backbone training, evaluation metrics and parameter accounting."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ConfigError, ModelConfig, TrainConfig
from .data import Dataset
from .model import ADAPTER_VARIANTS, AdsModel

log = logging.getLogger(__name__)

EVAL_BATCH = 250


class DivergenceError(FloatingPointError):
    """Training loss became non-finite."""


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: np.ndarray  # rows = true class, columns = predicted class

    def as_row(self) -> list[float]:
        return [self.accuracy, self.precision, self.recall, self.f1]


def metrics_from_confusion(cm) -> Metrics:
    """Accuracy and macro precision/recall/F1; any 0/0 ratio counts as 0."""
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    acc = float(np.trace(cm) / total) if total else 0.0
    ps, rs, fs = [], [], []
    for c in range(cm.shape[0]):
        tp = cm[c, c]
        pred, true = cm[:, c].sum(), cm[c, :].sum()
        p = tp / pred if pred else 0.0
        r = tp / true if true else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        ps.append(p)
        rs.append(r)
        fs.append(f)
    return Metrics(acc, float(np.mean(ps)), float(np.mean(rs)), float(np.mean(fs)), cm)


def confusion_matrix(labels, preds, n_classes: int = 2) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(preds)), 1)
    return cm


# ---------------------------------------------------------------------------
# freezing and parameter accounting
# ---------------------------------------------------------------------------

def freeze_backbone(model: AdsModel) -> None:
    """Freeze all tower tensors; enable the variant's trainable set."""
    for p in model.backbone.frozen_parameters():
        p.requires_grad = False
    train_proj = model.cfg.train_projections and model.variant in ADAPTER_VARIANTS + ("NO_ADAPTERS",)
    for p in model.backbone.projection_parameters():
        p.requires_grad = train_proj
    for p in model.extra_parameters():
        p.requires_grad = True


def count_trainable_params(model: AdsModel) -> int:
    return int(sum(p.size for p in model.trainable_parameters()))


def trainable_param_formula(cfg: ModelConfig, variant: str) -> int:
    """Closed-form trainable-parameter count after :func:`freeze_backbone`."""
    d_v, d_t, d, a = cfg.d_v, cfg.d_t, cfg.d, cfg.adapter_dim
    clf = 2 * d * 2 + 2
    proj = d_v * d + d_t * d if cfg.train_projections else 0
    adapters = cfg.queue_len * ((2 * d_v * a + a + d_v) + (2 * d_t * a + a + d_t))
    if variant == "NO_ADAPTERS":
        return clf + proj
    if variant == "NO_SHARING" or (variant == "ADS" and cfg.sharing == "NONE"):
        return adapters + clf + proj
    if variant in ("ADS", "V2T"):
        return adapters + d_t * d_v + d_v * d_t + clf + proj
    if variant == "LORA":
        r = cfg.lora_rank
        return cfg.L * (2 * 2 * d_v * r + 2 * 2 * d_t * r) + clf
    if variant == "PROMPT":
        return cfg.prompt_len * (d_v + d_t) + clf
    raise ConfigError(f"unknown variant {variant!r}")


def frozen_digest(model: AdsModel) -> str:
    """SHA-256 over names, shapes and bytes of every frozen tensor."""
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        if not p.requires_grad:
            h.update(name.encode())
            h.update(str(p.shape).encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# training / evaluation
# ---------------------------------------------------------------------------

def predict_logits(model: AdsModel, ds: Dataset, prefix=None, batch: int = EVAL_BATCH) -> np.ndarray:
    out = []
    with T.no_grad():
        for s in range(0, len(ds), batch):
            sl = slice(s, s + batch)
            pre = None if prefix is None else (prefix[0][sl], prefix[1][sl])
            out.append(model.forward(ds.tokens[sl], ds.patches[sl], prefix=pre).data)
    return np.concatenate(out, axis=0)


def dataset_prefix(model: AdsModel, ds: Dataset, batch: int = EVAL_BATCH):
    if model.prefix_layers == 0:
        return None
    parts_t, parts_v = [], []
    for s in range(0, len(ds), batch):
        pt, pv = model.compute_prefix(ds.tokens[s:s + batch], ds.patches[s:s + batch])
        parts_t.append(pt)
        parts_v.append(pv)
    return np.concatenate(parts_t), np.concatenate(parts_v)


def evaluate(model: AdsModel, ds: Dataset, prefix=None) -> Metrics:
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty split")
    if prefix is None:
        prefix = dataset_prefix(model, ds)
    preds = predict_logits(model, ds, prefix).argmax(axis=1)
    return metrics_from_confusion(confusion_matrix(ds.labels, preds))


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_acc: float
    val_f1: float

    def csv(self) -> str:
        return f"{self.epoch},{self.train_loss:.9g},{self.val_acc:.9g},{self.val_f1:.9g}"


EPOCH_LOG_HEADER = "epoch,train_loss,val_acc,val_f1"


def train(model: AdsModel, train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig) -> tuple[AdsModel, list[EpochLog]]:
    """Mini-batch SGD on the trainable set; keeps the best-validation-accuracy epoch."""
    cfg.validate()
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("train and validation splits must be non-empty")
    freeze_backbone(model)
    params = model.trainable_parameters()
    opt = T.SGD(params, cfg.learning_rate)
    train_pre = dataset_prefix(model, train_ds)
    val_pre = dataset_prefix(model, val_ds)

    history: list[EpochLog] = []
    best_acc, best_state = -1.0, None
    n = len(train_ds)
    for epoch in range(1, cfg.epochs + 1):
        order = T.make_rng(cfg.seed, "shuffle", epoch).permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            pre = None if train_pre is None else (train_pre[0][idx], train_pre[1][idx])
            try:
                logits = model.forward(train_ds.tokens[idx], train_ds.patches[idx], prefix=pre)
                loss = T.cross_entropy_logits(logits, train_ds.labels[idx])
            except FloatingPointError as exc:
                raise DivergenceError(f"non-finite activations at epoch {epoch}: {exc}") from None
            value = float(loss.data)
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            T.backward(loss)
            opt.step()
            total += value * len(idx)
        val = evaluate(model, val_ds, val_pre)
        history.append(EpochLog(epoch, total / n, val.accuracy, val.f1))
        log.info("epoch %d loss %.4f val_acc %.4f", epoch, total / n, val.accuracy)
        if val.accuracy > best_acc:
            best_acc = val.accuracy
            best_state = [p.data.copy() for p in params]
    for p, data in zip(params, best_state):
        p.data = data
    return model, history
