"""Supervised classifier training from a chosen initialization.

An SSL-role snapshot gets its projection swapped for a single sigmoid
output neuron, then every parameter is trained on the labeled images with
class-weighted binary cross-entropy. Class weights are computed on the
training labels once and frozen. Early stopping mirrors the pretext
trainer: strict-minimum rule on the validation loss, best snapshot
returned, one self-contained optimizer run per epoch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import OptimizerState, Tape, Tensor
from .data import ImageStore, Sample, class_weights, labeled_only, LABEL_CASE
from .errors import ConfigurationError, ContractError, ValidationError
from .model import forward_classifier, forward_classifier_graph, swap_head
from .snapshot import ModelSnapshot, ROLE_CLASSIFIER, ROLE_SSL
from .ssl_train import EarlyStopper, TrainHistory, _epoch_stream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 0.001
    weight_decay: float = 1e-6
    momentum: float = 0.09
    max_epochs: int = 50
    batch_size: int = 4
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("lr", "weight_decay", "momentum"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative")
        if self.patience < 1 or self.max_epochs < 1:
            raise ValidationError("patience and max_epochs must be >= 1")


def weighted_bce(probs, labels, weights) -> Tensor:
    """-(1/B) * sum w_y * [y log p + (1-y) log(1-p)], logs clamped at 1e-12.

    ``probs`` may be a live graph tensor [B] or [B,1]; labels are 0/1 ints;
    ``weights`` maps class -> weight (unit weights when None).
    """
    p = probs if isinstance(probs, Tensor) else Tensor(probs)
    if p.data.ndim == 2 and p.data.shape[1] == 1:
        p = ad.reshape(p, (p.data.shape[0],))
    y = np.asarray(labels, dtype=np.float64)
    if p.data.shape != y.shape:
        raise ContractError(f"probs {p.data.shape} vs labels {y.shape}")
    if weights is None:
        weights = {0: 1.0, 1: 1.0}
    w = np.where(y == 1.0, weights[1], weights[0])
    log_p = ad.log(ad.clamp(p, lo=1e-12))
    log_not_p = ad.log(ad.clamp(ad.sub(ad.constant(np.ones_like(y)), p), lo=1e-12))
    terms = ad.add(ad.mul(ad.constant(w * y), log_p),
                   ad.mul(ad.constant(w * (1.0 - y)), log_not_p))
    return ad.neg(ad.tmean(terms))


def _label_int(sample: Sample) -> int:
    return 1 if sample.label == LABEL_CASE else 0


def _validation_loss(tensors_snapshot: ModelSnapshot, samples: list[Sample],
                     weights, store: ImageStore) -> float:
    batch = np.stack([store.get(s) for s in samples])
    probs = forward_classifier(tensors_snapshot, batch)
    return weighted_bce(probs, [_label_int(s) for s in samples], weights).item()


def finetune(model_init: ModelSnapshot, train_manifest: list[Sample],
             valid_manifest: list[Sample], config: FinetuneConfig,
             store: ImageStore) -> tuple[ModelSnapshot, TrainHistory]:
    """Full fine-tune of a classifier from the given initialization.

    ``model_init`` may be an SSL-role snapshot (the head is swapped first,
    seeded from the run seed) or an already-prepared classifier snapshot.
    Unlabeled samples are excluded up front with a logged count.
    """
    if model_init.role == ROLE_SSL:
        model = swap_head(model_init, seed=config.seed)
    else:
        model = model_init

    train = labeled_only(train_manifest)
    dropped = len(train_manifest) - len(train)
    if dropped:
        logger.info("finetune excluded %d unlabeled training samples", dropped)
    if not train:
        raise ConfigurationError("no labeled training images to fine-tune on")
    valid = labeled_only(valid_manifest)
    if not valid:
        raise ConfigurationError("no labeled validation images for early stopping")

    weights = class_weights([_label_int(s) for s in train])
    initial = _validation_loss(model, valid, weights, store)
    history = TrainHistory(initial_valid_loss=initial)
    stopper = EarlyStopper(patience=config.patience)
    best = current = model
    logger.info("finetune on %d labeled train / %d labeled valid images, "
                "initial valid loss %.4f", len(train), len(valid), initial)

    for epoch in range(1, config.max_epochs + 1):
        rng = _epoch_stream(config.seed, epoch - 1)
        tensors = current.to_tensors()
        tmap = {t.name: t for t in tensors}
        state = OptimizerState(lr=config.lr, momentum=config.momentum,
                               weight_decay=config.weight_decay)
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(train), config.batch_size):
            group = [train[k] for k in order[start:start + config.batch_size]]
            batch = np.stack([store.get(s) for s in group])
            labels = [_label_int(s) for s in group]
            with Tape() as tape:
                probs = forward_classifier_graph(tmap, Tensor(batch))
                loss = weighted_bce(probs, labels, weights)
            ad.check_finite(loss.data, "finetune batch loss")
            grad_map = ad.backward(tape, loss)
            grads = [grad_map.get(t.tid, np.zeros_like(t.data)) for t in tensors]
            ad.sgd_step(tensors, grads, state)
            losses.append(loss.item())
        current = ModelSnapshot.from_tensors(tensors, ROLE_CLASSIFIER)
        valid_loss = _validation_loss(current, valid, weights, store)
        stop = stopper.update(epoch, valid_loss)
        if stopper.best_index == epoch:
            best = current
        history.rows.append((epoch, float(np.mean(losses)), valid_loss, stop))
        history.epochs_ran = epoch
        if stop:
            break
    history.best_epoch = stopper.best_index
    return best, history


def predict(classifier: ModelSnapshot, manifest: list[Sample],
            store: ImageStore, batch_size: int = 64,
            ) -> list[tuple[str, int, float]]:
    """(sample_id, label, case probability) for every labeled sample."""
    if classifier.role != ROLE_CLASSIFIER:
        raise ContractError(
            f"predict needs a classifier snapshot, got {classifier.role!r}")
    samples = labeled_only(manifest)
    out = []
    for start in range(0, len(samples), batch_size):
        group = samples[start:start + batch_size]
        batch = np.stack([store.get(s) for s in group])
        probs = forward_classifier(classifier, batch)
        out.extend((s.sample_id, _label_int(s), float(p))
                   for s, p in zip(group, probs))
    return out
