"""Contrastive pretext training: pair batches, NT-Xent loss, epoch loop.

A mini-batch holds 2N images: N originals followed by their N augmented
views, so index i and index i+N form a positive pair in both directions.
The loss for an ordered pair (i, j) is

    L(i, j) = -log( exp(s_ij / t) / sum_{k != i} exp(s_ik / t) )

with s the pairwise dot-product similarities of the feature rows and t the
temperature; the batch loss averages L over all 2N ordered positive pairs.
Features are L2-normalized before the loss by default (cosine similarity);
a config flag switches to raw dot products.

Labels are never consulted: the pretext task trains on every image it is
given. Each epoch is a self-contained unit of optimization (a fresh
velocity buffer per epoch), which keeps one epoch here bit-identical to
one federated local epoch under the same seed.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import OptimizerState, Tape, Tensor
from .augment import AugmentConfig, augment
from .data import ImageStore, Sample
from .errors import ConfigurationError, ContractError, ValidationError
from .model import forward_projection_graph
from .snapshot import ModelSnapshot, ROLE_SSL

logger = logging.getLogger(__name__)

# Tag mixed into the seed stream for validation batches; outside the
# [0, max_epochs) range of epoch indices so the streams never collide.
VALID_STREAM_TAG = 2**31 - 1

HISTORY_FIELDS = ["epoch", "train_loss", "valid_loss", "stopped_flag"]


@dataclass(frozen=True)
class SslConfig:
    n_per_batch: int = 8
    temperature: float = 0.1
    lr: float = 0.01
    weight_decay: float = 1e-5
    momentum: float = 0.9
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    normalize_features: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValidationError(f"temperature must be > 0, got {self.temperature}")
        if self.n_per_batch < 1:
            raise ValidationError(f"n_per_batch must be >= 1, got {self.n_per_batch}")
        if self.patience < 1:
            raise ValidationError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ValidationError(f"max_epochs must be >= 1, got {self.max_epochs}")


@dataclass(frozen=True)
class ContrastiveBatch:
    """2N images; slot i pairs with slot i+N (an involution, no fixed points)."""

    images: np.ndarray  # [2N, c, h, w]

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] % 2:
            raise ContractError(
                f"contrastive batch must be [2N,c,h,w], got {self.images.shape}")

    @property
    def n(self) -> int:
        return self.images.shape[0] // 2

    def pair_of(self, i: int) -> int:
        return (i + self.n) % (2 * self.n)


def build_pair_batch(images: list[np.ndarray], augment_config: AugmentConfig,
                     rng: np.random.Generator) -> ContrastiveBatch:
    """Originals in slots [0, N), their augmented views in slots [N, 2N)."""
    if not images:
        raise ContractError("build_pair_batch needs at least one image")
    views = [augment(img, augment_config, rng) for img in images]
    return ContrastiveBatch(np.stack(list(images) + views))


# ---------------------------------------------------------------------------
# NT-Xent loss
# ---------------------------------------------------------------------------

def _as_tensor(features) -> Tensor:
    return features if isinstance(features, Tensor) else Tensor(features)

# Large constant subtracted on the diagonal so exp() underflows to exactly 0
# for the excluded k == i term while everything stays finite.
_DIAG_EXCLUDE = 1e9


def _row_logsumexp_excl_diag(sims: Tensor) -> Tensor:
    """Per-row log sum exp over k != i, max-subtracted for stability."""
    n = sims.data.shape[0]
    masked = ad.add(sims, ad.constant(-_DIAG_EXCLUDE * np.eye(n)))
    row_max = ad.constant(masked.data.max(axis=1, keepdims=True))
    z = ad.sum_axis(ad.exp(ad.sub(masked, row_max)), axis=1, keepdims=True)
    return ad.add(ad.log(z), row_max)


def ntxent_pair_loss(features, i: int, j: int, temperature: float) -> Tensor:
    """Loss of the ordered positive pair (i, j) over a 2N-row feature matrix."""
    if temperature <= 0:
        raise ValidationError(f"temperature must be > 0, got {temperature}")
    f = _as_tensor(features)
    n_rows = f.data.shape[0]
    if i == j:
        raise ContractError("pair loss needs two distinct indices")
    if not (0 <= i < n_rows and 0 <= j < n_rows):
        raise ContractError(f"pair indices ({i}, {j}) out of range for {n_rows} rows")
    sims = ad.scale(ad.matmul(f, ad.transpose(f)), 1.0 / temperature)
    lse = _row_logsumexp_excl_diag(sims)
    pick_i = np.zeros((1, n_rows))
    pick_i[0, i] = 1.0
    pos_mask = np.zeros((n_rows, n_rows))
    pos_mask[i, j] = 1.0
    pos = ad.tsum(ad.mul(sims, ad.constant(pos_mask)))
    lse_i = ad.tsum(ad.mul(lse, ad.constant(pick_i.T)))
    return ad.sub(lse_i, pos)


def ntxent_batch_loss(features, temperature: float) -> Tensor:
    """Mean pair loss over all 2N ordered positive pairs of a batch."""
    if temperature <= 0:
        raise ValidationError(f"temperature must be > 0, got {temperature}")
    f = _as_tensor(features)
    n_rows = f.data.shape[0]
    if n_rows % 2 or n_rows < 2:
        raise ContractError(f"batch loss needs an even row count >= 2, got {n_rows}")
    n = n_rows // 2
    sims = ad.scale(ad.matmul(f, ad.transpose(f)), 1.0 / temperature)
    lse = _row_logsumexp_excl_diag(sims)
    pos_mask = np.zeros((n_rows, n_rows))
    for i in range(n):
        pos_mask[i, i + n] = 1.0
        pos_mask[i + n, i] = 1.0
    pos = ad.sum_axis(ad.mul(sims, ad.constant(pos_mask)), axis=1, keepdims=True)
    return ad.tmean(ad.sub(lse, pos))


# ---------------------------------------------------------------------------
# Early stopping
# ---------------------------------------------------------------------------

@dataclass
class EarlyStopper:
    """Strict-minimum rule: stop after `patience` epochs without a new minimum."""

    patience: int
    best_value: float = np.inf
    best_index: int = -1
    since_best: int = 0

    def update(self, index: int, value: float) -> bool:
        """Record one validation value; returns True when training should stop."""
        if value < self.best_value:
            self.best_value = value
            self.best_index = index
            self.since_best = 0
        else:
            self.since_best += 1
        return self.since_best >= self.patience


@dataclass
class TrainHistory:
    initial_valid_loss: float
    rows: list[tuple[int, float, float, bool]] = field(default_factory=list)
    best_epoch: int = -1
    epochs_ran: int = 0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(HISTORY_FIELDS)
            writer.writerow([0, "nan", repr(self.initial_valid_loss), False])
            for epoch, train_loss, valid_loss, stopped in self.rows:
                writer.writerow([epoch, repr(train_loss), repr(valid_loss), stopped])


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

def _epoch_stream(seed: int, epoch_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch_index])))


def _batches(samples: list[Sample], n: int, rng: np.random.Generator):
    """Seeded shuffle, then consecutive groups of n; trailing remainder dropped."""
    order = rng.permutation(len(samples))
    for start in range(0, len(samples) - n + 1, n):
        yield [samples[k] for k in order[start:start + n]]


def _batch_features(tensors: dict[str, Tensor], batch: ContrastiveBatch,
                    normalize: bool) -> Tensor:
    feats = forward_projection_graph(tensors, Tensor(batch.images))
    if normalize:
        feats = ad.l2_normalize(feats)
    return feats


def ssl_train_epoch(model: ModelSnapshot, manifest: list[Sample],
                    ssl_config: SslConfig, augment_config: AugmentConfig,
                    epoch_index: int, store: ImageStore,
                    ) -> tuple[ModelSnapshot, float]:
    """One self-contained epoch of contrastive training.

    The epoch seed derives from (config seed, epoch_index); images are
    shuffled by that stream and the same stream drives augmentation, so the
    whole epoch is a pure function of (model, manifest, configs, epoch).
    """
    if model.role != ROLE_SSL:
        raise ContractError(f"ssl training needs an ssl-role snapshot, got {model.role!r}")
    if not manifest:
        raise ConfigurationError("ssl_train_epoch got an empty manifest")
    n = ssl_config.n_per_batch
    if n > len(manifest):
        raise ConfigurationError(
            f"batch half-size {n} exceeds dataset size {len(manifest)}")

    rng = _epoch_stream(ssl_config.seed, epoch_index)
    tensors = model.to_tensors()
    tmap = {t.name: t for t in tensors}
    state = OptimizerState(lr=ssl_config.lr, momentum=ssl_config.momentum,
                           weight_decay=ssl_config.weight_decay)
    losses = []
    for group in _batches(manifest, n, rng):
        images = [store.get(s) for s in group]
        batch = build_pair_batch(images, augment_config, rng)
        with Tape() as tape:
            feats = _batch_features(tmap, batch, ssl_config.normalize_features)
            loss = ntxent_batch_loss(feats, ssl_config.temperature)
        ad.check_finite(loss.data, "ssl batch loss")
        grad_map = ad.backward(tape, loss)
        grads = [grad_map.get(t.tid, np.zeros_like(t.data)) for t in tensors]
        ad.sgd_step(tensors, grads, state)
        losses.append(loss.item())
    return ModelSnapshot.from_tensors(tensors, ROLE_SSL), float(np.mean(losses))


def ssl_validation_loss(model: ModelSnapshot, manifest: list[Sample],
                        ssl_config: SslConfig, augment_config: AugmentConfig,
                        store: ImageStore) -> float:
    """Mean NT-Xent loss over fixed-seed validation batches (no training)."""
    if not manifest:
        raise ConfigurationError("validation manifest is empty")
    if ssl_config.n_per_batch > len(manifest):
        raise ConfigurationError(
            f"batch half-size {ssl_config.n_per_batch} exceeds validation size "
            f"{len(manifest)}")
    rng = _epoch_stream(ssl_config.seed, VALID_STREAM_TAG)
    tensors = {n_: Tensor(a) for n_, a in model.params}
    losses = []
    for group in _batches(manifest, ssl_config.n_per_batch, rng):
        images = [store.get(s) for s in group]
        batch = build_pair_batch(images, augment_config, rng)
        feats = _batch_features(tensors, batch, ssl_config.normalize_features)
        losses.append(ntxent_batch_loss(feats, ssl_config.temperature).item())
    return float(np.mean(losses))


def ssl_train(model: ModelSnapshot, train_manifest: list[Sample],
              valid_manifest: list[Sample], ssl_config: SslConfig,
              augment_config: AugmentConfig, store: ImageStore,
              ) -> tuple[ModelSnapshot, TrainHistory]:
    """Epoch loop with strict-min early stopping on fixed-seed validation loss.

    Returns the snapshot from the epoch with minimum validation loss and the
    per-epoch history (the pre-training validation loss is logged as the
    epoch-0 baseline but never returned as the best model).
    """
    if not valid_manifest:
        raise ConfigurationError("ssl_train needs a non-empty validation set")
    initial = ssl_validation_loss(model, valid_manifest, ssl_config,
                                  augment_config, store)
    history = TrainHistory(initial_valid_loss=initial)
    stopper = EarlyStopper(patience=ssl_config.patience)
    best_model = model
    current = model
    logger.info("ssl_train on %d train / %d valid images, initial valid loss %.4f",
                len(train_manifest), len(valid_manifest), initial)
    for epoch in range(1, ssl_config.max_epochs + 1):
        current, train_loss = ssl_train_epoch(
            current, train_manifest, ssl_config, augment_config, epoch - 1, store)
        valid_loss = ssl_validation_loss(current, valid_manifest, ssl_config,
                                         augment_config, store)
        stop = stopper.update(epoch, valid_loss)
        if stopper.best_index == epoch:
            best_model = current
        history.rows.append((epoch, train_loss, valid_loss, stop))
        history.epochs_ran = epoch
        if stop:
            break
    history.best_epoch = stopper.best_index
    return best_model, history
