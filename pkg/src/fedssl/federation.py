"""Pretraining topologies: centralized, client-server, and peer-to-peer ring.

Participants are simulated in-process as sequential visits, but the module
boundary only ever moves :class:`ModelSnapshot` values between clients and
coordinator: no operation reads another participant's manifest or images,
so a wire transport could replace the in-process hand-off without touching
the protocol logic.

Client-server rounds broadcast the coordinator model, run E local epochs on
each client, and replace the coordinator model with the weight average of
the returned snapshots. Peer-to-peer training passes one model around the
ring, E local epochs per visit, for R cycles; the model coming off the ring
is the result. Centralized training simply pools the site manifests.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace as dc_replace

import numpy as np

from .augment import AugmentConfig
from .data import ImageStore, Sample
from .errors import AggregationError, ConfigurationError, ValidationError
from .snapshot import ModelSnapshot
from .ssl_train import (EarlyStopper, SslConfig, TrainHistory, ssl_train,
                        ssl_train_epoch, ssl_validation_loss)

logger = logging.getLogger(__name__)

TOPOLOGIES = ("centralized", "client_server", "peer_to_peer")

ROUND_LOG_FIELDS = ["round", "client_id", "local_loss", "server_valid_loss"]


@dataclass(frozen=True)
class FederationConfig:
    local_epochs: int = 1
    rounds: int = 10
    topology: str = "client_server"
    start_client: int = 0
    weighting: str = "uniform"  # or "data_size"
    seed: int = 0

    def __post_init__(self):
        if self.local_epochs < 1:
            raise ValidationError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.rounds < 1:
            raise ValidationError(f"rounds must be >= 1, got {self.rounds}")
        if self.topology not in TOPOLOGIES:
            raise ValidationError(f"topology must be one of {TOPOLOGIES}")
        if self.weighting not in ("uniform", "data_size"):
            raise ValidationError(f"weighting must be uniform or data_size")


def derive_client_seed(base_seed: int, client_id: int) -> int:
    return int(np.random.SeedSequence([base_seed, client_id]).generate_state(1)[0])


class ClientState:
    """One federation participant.

    Local manifests and the image store are private; the only things a
    coordinator can get out of a client are model snapshots and loss
    numbers.
    """

    def __init__(self, client_id: int, train_manifest: list[Sample],
                 valid_manifest: list[Sample], store: ImageStore, seed: int):
        if not train_manifest:
            raise ConfigurationError(f"client {client_id} has no local training data")
        self.client_id = client_id
        self.seed = seed
        self.cumulative_epochs = 0
        self._train = list(train_manifest)
        self._valid = list(valid_manifest)
        self._store = store

    @property
    def train_size(self) -> int:
        return len(self._train)

    def _local_config(self, ssl_config: SslConfig) -> SslConfig:
        return dc_replace(ssl_config, seed=self.seed)

    def run_local_epochs(self, model: ModelSnapshot, epochs: int,
                         ssl_config: SslConfig, augment_config: AugmentConfig,
                         ) -> tuple[ModelSnapshot, list[float]]:
        """E local epochs from the received snapshot; advances the private
        epoch counter so successive rounds consume fresh shuffle streams."""
        cfg = self._local_config(ssl_config)
        losses = []
        for _ in range(epochs):
            model, loss = ssl_train_epoch(model, self._train, cfg, augment_config,
                                          self.cumulative_epochs, self._store)
            self.cumulative_epochs += 1
            losses.append(loss)
        return model, losses

    def validation_terms(self, model: ModelSnapshot, ssl_config: SslConfig,
                         augment_config: AugmentConfig) -> tuple[float, int]:
        """(mean local validation loss, number of validation batches)."""
        cfg = self._local_config(ssl_config)
        if not self._valid:
            return 0.0, 0
        n_batches = len(self._valid) // cfg.n_per_batch
        if n_batches == 0:
            return 0.0, 0
        mean = ssl_validation_loss(model, self._valid, cfg, augment_config, self._store)
        return mean, n_batches


def pooled_validation_loss(model: ModelSnapshot, clients: list[ClientState],
                           ssl_config: SslConfig, augment_config: AugmentConfig,
                           ) -> float:
    """Batch-weighted mean of the clients' local validation losses."""
    total = 0.0
    batches = 0
    for client in clients:
        mean, n = client.validation_terms(model, ssl_config, augment_config)
        total += mean * n
        batches += n
    if batches == 0:
        raise ConfigurationError("no client contributed validation batches")
    return total / batches


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def aggregate_average(snapshots: list[ModelSnapshot],
                      weights: list[float] | None = None) -> ModelSnapshot:
    """Per-parameter weighted mean, accumulated in client-index order."""
    if not snapshots:
        raise AggregationError("nothing to aggregate")
    first = snapshots[0]
    for snap in snapshots[1:]:
        if snap.role != first.role:
            raise AggregationError(
                f"role mismatch: {snap.role!r} vs {first.role!r}")
        for (n0, a0), (n1, a1) in zip(first.params, snap.params):
            if n0 != n1 or a0.shape != a1.shape:
                raise AggregationError(
                    f"first divergent parameter: {n0!r} {a0.shape} vs {n1!r} {a1.shape}")
        if len(snap.params) != len(first.params):
            raise AggregationError("snapshots hold different parameter counts")
    if weights is None:
        weights = [1.0] * len(snapshots)
    if len(weights) != len(snapshots):
        raise AggregationError(
            f"{len(weights)} weights for {len(snapshots)} snapshots")
    if any(w < 0 for w in weights):
        raise AggregationError("aggregation weights must be nonnegative")
    total = float(sum(weights))
    if total <= 0:
        raise AggregationError("aggregation weights must sum to a positive value")
    out = []
    for pi, (name, _) in enumerate(first.params):
        acc = np.zeros_like(first.params[pi][1])
        for snap, w in zip(snapshots, weights):
            acc = acc + w * snap.params[pi][1]
        out.append((name, acc / total))
    return ModelSnapshot(tuple(out), first.role)


def _client_weights(clients: list[ClientState], weighting: str) -> list[float] | None:
    if weighting == "data_size":
        return [float(c.train_size) for c in clients]
    return None


# ---------------------------------------------------------------------------
# Client-server rounds
# ---------------------------------------------------------------------------

@dataclass
class RoundLog:
    rows: list[tuple[int, int, float, float]]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(ROUND_LOG_FIELDS)
            for rnd, cid, local, server in self.rows:
                writer.writerow([rnd, cid, repr(local), repr(server)])


def csfssl_round(server_model: ModelSnapshot, clients: list[ClientState],
                 local_epochs: int, ssl_config: SslConfig,
                 augment_config: AugmentConfig,
                 weighting: str = "uniform") -> tuple[ModelSnapshot, list[tuple[int, float]]]:
    """Broadcast, E local epochs per client, weight-average the returns."""
    if not clients:
        raise ConfigurationError("csfssl_round needs at least one client")
    returned = []
    local_losses = []
    for client in clients:
        snap, losses = client.run_local_epochs(server_model, local_epochs,
                                               ssl_config, augment_config)
        returned.append(snap)
        local_losses.append((client.client_id, float(np.mean(losses))))
    new_server = aggregate_average(returned, _client_weights(clients, weighting))
    return new_server, local_losses


def csfssl_run(initial_model: ModelSnapshot, clients: list[ClientState],
               federation_config: FederationConfig, ssl_config: SslConfig,
               augment_config: AugmentConfig,
               ) -> tuple[ModelSnapshot, TrainHistory, RoundLog]:
    """R client-server rounds with strict-min early stopping on the pooled
    validation loss (patience counted in rounds); best-round snapshot wins."""
    initial = pooled_validation_loss(initial_model, clients, ssl_config, augment_config)
    history = TrainHistory(initial_valid_loss=initial)
    log = RoundLog(rows=[(0, -1, float("nan"), initial)])
    stopper = EarlyStopper(patience=ssl_config.patience)
    best = server = initial_model
    logger.info("csfssl_run with %d clients, initial pooled valid loss %.4f",
                len(clients), initial)
    for rnd in range(1, federation_config.rounds + 1):
        server, local = csfssl_round(server, clients, federation_config.local_epochs,
                                     ssl_config, augment_config,
                                     federation_config.weighting)
        valid = pooled_validation_loss(server, clients, ssl_config, augment_config)
        stop = stopper.update(rnd, valid)
        if stopper.best_index == rnd:
            best = server
        mean_local = float(np.mean([l for _, l in local]))
        for cid, loss in local:
            log.rows.append((rnd, cid, loss, valid))
        history.rows.append((rnd, mean_local, valid, stop))
        history.epochs_ran = rnd
        if stop:
            break
    history.best_epoch = stopper.best_index
    return best, history, log


# ---------------------------------------------------------------------------
# Peer-to-peer ring
# ---------------------------------------------------------------------------

def ppfssl_run(initial_model: ModelSnapshot, clients: list[ClientState],
               federation_config: FederationConfig, ssl_config: SslConfig,
               augment_config: AugmentConfig,
               ) -> tuple[ModelSnapshot, TrainHistory, RoundLog]:
    """R cycles around the ring starting at ``start_client``; the model
    coming off the final visit is the shared result (no best-round restore).

    Pooled validation is evaluated and logged once per completed cycle.
    """
    if not clients:
        raise ConfigurationError("ppfssl_run needs at least one client")
    if not (0 <= federation_config.start_client < len(clients)):
        raise ValidationError(
            f"start_client {federation_config.start_client} invalid for "
            f"{len(clients)} clients")
    order = [clients[(federation_config.start_client + k) % len(clients)]
             for k in range(len(clients))]
    initial = pooled_validation_loss(initial_model, clients, ssl_config, augment_config)
    history = TrainHistory(initial_valid_loss=initial)
    log = RoundLog(rows=[(0, -1, float("nan"), initial)])
    model = initial_model
    logger.info("ppfssl_run over %d clients starting at %d, initial pooled "
                "valid loss %.4f", len(clients), federation_config.start_client, initial)
    for cycle in range(1, federation_config.rounds + 1):
        visit_losses = []
        for pos, client in enumerate(order):
            model, losses = client.run_local_epochs(
                model, federation_config.local_epochs, ssl_config, augment_config)
            local = float(np.mean(losses))
            visit_losses.append(local)
            last_visit = pos == len(order) - 1
            if last_visit:
                valid = pooled_validation_loss(model, clients, ssl_config,
                                               augment_config)
                log.rows.append((cycle, client.client_id, local, valid))
            else:
                log.rows.append((cycle, client.client_id, local, float("nan")))
        history.rows.append((cycle, float(np.mean(visit_losses)), valid, False))
        history.epochs_ran = cycle
    history.best_epoch = federation_config.rounds
    return model, history, log


# ---------------------------------------------------------------------------
# Centralized pooling
# ---------------------------------------------------------------------------

def cssl_run(initial_model: ModelSnapshot, train_manifests: list[list[Sample]],
             valid_manifests: list[list[Sample]], ssl_config: SslConfig,
             augment_config: AugmentConfig, store: ImageStore,
             ) -> tuple[ModelSnapshot, TrainHistory]:
    """Union the per-site manifests, then train centrally."""
    train = [s for manifest in train_manifests for s in manifest]
    valid = [s for manifest in valid_manifests for s in manifest]
    logger.info("cssl_run pooled %d train images from %d sites",
                len(train), len(train_manifests))
    return ssl_train(initial_model, train, valid, ssl_config, augment_config, store)
