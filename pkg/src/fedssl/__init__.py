"""Deterministic simulator of centralized and federated contrastive
pretraining on synthetic two-site image data, with criteria-specific
fine-tuning and evaluation."""

__version__ = "0.1.0"

from .autodiff import OptimizerState, Tape, Tensor, backward, sgd_step
from .snapshot import ModelSnapshot, load_snapshot, save_snapshot
from .model import BackboneConfig, build_encoder, forward_classifier, \
    forward_projection, swap_head
from .augment import AugmentConfig, augment
from .ssl_train import ContrastiveBatch, SslConfig, build_pair_batch, \
    ntxent_batch_loss, ntxent_pair_loss, ssl_train, ssl_train_epoch
from .federation import ClientState, FederationConfig, aggregate_average, \
    csfssl_round, csfssl_run, cssl_run, ppfssl_run
from .data import Sample, SyntheticConfig, class_weights, generate_synthetic_sites, \
    group_split, load_image, save_image
from .finetune import FinetuneConfig, finetune, predict, weighted_bce
from .metrics import ConfusionCounts, MetricsReport, auc, confusion, metrics, \
    roc_points

__all__ = [
    "OptimizerState", "Tape", "Tensor", "backward", "sgd_step",
    "ModelSnapshot", "load_snapshot", "save_snapshot",
    "BackboneConfig", "build_encoder", "forward_classifier",
    "forward_projection", "swap_head",
    "AugmentConfig", "augment",
    "ContrastiveBatch", "SslConfig", "build_pair_batch",
    "ntxent_batch_loss", "ntxent_pair_loss", "ssl_train", "ssl_train_epoch",
    "ClientState", "FederationConfig", "aggregate_average",
    "csfssl_round", "csfssl_run", "cssl_run", "ppfssl_run",
    "Sample", "SyntheticConfig", "class_weights", "generate_synthetic_sites",
    "group_split", "load_image", "save_image",
    "FinetuneConfig", "finetune", "predict", "weighted_bce",
    "ConfusionCounts", "MetricsReport", "auc", "confusion", "metrics",
    "roc_points",
]
