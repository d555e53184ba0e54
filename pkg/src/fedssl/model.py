"""Encoder backbone, projection head, classifier head, and head surgery.

The backbone is a small configurable CNN: per block a 3x3 convolution,
ReLU, and a 2x2 average downsample; then global average pooling. For the
pretext task a dense projection with ReLU sits on top (role ``ssl``); for
classification the projection is removed and a single sigmoid output
neuron is appended (role ``classifier``). The output of that neuron is the
case probability.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ValidationError
from .snapshot import ModelSnapshot, ROLE_CLASSIFIER, ROLE_SSL

ALLOWED_PROJECTION_DIMS = (64, 128, 256)

# Probabilities out of the classifier are clamped to this open interval so
# downstream logs stay finite even at sigmoid saturation.
PROB_EPSILON = 1e-12


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 64
    channels: tuple[int, ...] = (8, 16, 32)
    projection_dim: int = 64
    seed: int = 0
    in_channels: int = 3
    allow_any_projection_dim: bool = False

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if not self.channels or any(c < 1 for c in self.channels):
            raise ValidationError(f"channels must be positive, got {self.channels}")
        if self.projection_dim not in ALLOWED_PROJECTION_DIMS and not self.allow_any_projection_dim:
            raise ValidationError(
                f"projection_dim {self.projection_dim} not in "
                f"{ALLOWED_PROJECTION_DIMS}; set allow_any_projection_dim to override")
        if self.projection_dim < 1:
            raise ValidationError(f"projection_dim must be positive, got {self.projection_dim}")
        if self.image_size % (2 ** len(self.channels)) != 0:
            raise ValidationError(
                f"image_size {self.image_size} not divisible by "
                f"2^{len(self.channels)} (one 2x2 downsample per block)")

    @property
    def pooled_dim(self) -> int:
        return self.channels[-1]


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def build_encoder(config: BackboneConfig) -> ModelSnapshot:
    """Seeded He-normal initialization of the SSL-role network."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed)))
    params: list[tuple[str, np.ndarray]] = []
    c_prev = config.in_channels
    for i, c in enumerate(config.channels, start=1):
        params.append((f"block{i}.conv.weight",
                       _he_normal(rng, (c, c_prev, 3, 3), fan_in=c_prev * 9)))
        params.append((f"block{i}.conv.bias", np.zeros(c)))
        c_prev = c
    params.append(("proj.weight",
                   _he_normal(rng, (config.pooled_dim, config.projection_dim),
                              fan_in=config.pooled_dim)))
    params.append(("proj.bias", np.zeros(config.projection_dim)))
    return ModelSnapshot(tuple(params), ROLE_SSL)


def swap_head(model: ModelSnapshot, seed: int) -> ModelSnapshot:
    """Replace the projection with a seeded single-output affine layer.

    Every retained encoder parameter is carried over bit-identically.
    """
    if model.role != ROLE_SSL:
        raise ContractError(f"swap_head needs an ssl-role snapshot, got {model.role!r}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    kept = [(n, a) for n, a in model.params if not n.startswith("proj.")]
    pooled_dim = kept[-1][1].shape[0]  # last conv bias length == last channels
    kept.append(("head.weight", _he_normal(rng, (pooled_dim, 1), fan_in=pooled_dim)))
    kept.append(("head.bias", np.zeros(1)))
    return ModelSnapshot(tuple(kept), ROLE_CLASSIFIER)


# ---------------------------------------------------------------------------
# Forward passes
#
# The graph variants take live parameter tensors (recorded on the active
# tape when training); the snapshot variants wrap them for inference.
# ---------------------------------------------------------------------------

def _conv_blocks(tensors: dict[str, Tensor], batch: Tensor) -> Tensor:
    x = batch
    i = 1
    while f"block{i}.conv.weight" in tensors:
        x = ad.conv2d(x, tensors[f"block{i}.conv.weight"], tensors[f"block{i}.conv.bias"])
        x = ad.relu(x)
        x = ad.avg_pool2(x)
        i += 1
    return ad.global_avg_pool(x)  # [B, pooled_dim]


def _as_tensor_map(tensors) -> dict[str, Tensor]:
    if isinstance(tensors, dict):
        return tensors
    return {t.name: t for t in tensors}


def forward_projection_graph(tensors, batch: Tensor) -> Tensor:
    """Batch [B,c,h,w] -> features [B, projection_dim] (pre-normalization)."""
    tmap = _as_tensor_map(tensors)
    pooled = _conv_blocks(tmap, batch)
    z = ad.add(ad.matmul(pooled, tmap["proj.weight"]),
               ad.reshape(tmap["proj.bias"], (1, -1)))
    return ad.relu(z)


def forward_classifier_graph(tensors, batch: Tensor) -> Tensor:
    """Batch [B,c,h,w] -> case probabilities [B,1], clamped into (0,1)."""
    tmap = _as_tensor_map(tensors)
    pooled = _conv_blocks(tmap, batch)
    z = ad.add(ad.matmul(pooled, tmap["head.weight"]),
               ad.reshape(tmap["head.bias"], (1, -1)))
    return ad.clamp(ad.sigmoid(z), PROB_EPSILON, 1.0 - PROB_EPSILON)


def forward_projection(model: ModelSnapshot, batch: np.ndarray) -> np.ndarray:
    if model.role != ROLE_SSL:
        raise ContractError(
            f"forward_projection needs an ssl-role snapshot, got {model.role!r}")
    tensors = {n: Tensor(a) for n, a in model.params}
    return forward_projection_graph(tensors, Tensor(_ensure_batch(batch))).data


def forward_classifier(model: ModelSnapshot, batch: np.ndarray) -> np.ndarray:
    """Per-image case probability, shape [B], every value in (0, 1)."""
    if model.role != ROLE_CLASSIFIER:
        raise ContractError(
            f"forward_classifier needs a classifier-role snapshot, got {model.role!r}")
    tensors = {n: Tensor(a) for n, a in model.params}
    out = forward_classifier_graph(tensors, Tensor(_ensure_batch(batch)))
    return out.data[:, 0]


def _ensure_batch(batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 3:
        batch = batch[None]
    if batch.ndim != 4:
        raise ContractError(f"batch must be [B,c,h,w] or [c,h,w], got {batch.shape}")
    return batch


def expected_param_count(config: BackboneConfig, role: str = ROLE_SSL) -> int:
    """Closed-form parameter count for a given configuration."""
    total = 0
    c_prev = config.in_channels
    for c in config.channels:
        total += c * c_prev * 9 + c
        c_prev = c
    if role == ROLE_SSL:
        total += config.pooled_dim * config.projection_dim + config.projection_dim
    else:
        total += config.pooled_dim + 1
    return total
