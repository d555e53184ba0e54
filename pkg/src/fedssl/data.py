"""Synthetic two-site dataset generation, woman-level splits, image I/O.

Each site hosts women (groups); a woman has one enrolled visit with two
captured images (a single-image visit appears only as an explicit remainder
when a configured odd image total forces it). Every woman carries a latent
severity score; her images render a lesion-like blob whose contrast is
monotone in that score, on top of per-woman skin tone, low-frequency
texture, a severity-independent distractor blob, per-site appearance shift,
and pixel noise. A site labels a woman ``case`` iff her severity exceeds
that site's threshold, so two sites with different thresholds genuinely
disagree on the band between them.

All randomness flows from ``numpy`` PCG64 streams keyed by (seed, site,
woman, image), so manifests and image bytes are pure functions of
(config, seed).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigurationError, DataIOError, ValidationError

SITE_A = "A"
SITE_B = "B"
SITES = (SITE_A, SITE_B)

LABEL_CASE = "case"
LABEL_CONTROL = "control"
LABEL_UNLABELED = "unlabeled"

SPLIT_TRAIN = "train"
SPLIT_VALID = "valid"
SPLIT_TEST = "test"
SPLIT_UNASSIGNED = "unassigned"
SPLITS = (SPLIT_TRAIN, SPLIT_VALID, SPLIT_TEST)

MANIFEST_FIELDS = ["sample_id", "site", "group_id", "visit", "label", "split", "path"]
GROUPS_FIELDS = ["group_id", "site", "split", "severity", "label"]


@dataclass(frozen=True)
class Sample:
    sample_id: str
    site: str
    group_id: str
    visit: int
    label: str
    split: str
    path: str


@dataclass(frozen=True)
class GroupRecord:
    group_id: str
    site: str
    split: str
    severity: float
    label: str


@dataclass(frozen=True)
class CellShape:
    """Labeled women of one (split, class) cell."""

    women: int
    labeled_images: int

    def __post_init__(self):
        if self.women < 0:
            raise ValidationError(f"women count must be nonnegative, got {self.women}")
        if not (self.women <= self.labeled_images <= 2 * self.women):
            raise ValidationError(
                f"labeled_images {self.labeled_images} must lie in "
                f"[women, 2*women] = [{self.women}, {2 * self.women}]")


@dataclass(frozen=True)
class SplitShape:
    case: CellShape
    control: CellShape
    total_images: int

    def __post_init__(self):
        floor = 2 * (self.case.women + self.control.women)
        if self.total_images < floor:
            raise ValidationError(
                f"total_images {self.total_images} below the {floor} images "
                f"of the labeled women alone")


@dataclass(frozen=True)
class SiteShape:
    """Explicit per-split composition of one site."""

    train: SplitShape
    valid: SplitShape
    test: SplitShape
    threshold: float = 0.5
    brightness_offset: float = 0.0
    channel_gain: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not (0.0 < self.threshold < 1.0):
            raise ValidationError(f"threshold must be in (0,1), got {self.threshold}")


@dataclass(frozen=True)
class SiteFractions:
    """Fraction-parameterized site; splits are left unassigned for group_split."""

    women: int
    case_fraction: float = 0.35
    labeled_fraction: float = 0.3
    threshold: float = 0.5
    brightness_offset: float = 0.0
    channel_gain: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.women < 1:
            raise ValidationError("women must be >= 1")
        for name in ("case_fraction", "labeled_fraction"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"{name} must be in [0,1], got {v}")
        if not (0.0 < self.threshold < 1.0):
            raise ValidationError(f"threshold must be in (0,1), got {self.threshold}")


@dataclass(frozen=True)
class SyntheticConfig:
    site_a: SiteShape | SiteFractions
    site_b: SiteShape | SiteFractions
    image_size: int = 64
    blob_gain: float = 0.45
    texture_amp: float = 0.04
    brightness_jitter: float = 0.12
    distractor_max: float = 0.30
    noise_sigma: float = 0.02

    def __post_init__(self):
        if self.image_size < 8:
            raise ValidationError(f"image_size must be >= 8, got {self.image_size}")


def full_two_site_config(image_size: int = 64) -> SyntheticConfig:
    """The published two-cohort composition, reproduced exactly.

    Odd labeled-image counts mean some women contribute a single labeled
    image; odd split totals force exactly one single-image visit.
    """
    site_a = SiteShape(
        train=SplitShape(CellShape(91, 182), CellShape(181, 361), total_images=2029),
        valid=SplitShape(CellShape(22, 44), CellShape(45, 90), total_images=520),
        test=SplitShape(CellShape(25, 49), CellShape(50, 99), total_images=150),
        threshold=0.55,
    )
    site_b = SiteShape(
        train=SplitShape(CellShape(124, 248), CellShape(242, 481), total_images=3145),
        valid=SplitShape(CellShape(31, 62), CellShape(60, 120), total_images=791),
        test=SplitShape(CellShape(34, 68), CellShape(65, 130), total_images=198),
        threshold=0.45,
        brightness_offset=0.06,
        channel_gain=(0.97, 1.04, 1.08),
    )
    return SyntheticConfig(site_a=site_a, site_b=site_b, image_size=image_size)


def benchmark_two_site_config(image_size: int = 64) -> SyntheticConfig:
    """Desk-scale benchmark: ~600 training images per site, few labels."""
    def site(threshold, offset=0.0, gain=(1.0, 1.0, 1.0)):
        return SiteShape(
            train=SplitShape(CellShape(15, 30), CellShape(30, 60), total_images=600),
            valid=SplitShape(CellShape(5, 10), CellShape(10, 20), total_images=120),
            test=SplitShape(CellShape(12, 24), CellShape(24, 48), total_images=144),
            threshold=threshold, brightness_offset=offset, channel_gain=gain)
    return SyntheticConfig(
        site_a=site(0.55),
        site_b=site(0.45, offset=0.06, gain=(0.97, 1.04, 1.08)),
        image_size=image_size)


def tiny_two_site_config(image_size: int = 32) -> SyntheticConfig:
    """Smallest end-to-end shape, for fast functional tests."""
    def site(threshold, offset=0.0, gain=(1.0, 1.0, 1.0)):
        return SiteShape(
            train=SplitShape(CellShape(4, 8), CellShape(6, 12), total_images=40),
            valid=SplitShape(CellShape(2, 4), CellShape(4, 8), total_images=16),
            test=SplitShape(CellShape(3, 6), CellShape(4, 8), total_images=14),
            threshold=threshold, brightness_offset=offset, channel_gain=gain)
    return SyntheticConfig(
        site_a=site(0.55),
        site_b=site(0.45, offset=0.06, gain=(0.97, 1.04, 1.08)),
        image_size=image_size)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _stream(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(key))))


@dataclass(frozen=True)
class _Woman:
    index: int
    split: str
    label: str          # class if labeled, else "unlabeled"
    severity: float
    n_images: int
    labeled_mask: tuple[bool, ...]


def _truncated_severity(rng: np.random.Generator, label: str, threshold: float) -> float:
    u = rng.uniform()
    if label == LABEL_CASE:
        return threshold + max(u, 1e-9) * (1.0 - threshold)
    if label == LABEL_CONTROL:
        return u * threshold
    return u


def _plan_cell(women: list[_Woman], start: int, split: str, label: str,
               cell: CellShape, threshold: float, seed: int, site_idx: int) -> int:
    """Append the labeled women of one (split, class) cell; returns next index."""
    idx = start
    singly_labeled_from = cell.women - (2 * cell.women - cell.labeled_images)
    for j in range(cell.women):
        rng = _stream(seed, site_idx, idx)
        severity = _truncated_severity(rng, label, threshold)
        # The trailing (2*women - labeled_images) women carry one labeled image.
        both = j < singly_labeled_from
        women.append(_Woman(idx, split, label, severity, 2,
                            (True, both)))
        idx += 1
    return idx


def _plan_unlabeled(women: list[_Woman], start: int, split: str, n_images: int,
                    seed: int, site_idx: int) -> int:
    idx = start
    remaining = n_images
    while remaining > 0:
        rng = _stream(seed, site_idx, idx)
        severity = rng.uniform()
        n = 2 if remaining >= 2 else 1
        women.append(_Woman(idx, split, LABEL_UNLABELED, severity, n, (False,) * n))
        remaining -= n
        idx += 1
    return idx


def _plan_site_explicit(shape: SiteShape, seed: int, site_idx: int) -> list[_Woman]:
    women: list[_Woman] = []
    idx = 0
    for split, sp in ((SPLIT_TRAIN, shape.train), (SPLIT_VALID, shape.valid),
                      (SPLIT_TEST, shape.test)):
        idx = _plan_cell(women, idx, split, LABEL_CASE, sp.case, shape.threshold,
                         seed, site_idx)
        idx = _plan_cell(women, idx, split, LABEL_CONTROL, sp.control, shape.threshold,
                         seed, site_idx)
        extra = sp.total_images - 2 * (sp.case.women + sp.control.women)
        idx = _plan_unlabeled(women, idx, split, extra, seed, site_idx)
    return women


def _plan_site_fractions(spec: SiteFractions, seed: int, site_idx: int) -> list[_Woman]:
    n_labeled = round(spec.labeled_fraction * spec.women)
    n_case = round(spec.case_fraction * n_labeled)
    women: list[_Woman] = []
    for idx in range(spec.women):
        rng = _stream(seed, site_idx, idx)
        if idx < n_case:
            label = LABEL_CASE
        elif idx < n_labeled:
            label = LABEL_CONTROL
        else:
            label = LABEL_UNLABELED
        severity = _truncated_severity(rng, label, spec.threshold)
        labeled = label != LABEL_UNLABELED
        women.append(_Woman(idx, SPLIT_UNASSIGNED, label, severity, 2,
                            (labeled, labeled)))
    return women


_SKIN_BASE = np.array([0.55, 0.38, 0.40])
_TEXTURE_TINT = np.array([1.0, 0.9, 0.9])
_LESION_TINT = np.array([1.0, 0.95, 0.85])
_DISTRACTOR_TINT = np.array([1.0, 0.6, 0.5])


def _render_image(cfg: SyntheticConfig, site: SiteShape | SiteFractions,
                  woman: _Woman, woman_rng_key: tuple[int, ...],
                  image_idx: int) -> np.ndarray:
    size = cfg.image_size
    wrng = _stream(*woman_rng_key, 1_000_003)
    base = _SKIN_BASE + wrng.uniform(-0.06, 0.06, size=3)
    blob_cy = wrng.uniform(0.3, 0.7)
    blob_cx = wrng.uniform(0.3, 0.7)
    blob_sigma = wrng.uniform(0.08, 0.16)

    irng = _stream(*woman_rng_key, image_idx)
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, size), np.linspace(0.0, 1.0, size),
                         indexing="ij")
    img = np.broadcast_to(base[:, None, None], (3, size, size)).copy()

    tex = np.zeros((size, size))
    for _ in range(2):
        fx = irng.uniform(0.5, 3.0)
        fy = irng.uniform(0.5, 3.0)
        phase = irng.uniform(0.0, 2.0 * np.pi)
        tex += cfg.texture_amp * np.sin(2.0 * np.pi * (fx * xx + fy * yy) + phase)
    img += tex[None] * _TEXTURE_TINT[:, None, None]

    img += irng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter)

    cy = blob_cy + irng.uniform(-0.03, 0.03)
    cx = blob_cx + irng.uniform(-0.03, 0.03)
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    amp = cfg.blob_gain * woman.severity
    img += amp * np.exp(-d2 / (2.0 * blob_sigma ** 2))[None] * _LESION_TINT[:, None, None]

    dcy = irng.uniform(0.15, 0.85)
    dcx = irng.uniform(0.15, 0.85)
    dsig = irng.uniform(0.05, 0.12)
    damp = irng.uniform(0.0, cfg.distractor_max)
    dd2 = (yy - dcy) ** 2 + (xx - dcx) ** 2
    img += damp * np.exp(-dd2 / (2.0 * dsig ** 2))[None] * _DISTRACTOR_TINT[:, None, None]

    gain = np.asarray(site.channel_gain)
    img = img * gain[:, None, None] + site.brightness_offset
    img += irng.normal(0.0, cfg.noise_sigma, size=(3, size, size))
    return np.clip(img, 0.0, 1.0)


def generate_synthetic_sites(config: SyntheticConfig, out_dir, seed: int,
                             ) -> tuple[list[Sample], list[Sample], list[GroupRecord]]:
    """Render both sites under ``out_dir`` and return their manifests.

    Image files land in ``out_dir/images/<site>/``; paths in the returned
    samples are relative to ``out_dir``. Also returns the latent per-woman
    table (group id, split, severity, label).
    """
    out_dir = Path(out_dir)
    manifests: list[list[Sample]] = []
    groups: list[GroupRecord] = []
    for site_idx, (site_name, spec) in enumerate(
            ((SITE_A, config.site_a), (SITE_B, config.site_b))):
        if isinstance(spec, SiteShape):
            women = _plan_site_explicit(spec, seed, site_idx)
        else:
            women = _plan_site_fractions(spec, seed, site_idx)
        img_dir = out_dir / "images" / site_name.lower()
        img_dir.mkdir(parents=True, exist_ok=True)
        samples: list[Sample] = []
        counter = 0
        for woman in women:
            gid = f"{site_name}-g{woman.index:05d}"
            groups.append(GroupRecord(gid, site_name, woman.split,
                                      woman.severity, woman.label))
            for image_idx in range(woman.n_images):
                img = _render_image(config, spec, woman,
                                    (seed, site_idx, woman.index), image_idx)
                rel = f"images/{site_name.lower()}/g{woman.index:05d}_i{image_idx}.png"
                save_image(img, out_dir / rel)
                label = woman.label if woman.labeled_mask[image_idx] else LABEL_UNLABELED
                samples.append(Sample(
                    sample_id=f"{site_name}{counter:06d}",
                    site=site_name, group_id=gid, visit=1, label=label,
                    split=woman.split, path=rel))
                counter += 1
        manifests.append(samples)
    return manifests[0], manifests[1], groups


# ---------------------------------------------------------------------------
# Woman-level splitting
# ---------------------------------------------------------------------------

def group_split(manifest: list[Sample], ratios: tuple[float, float, float],
                seed: int) -> list[Sample]:
    """Assign train/valid/test at the woman level.

    Women are shuffled by a seeded permutation, then allocated by the
    floor-then-remainder rule: floor(ratio * W) women to train and valid in
    that order, the remainder to test. All of a woman's images inherit her
    split. Ratios must be strictly positive and sum to 1.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValidationError(f"ratios must be three positive values, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios must sum to 1, got {sum(ratios)}")
    order: list[str] = []
    seen = set()
    for s in manifest:
        if s.group_id not in seen:
            seen.add(s.group_id)
            order.append(s.group_id)
    n_women = len(order)
    if n_women < 3:
        raise ConfigurationError(
            f"need at least 3 women to form 3 splits, got {n_women}")
    rng = _stream(seed)
    perm = rng.permutation(n_women)
    shuffled = [order[i] for i in perm]
    n_train = int(np.floor(ratios[0] * n_women))
    n_valid = int(np.floor(ratios[1] * n_women))
    assignment: dict[str, str] = {}
    for pos, gid in enumerate(shuffled):
        if pos < n_train:
            assignment[gid] = SPLIT_TRAIN
        elif pos < n_train + n_valid:
            assignment[gid] = SPLIT_VALID
        else:
            assignment[gid] = SPLIT_TEST
    return [replace(s, split=assignment[s.group_id]) for s in manifest]


# ---------------------------------------------------------------------------
# Image and manifest I/O
# ---------------------------------------------------------------------------

def save_image(tensor: np.ndarray, path) -> None:
    """Write a [3,h,w] float image in [0,1] as an 8-bit RGB PNG."""
    if tensor.ndim != 3 or tensor.shape[0] != 3:
        raise ValidationError(f"save_image expects [3,h,w], got {tensor.shape}")
    arr = np.rint(np.clip(tensor, 0.0, 1.0) * 255.0).astype(np.uint8)
    try:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise DataIOError(f"failed to write image ({exc})", path=path) from exc


def load_image(path) -> np.ndarray:
    """Read an 8-bit RGB PNG into a [3,h,w] float64 tensor scaled by 1/255."""
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except FileNotFoundError as exc:
        raise DataIOError("image file not found", path=path) from exc
    except (UnidentifiedImageError, OSError) as exc:
        raise DataIOError(f"unreadable image ({exc})", path=path) from exc
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


class ImageStore:
    """Caching loader for one dataset root; counts loads for isolation audits."""

    def __init__(self, root):
        self.root = Path(root)
        self._cache: dict[str, np.ndarray] = {}
        self.load_calls = 0

    def get(self, sample: Sample) -> np.ndarray:
        self.load_calls += 1
        arr = self._cache.get(sample.path)
        if arr is None:
            arr = load_image(self.root / sample.path)
            self._cache[sample.path] = arr
        return arr


def write_manifest(samples: list[Sample], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for s in samples:
            writer.writerow([s.sample_id, s.site, s.group_id, s.visit,
                             s.label, s.split, s.path])


def read_manifest(path) -> list[Sample]:
    try:
        fh = open(path, newline="")
    except FileNotFoundError as exc:
        raise DataIOError("manifest not found", path=path) from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_FIELDS:
            raise DataIOError(
                f"manifest header {header} != expected {MANIFEST_FIELDS}", path=path)
        samples = []
        for row in reader:
            if len(row) != len(MANIFEST_FIELDS):
                raise DataIOError(f"malformed manifest row {row}", path=path)
            samples.append(Sample(row[0], row[1], row[2], int(row[3]),
                                  row[4], row[5], row[6]))
    return samples


def write_groups(groups: list[GroupRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(GROUPS_FIELDS)
        for g in groups:
            writer.writerow([g.group_id, g.site, g.split, repr(g.severity), g.label])


def by_split(manifest: list[Sample], split: str) -> list[Sample]:
    return [s for s in manifest if s.split == split]


def labeled_only(manifest: list[Sample]) -> list[Sample]:
    return [s for s in manifest if s.label != LABEL_UNLABELED]


# ---------------------------------------------------------------------------
# Class weighting
# ---------------------------------------------------------------------------

def class_weights(labels) -> dict[int, float]:
    """Inverse-frequency weights, mean-normalized to 1 across samples.

    Accepts 0/1 integers or the literal strings; returns {0: w, 1: w} with
    w_c = total / (2 * count_c).
    """
    mapped = []
    for lab in labels:
        if lab in (0, 1):
            mapped.append(int(lab))
        elif lab == LABEL_CASE:
            mapped.append(1)
        elif lab == LABEL_CONTROL:
            mapped.append(0)
        else:
            raise ValidationError(f"unexpected label {lab!r}")
    counts = {0: mapped.count(0), 1: mapped.count(1)}
    if counts[0] == 0 or counts[1] == 0:
        raise ConfigurationError(
            f"class weighting needs both classes, got counts {counts}")
    total = len(mapped)
    return {c: total / (2.0 * n) for c, n in counts.items()}
