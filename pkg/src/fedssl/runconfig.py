"""Sectioned key-value experiment configuration with a strict schema.

The file format is INI. Every key has a typed default; unknown sections or
keys are rejected so hyperparameter typos cannot pass silently. Each CLI
run re-serializes the fully resolved configuration (defaults filled in)
next to its outputs, making every artifact traceable to the exact settings
that produced it.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, replace

import numpy as np

from .augment import AugmentConfig
from .data import (SiteFractions, SyntheticConfig, benchmark_two_site_config,
                   full_two_site_config, tiny_two_site_config)
from .errors import ConfigurationError
from .federation import FederationConfig
from .finetune import FinetuneConfig
from .model import BackboneConfig
from .ssl_train import SslConfig

PRESETS = ("full", "benchmark", "tiny", "custom")

# section -> key -> (type tag, default)
SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "run": {
        "seed": ("int", 0),
        "out_dir": ("str", ""),
    },
    "data": {
        "preset": ("str", "tiny"),
        "image_size": ("int", 0),  # 0 = preset default
        "blob_gain": ("float", 0.45),
        "texture_amp": ("float", 0.04),
        "brightness_jitter": ("float", 0.12),
        "distractor_max": ("float", 0.30),
        "noise_sigma": ("float", 0.02),
        # custom (fraction) mode only:
        "women_a": ("int", 40),
        "women_b": ("int", 40),
        "case_fraction": ("float", 0.35),
        "labeled_fraction": ("float", 0.3),
        "threshold_a": ("float", 0.55),
        "threshold_b": ("float", 0.45),
        "split_train": ("float", 0.7),
        "split_valid": ("float", 0.15),
        "split_test": ("float", 0.15),
    },
    "model": {
        "channels": ("ints", (8, 16, 32)),
        "projection_dim": ("int", 64),
        "allow_any_projection_dim": ("bool", False),
    },
    "augment": {
        "rotation_max_deg": ("float", 25.0),
        "shift_max_frac": ("float", 0.1),
        "zoom_min": ("float", 0.9),
        "zoom_max": ("float", 1.1),
        "gamma_min": ("float", 0.8),
        "gamma_max": ("float", 1.2),
        "brightness_delta_max": ("float", 0.1),
        "enable_flip_h": ("bool", True),
        "enable_flip_v": ("bool", True),
        "enable_rotate": ("bool", True),
        "enable_shift": ("bool", True),
        "enable_zoom": ("bool", True),
        "enable_gamma": ("bool", True),
        "enable_brightness": ("bool", True),
    },
    "ssl": {
        "n_per_batch": ("int", 8),
        "temperature": ("float", 0.1),
        "lr": ("float", 0.01),
        "weight_decay": ("float", 1e-5),
        "momentum": ("float", 0.9),
        "max_epochs": ("int", 50),
        "patience": ("int", 5),
        "normalize_features": ("bool", True),
    },
    "federation": {
        "local_epochs": ("int", 1),
        "rounds": ("int", 10),
        "weighting": ("str", "uniform"),
    },
    "finetune": {
        "lr": ("float", 0.001),
        "weight_decay": ("float", 1e-6),
        "momentum": ("float", 0.09),
        "max_epochs": ("int", 50),
        "batch_size": ("int", 4),
        "patience": ("int", 5),
    },
    "eval": {
        "threshold": ("float", 0.5),
    },
}

_PRESET_IMAGE_SIZE = {"full": 64, "benchmark": 64, "tiny": 32, "custom": 64}


def _parse_value(tag: str, raw: str, where: str):
    try:
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tag == "ints":
            return tuple(int(p) for p in raw.split(",") if p.strip())
        return raw.strip()
    except ValueError as exc:
        raise ConfigurationError(f"bad {tag} value {raw!r} for {where}") from exc


def _format_value(tag: str, value) -> str:
    if tag == "bool":
        return "true" if value else "false"
    if tag == "ints":
        return ",".join(str(v) for v in value)
    if tag == "float":
        return repr(float(value))
    return str(value)


@dataclass
class ExperimentConfig:
    values: dict[str, dict[str, object]]

    def get(self, section: str, key: str):
        return self.values[section][key]

    # -- derived builders ---------------------------------------------------

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    @property
    def image_size(self) -> int:
        explicit = self.values["data"]["image_size"]
        if explicit:
            return explicit
        return _PRESET_IMAGE_SIZE[self.values["data"]["preset"]]

    @property
    def preset(self) -> str:
        return self.values["data"]["preset"]

    def synthetic_config(self) -> SyntheticConfig:
        d = self.values["data"]
        preset = d["preset"]
        if preset == "full":
            base = full_two_site_config(self.image_size)
        elif preset == "benchmark":
            base = benchmark_two_site_config(self.image_size)
        elif preset == "tiny":
            base = tiny_two_site_config(self.image_size)
        else:
            base = SyntheticConfig(
                site_a=SiteFractions(women=d["women_a"],
                                     case_fraction=d["case_fraction"],
                                     labeled_fraction=d["labeled_fraction"],
                                     threshold=d["threshold_a"]),
                site_b=SiteFractions(women=d["women_b"],
                                     case_fraction=d["case_fraction"],
                                     labeled_fraction=d["labeled_fraction"],
                                     threshold=d["threshold_b"],
                                     brightness_offset=0.06,
                                     channel_gain=(0.97, 1.04, 1.08)),
                image_size=self.image_size)
        return replace(base,
                       blob_gain=d["blob_gain"], texture_amp=d["texture_amp"],
                       brightness_jitter=d["brightness_jitter"],
                       distractor_max=d["distractor_max"],
                       noise_sigma=d["noise_sigma"])

    def split_ratios(self) -> tuple[float, float, float]:
        d = self.values["data"]
        return (d["split_train"], d["split_valid"], d["split_test"])

    def backbone_config(self, seed: int) -> BackboneConfig:
        m = self.values["model"]
        return BackboneConfig(image_size=self.image_size,
                              channels=m["channels"],
                              projection_dim=m["projection_dim"],
                              seed=seed,
                              allow_any_projection_dim=m["allow_any_projection_dim"])

    def augment_config(self) -> AugmentConfig:
        a = self.values["augment"]
        return AugmentConfig(
            rotation_max_deg=a["rotation_max_deg"],
            shift_max_frac=a["shift_max_frac"],
            zoom_range=(a["zoom_min"], a["zoom_max"]),
            gamma_range=(a["gamma_min"], a["gamma_max"]),
            brightness_delta_max=a["brightness_delta_max"],
            enable_flip_h=a["enable_flip_h"], enable_flip_v=a["enable_flip_v"],
            enable_rotate=a["enable_rotate"], enable_shift=a["enable_shift"],
            enable_zoom=a["enable_zoom"], enable_gamma=a["enable_gamma"],
            enable_brightness=a["enable_brightness"])

    def ssl_config(self, seed: int) -> SslConfig:
        s = self.values["ssl"]
        return SslConfig(n_per_batch=s["n_per_batch"], temperature=s["temperature"],
                         lr=s["lr"], weight_decay=s["weight_decay"],
                         momentum=s["momentum"], max_epochs=s["max_epochs"],
                         patience=s["patience"], seed=seed,
                         normalize_features=s["normalize_features"])

    def federation_config(self, topology: str, start_client: int) -> FederationConfig:
        f = self.values["federation"]
        return FederationConfig(local_epochs=f["local_epochs"], rounds=f["rounds"],
                                topology=topology, start_client=start_client,
                                weighting=f["weighting"], seed=self.seed)

    def finetune_config(self, seed: int) -> FinetuneConfig:
        f = self.values["finetune"]
        return FinetuneConfig(lr=f["lr"], weight_decay=f["weight_decay"],
                              momentum=f["momentum"], max_epochs=f["max_epochs"],
                              batch_size=f["batch_size"], patience=f["patience"],
                              seed=seed)

    @property
    def eval_threshold(self) -> float:
        return self.values["eval"]["threshold"]

    # -- serialization ------------------------------------------------------

    def resolved_text(self) -> str:
        out = io.StringIO()
        for section, keys in SCHEMA.items():
            out.write(f"[{section}]\n")
            for key, (tag, _) in keys.items():
                out.write(f"{key} = {_format_value(tag, self.values[section][key])}\n")
            out.write("\n")
        return out.getvalue()

    def write_resolved(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.resolved_text())


def default_config() -> ExperimentConfig:
    return ExperimentConfig(
        {section: {key: default for key, (_, default) in keys.items()}
         for section, keys in SCHEMA.items()})


def parse_config_text(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config file: {exc}") from exc
    cfg = default_config()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigurationError(
                f"unknown config section [{section}]; known: {sorted(SCHEMA)}")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigurationError(
                    f"unknown key {key!r} in section [{section}]; "
                    f"known: {sorted(SCHEMA[section])}")
            tag, _ = SCHEMA[section][key]
            cfg.values[section][key] = _parse_value(tag, raw, f"[{section}] {key}")
    preset = cfg.values["data"]["preset"]
    if preset not in PRESETS:
        raise ConfigurationError(f"preset must be one of {PRESETS}, got {preset!r}")
    return cfg


def load_config(path, seed_override: int | None = None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file not found: {path}") from exc
    cfg = parse_config_text(text)
    if seed_override is not None:
        cfg.values["run"]["seed"] = int(seed_override)
    return cfg


def phase_seed(base_seed: int, tag: int) -> int:
    """Derived integer seed for one phase of a run."""
    return int(np.random.SeedSequence([base_seed, tag]).generate_state(1)[0])
