"""Line-oriented ``key = value`` experiment configuration.

A config file plus any number of ``--set key=value`` overrides resolve into a
flat string dict; typed builders turn that into model / routing / training /
generation configs. The fingerprint hashes the fully resolved dict so
checkpoints and reports can state exactly what produced them.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

from .data import AffineRanges
from .model import ModelConfig
from .routing import ROUTING_KINDS, RoutingConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    epochs: int = 1
    seed: int = 0
    precision: str = "float64"
    train_images: str = ""
    train_labels: str = ""
    train_labels2: str = ""
    test_images: str = ""
    test_labels: str = ""
    test_labels2: str = ""
    early_stop_target_accuracy: float | None = None
    early_stop_check_batches: int | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"precision must be float64 or float32, "
                              f"got {self.precision!r}")


def parse_config_file(path) -> dict:
    """Read ``key = value`` lines; '#' starts a comment, blanks ignored."""
    raw = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', "
                                  f"got {line!r}")
            key, value = line.split("=", 1)
            raw[key.strip()] = value.strip()
    return raw


def parse_override(item: str) -> tuple:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, value = item.split("=", 1)
    return key.strip(), value.strip()


def resolve(config_path=None, overrides=()) -> dict:
    """File values with overrides applied on top (override wins)."""
    raw = parse_config_file(config_path) if config_path else {}
    for item in overrides:
        key, value = parse_override(item)
        raw[key] = value
    return raw


def _to_bool(value: str) -> bool:
    low = value.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {value!r}")


def _to_int_tuple(value: str) -> tuple:
    return tuple(int(p) for p in value.split(",") if p.strip())


_MODEL_KEYS = {
    "input_hw": int,
    "conv1_channels": int,
    "conv_kernel": int,
    "primary_caps_channels": int,
    "primary_caps_dim": int,
    "class_count": int,
    "class_caps_dim": int,
    "shared_transform": _to_bool,
    "decoder_hidden": _to_int_tuple,
    "recon_loss_weight": float,
    "squash_epsilon": float,
}

_ROUTING_KEYS = {"routing": str, "routing_iterations": int}

_TRAIN_KEYS = {
    "batch_size": int,
    "learning_rate": float,
    "beta1": float,
    "beta2": float,
    "adam_epsilon": float,
    "epochs": int,
    "seed": int,
    "precision": str,
    "train_images": str,
    "train_labels": str,
    "train_labels2": str,
    "test_images": str,
    "test_labels": str,
    "test_labels2": str,
    "early_stop_target_accuracy": float,
    "early_stop_check_batches": int,
}

def _to_str_tuple(value: str) -> tuple:
    return tuple(p.strip() for p in value.split(",") if p.strip())


_GEN_KEYS = {
    "source": str,
    "source_train_images": str,
    "source_train_labels": str,
    "source_test_images": str,
    "source_test_labels": str,
    "train_count": int,
    "test_count": int,
    "multimnist_count": int,
    "base_hw": int,
    "seed": int,
    "outputs": _to_str_tuple,
    "canvas.size": int,
    "affine.rotation_deg": float,
    "affine.scale_min": float,
    "affine.scale_max": float,
    "affine.shear": float,
    "affine.translate_px": float,
}

_BENCH_KEYS = {"bench_seeds": int, "matched_accuracy": float,
               "affine_test_images": str, "affine_test_labels": str}


def build_train_config(raw: dict, allow_extra_keys: set = frozenset()) -> TrainConfig:
    """Typed TrainConfig from a resolved string dict; unknown keys are errors."""
    model_kwargs, routing_kwargs, train_kwargs = {}, {}, {}
    for key, value in raw.items():
        if value == "":
            continue  # empty value means unset (keeps the field default)
        if key in _MODEL_KEYS:
            model_kwargs[key] = _MODEL_KEYS[key](value)
        elif key in _ROUTING_KEYS:
            routing_kwargs["kind" if key == "routing" else "iterations"] = \
                _ROUTING_KEYS[key](value)
        elif key in _TRAIN_KEYS:
            train_kwargs[key] = _TRAIN_KEYS[key](value)
        elif key in allow_extra_keys or key in _BENCH_KEYS or key in _GEN_KEYS:
            continue
        else:
            raise ConfigError(f"unknown config key {key!r}")
    kind = routing_kwargs.get("kind", "dynamic")
    if kind not in ROUTING_KINDS:
        raise ConfigError(f"routing must be one of {ROUTING_KINDS}, "
                          f"got {kind!r}")
    try:
        return TrainConfig(model=ModelConfig(**model_kwargs),
                           routing=RoutingConfig(**routing_kwargs),
                           **train_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


@dataclass
class GenConfig:
    source: str = "synthetic"
    source_train_images: str = ""
    source_train_labels: str = ""
    source_test_images: str = ""
    source_test_labels: str = ""
    train_count: int = 10000
    test_count: int = 2000
    multimnist_count: int = 0
    base_hw: int = 28
    seed: int = 0
    outputs: tuple = ("base",)
    canvas_size: int = 40
    affine: AffineRanges = field(default_factory=AffineRanges)


def build_gen_config(raw: dict) -> GenConfig:
    cfg = GenConfig()
    for key, value in raw.items():
        if key not in _GEN_KEYS:
            raise ConfigError(f"unknown gen-data config key {key!r}")
        if value == "":
            continue
        parsed = _GEN_KEYS[key](value)
        if key == "canvas.size":
            cfg.canvas_size = parsed
        elif key.startswith("affine."):
            setattr(cfg.affine, {"affine.rotation_deg": "rotation_deg",
                                 "affine.scale_min": "scale_min",
                                 "affine.scale_max": "scale_max",
                                 "affine.shear": "shear",
                                 "affine.translate_px": "translate_px"}[key],
                    parsed)
        else:
            setattr(cfg, key, parsed)
    if cfg.source not in ("synthetic", "idx"):
        raise ConfigError(f"source must be 'synthetic' or 'idx', "
                          f"got {cfg.source!r}")
    return cfg


def train_config_to_dict(cfg: TrainConfig) -> dict:
    """Fully resolved flat dict (every field explicit, canonical rendering)."""
    out = {}
    for f in fields(cfg.model):
        value = getattr(cfg.model, f.name)
        if f.name == "decoder_hidden":
            value = ",".join(str(v) for v in value)
        out[f.name] = _render(value)
    out["routing"] = cfg.routing.kind
    out["routing_iterations"] = str(cfg.routing.iterations)
    for f in fields(cfg):
        if f.name in ("model", "routing"):
            continue
        out[f.name] = _render(getattr(cfg, f.name))
    return out


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return str(value)


def config_fingerprint(resolved: dict) -> str:
    """sha256 over canonical sorted ``key = value`` lines."""
    text = "\n".join(f"{k} = {v}" for k, v in sorted(resolved.items()))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
