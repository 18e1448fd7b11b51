"""Plain-text configuration: one ``dotted.key = value`` per line, ``#`` comments."""

import os
from pathlib import Path

from .errors import ConfigError, DafeError
from .mining import Margins

DEFAULTS = {
    "seed": 0,
    # synthetic data
    "data.identities": 40,
    "data.views": 2,
    "data.images_per_view": 4,
    "data.size": 48,
    "data.curvature": 1.5,
    "data.noise": 0.05,
    "data.blobs": 6,
    "data.pose_range": 0.06,
    "data.warp": 2.0,
    "data.split": "images",
    "data.train_identities": 20,
    # preprocessing
    "preproc.size": 48,
    "preproc.channels": ("intensity",),
    "preproc.gabor_wavelengths": (4.0, 8.0),
    "preproc.gabor_orientations": 4,
    "preproc.pca": 128,
    # embedding
    "stack.maps": (8, 16, 48),
    "stack.filters": (8, 6, 4),
    "stack.pool": (2, 2, 1),
    "stack.weight_var": 0.01,
    "feature.mode": "third_layer",
    # pretraining
    "pretrain.epochs": 10,
    "pretrain.lr": 0.1,
    "pretrain.momentum": 0.9,
    "pretrain.weight_decay": 0.002,
    "pretrain.sparsity_target": 0.01,
    "pretrain.sparsity_weight": 1.0,
    "pretrain.batch_size": 10,
    # similarity head and losses
    "head.weight_var": 0.01,
    "loss.kind": "quadruplet",
    "loss.alpha1": 1.0,
    "loss.alpha2": 0.5,
    "loss.triplet_margin": 1.0,
    # mining and batches
    "mining.batch_identities": 8,
    "mining.batch_images": 4,
    "mining.per_identity": True,
    "mining.random_positive": False,
    # fine-tuning
    "train.iterations": 2000,
    "train.lr": 0.01,
    "train.momentum": 0.9,
    "train.weight_decay": 0.0,
    "train.finetune": "top",
    "train.checkpoint_every": 500,
    "train.monitor_every": 0,
    "train.augment": False,
    # evaluation
    "eval.trials": 10,
    "eval.mq": False,
    "eval.gallery_view": 1,
    # optimizer benchmark
    "optim.variant": "saga",
    "optim.q": 1,
    "optim.k": 10,
    "optim.mu": 0.1,
    "optim.epochs": 30,
    "optim.samples": 1000,
    "optim.dim": 20,
    "optim.clusters": 100,
}

PRESETS = {
    "toy": {},
    "paper": {
        "data.size": 150,
        "preproc.size": 150,
        "preproc.channels": ("intensity", "lbp", "gabor"),
        "preproc.pca": 500,
        "stack.maps": (40, 100, 40),
        "stack.filters": (12, 10, 6),
        "stack.pool": (2, 2, 2),
        "feature.mode": "third_layer",
    },
}

CHOICES = {
    "data.split": ("images", "identities"),
    "feature.mode": ("third_layer", "concat_all"),
    "loss.kind": ("quadruplet", "triplet"),
    "train.finetune": ("head", "top", "all"),
    "optim.variant": ("sgd", "sgd-const", "saga", "qsaga", "svrg", "nsaga"),
}


def _parse(key, text):
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return lowered in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            kind = type(default[0])
            return tuple(kind(t) for t in items)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


class Config:
    def __init__(self, values=None, preset="toy"):
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        self.preset = preset
        self.values = dict(DEFAULTS)
        self.values.update(PRESETS[preset])
        for key, value in (values or {}).items():
            self.set(key, value)
        self.validate()

    def set(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _parse(key, value) if isinstance(value, str) else value

    def __getitem__(self, key):
        return self.values[key]

    def updated(self, **changes):
        """Copy with ``a__b=value`` meaning ``a.b = value``."""
        values = {k: v for k, v in self.values.items()}
        values.update({k.replace("__", "."): v for k, v in changes.items()})
        out = Config.__new__(Config)
        out.preset = self.preset
        out.values = dict(DEFAULTS)
        for key, value in values.items():
            out.set(key, value)
        out.validate()
        return out

    def validate(self):
        v = self.values
        for key, options in CHOICES.items():
            if v[key] not in options:
                raise ConfigError(f"{key} must be one of {options}, got {v[key]!r}")
        try:
            Margins(v["loss.alpha1"], v["loss.alpha2"])
        except DafeError as exc:
            raise ConfigError(str(exc)) from exc
        if not (len(v["stack.maps"]) == len(v["stack.filters"]) == len(v["stack.pool"]) >= 1):
            raise ConfigError("stack.maps, stack.filters and stack.pool must have equal length")
        positive = ["data.identities", "data.images_per_view", "data.size", "preproc.size",
                    "mining.batch_identities", "mining.batch_images", "eval.trials",
                    "pretrain.batch_size", "optim.samples", "optim.dim", "optim.k"]
        for key in positive:
            if v[key] < 1:
                raise ConfigError(f"{key} must be positive")
        if v["mining.batch_identities"] < 2 or v["mining.batch_images"] < 2:
            raise ConfigError("batches need at least 2 identities with 2 images each")
        for key in ("pretrain.lr", "train.lr", "train.weight_decay", "pretrain.epochs",
                    "train.iterations", "loss.triplet_margin", "data.noise", "preproc.pca",
                    "train.monitor_every", "train.checkpoint_every"):
            if v[key] < 0:
                raise ConfigError(f"{key} must be non-negative")
        if v["optim.mu"] <= 0:
            raise ConfigError("optim.mu must be positive")
        if v["data.split"] == "identities" and not 0 < v["data.train_identities"] < v["data.identities"]:
            raise ConfigError("data.train_identities must leave identities for testing")
        for role in v["preproc.channels"]:
            if role not in ("intensity", "lbp", "gabor"):
                raise ConfigError(f"unknown channel role {role!r}")

    def to_text(self):
        lines = [f"preset = {self.preset}"]
        for key in DEFAULTS:
            value = self.values[key]
            if isinstance(value, tuple):
                value = ", ".join(str(x) for x in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def parse_config_text(text):
    pairs, preset = {}, "toy"
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "preset":
            preset = value
        else:
            pairs[key] = value
    return Config(pairs, preset=preset)


def load_config(path=None, seed=None, environ=None):
    """Read ``path`` (or defaults); ``DAFE_SEED`` then an explicit ``seed`` override the seed."""
    if path is None:
        config = Config()
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        config = parse_config_text(text)
    environ = os.environ if environ is None else environ
    if environ.get("DAFE_SEED"):
        config.set("seed", environ["DAFE_SEED"])
    if seed is not None:
        config.set("seed", int(seed))
    return config
