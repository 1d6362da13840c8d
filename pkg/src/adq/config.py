"""Experiment configuration: defaults, validation, presets, and overrides.

Configs are flat dataclasses serialized as nested JSON (the dataset block is
nested). Unknown keys are rejected; every field is range-checked. The
tbl44-config* presets pin the six ablation variants (baseline, random init,
static codebook, fixed-bit, and the two mixed-precision budgets).
"""
import json
from dataclasses import dataclass, field, fields

ARCHS = ("cnn-small", "mlp-small")
FORMATS = ("idx", "csv", "synthetic")
CODEBOOK_INITS = ("quantile", "random-normal", "uniform")
PRECISIONS = ("mixed", "fixed")
ALLOWED_BITS = (2, 3, 4)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int = 0
    arch: str = "cnn-small"
    dataset_path: str = ""
    dataset_format: str = "synthetic"
    epochs: int = 10
    lr0: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    beta: float = 0.25
    ema_alpha: float = 0.99
    ema_epsilon: float = 1e-5
    b_set: list = field(default_factory=lambda: [2, 3, 4])
    b_avg: float = 3.0
    fixed_bits: int = 3
    n_sens_batches: int = 8
    codebook_init: str = "quantile"
    codebook_learning: bool = True
    precision: str = "mixed"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a nonnegative int, got {self.seed!r}")
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.dataset_format not in FORMATS:
            raise ConfigError(f"dataset.format must be one of {FORMATS}, "
                              f"got {self.dataset_format!r}")
        if self.dataset_format != "synthetic" and not self.dataset_path:
            raise ConfigError(f"dataset.path is required for format "
                              f"{self.dataset_format!r}")
        if not isinstance(self.epochs, int) or self.epochs < 0:
            raise ConfigError(f"epochs must be a nonnegative int, got {self.epochs!r}")
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0!r}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0,1), got {self.momentum!r}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay!r}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError(f"batch_size must be a positive int, got {self.batch_size!r}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta!r}")
        if not 0 < self.ema_alpha < 1:
            raise ConfigError(f"ema_alpha must be in (0,1), got {self.ema_alpha!r}")
        if not self.ema_epsilon > 0:
            raise ConfigError(f"ema_epsilon must be positive, got {self.ema_epsilon!r}")
        bs = list(self.b_set)
        if (not bs or len(set(bs)) != len(bs) or sorted(bs) != bs
                or any(b not in ALLOWED_BITS for b in bs)):
            raise ConfigError(f"b_set must be distinct ascending values from "
                              f"{ALLOWED_BITS}, got {self.b_set!r}")
        if not bs[0] <= self.b_avg <= bs[-1]:
            raise ConfigError(f"b_avg must lie in [{bs[0]}, {bs[-1]}], "
                              f"got {self.b_avg!r}")
        if self.fixed_bits not in ALLOWED_BITS:
            raise ConfigError(f"fixed_bits must be in {ALLOWED_BITS}, "
                              f"got {self.fixed_bits!r}")
        if not isinstance(self.n_sens_batches, int) or self.n_sens_batches < 1:
            raise ConfigError(f"n_sens_batches must be a positive int, "
                              f"got {self.n_sens_batches!r}")
        if self.codebook_init not in CODEBOOK_INITS:
            raise ConfigError(f"codebook_init must be one of {CODEBOOK_INITS}, "
                              f"got {self.codebook_init!r}")
        if not isinstance(self.codebook_learning, bool):
            raise ConfigError(f"codebook_learning must be a bool, "
                              f"got {self.codebook_learning!r}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}, "
                              f"got {self.precision!r}")

    def to_dict(self):
        d = {}
        for f in fields(self):
            if f.name in ("dataset_path", "dataset_format"):
                continue
            v = getattr(self, f.name)
            d[f.name] = list(v) if f.name == "b_set" else v
        d["dataset"] = {"path": self.dataset_path, "format": self.dataset_format}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        ds = d.pop("dataset", {})
        if not isinstance(ds, dict):
            raise ConfigError(f"dataset must be an object, got {ds!r}")
        unknown_ds = set(ds) - {"path", "format"}
        if unknown_ds:
            raise ConfigError(f"unknown dataset keys: {sorted(unknown_ds)}")
        if "path" in ds:
            d["dataset_path"] = ds["path"]
        if "format" in ds:
            d["dataset_format"] = ds["format"]
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None


def load_config(path):
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return ExperimentConfig.from_dict(raw)


def save_config(cfg, path):
    from .fsio import atomic_write
    atomic_write(path, json.dumps(cfg.to_dict(), indent=2) + "\n")


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key, raw):
    t = _FIELD_TYPES[key]
    try:
        if t is int:
            return int(raw)
        if t is float:
            return float(raw)
        if t is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if t is list:
            return [int(v) for v in raw.split(",") if v != ""]
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as a value for {key}") from None


def apply_overrides(cfg, pairs):
    """Apply repeatable --set key=value overrides; dotted keys reach the
    dataset block (dataset.path, dataset.format)."""
    d = cfg.to_dict()
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key in ("dataset.path", "dataset.format"):
            d["dataset"][key.split(".", 1)[1]] = raw
        elif key in _FIELD_TYPES and not key.startswith("dataset"):
            d[key] = _coerce(key, raw)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return ExperimentConfig.from_dict(d)


PRESETS = {
    # six ablation variants: baseline uniform codebook with frozen levels,
    # random codebook init, static (frozen) quantile codebook, fixed-width,
    # and the two mixed-precision budgets
    "tbl44-configA": {"codebook_init": "uniform", "codebook_learning": False,
                      "precision": "fixed", "fixed_bits": 3},
    "tbl44-configB": {"codebook_init": "random-normal", "codebook_learning": True,
                      "precision": "mixed", "b_avg": 2.8},
    "tbl44-configC": {"codebook_init": "quantile", "codebook_learning": False,
                      "precision": "mixed", "b_avg": 2.8},
    "tbl44-configD": {"codebook_init": "quantile", "codebook_learning": True,
                      "precision": "fixed", "fixed_bits": 3},
    "tbl44-configE": {"codebook_init": "quantile", "codebook_learning": True,
                      "precision": "mixed", "b_avg": 2.8},
    "tbl44-configF": {"codebook_init": "quantile", "codebook_learning": True,
                      "precision": "mixed", "b_avg": 3.0},
}


def apply_preset(cfg, name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
    d = cfg.to_dict()
    d.update(PRESETS[name])
    return ExperimentConfig.from_dict(d)
