"""
Run configuration.

A config file is flat `key = value` text with dotted section keys and `#`
comments, read with python-dotenv. Every key has a default (the desk
configuration); values are typed field by field and validated by the frozen
section dataclasses, each failure naming its dotted key.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Mapping, Optional, Tuple, Union

from dotenv import dotenv_values

from errors import ConfigError
from network import BackboneConfig, HeadConfig
from ssm_head import SSMConfig
from training import TrainConfig

logger = logging.getLogger(__name__)

DATA_SOURCES = ("synthetic", "idx")
PRECISIONS = (32, 64)


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    train_images: Optional[Path] = None
    train_labels: Optional[Path] = None
    test_images: Optional[Path] = None
    test_labels: Optional[Path] = None
    synthetic_per_class: int = 200
    synthetic_test_per_class: int = 50
    image_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.source not in DATA_SOURCES:
            raise ConfigError("data.source", f"must be one of {DATA_SOURCES}, got '{self.source}'")
        if self.source == "idx":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                if getattr(self, key) is None:
                    raise ConfigError(f"data.{key}", "required when data.source = idx")
        if self.synthetic_per_class < 1:
            raise ConfigError("data.synthetic_per_class", f"must be >= 1, got {self.synthetic_per_class}")
        if self.synthetic_test_per_class < 1:
            raise ConfigError("data.synthetic_test_per_class", f"must be >= 1, got {self.synthetic_test_per_class}")
        if self.image_size < 4:
            raise ConfigError("data.image_size", f"must be >= 4, got {self.image_size}")
        if self.seed < 0:
            raise ConfigError("data.seed", f"must be >= 0, got {self.seed}")


@dataclass(frozen=True)
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    ssm: SSMConfig = field(default_factory=SSMConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: Path = Path("runs/desk")
    precision: int = 32


# ═══════════════════════════════════════════════════════════════════════════════
# VALUE PARSERS
# ═══════════════════════════════════════════════════════════════════════════════

def _int(key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(key, f"expected an integer, got '{raw}'")


def _float(key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(key, f"expected a number, got '{raw}'")


def _bool(key: str, raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ConfigError(key, f"expected true/false, got '{raw}'")


def _int_list(key: str, raw: str) -> Tuple[int, ...]:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    return tuple(_int(key, p) for p in parts)


def _str(key: str, raw: str) -> str:
    return raw.strip()


def _path(key: str, raw: str) -> Optional[Path]:
    raw = raw.strip()
    return Path(raw) if raw else None


# key -> (parser, default as written in a config file)
SCHEMA: Dict[str, Tuple[Callable[[str, str], object], str]] = {
    "backbone.kind": (_str, "cnn"),
    "backbone.channels": (_int_list, "32,64,256"),
    "backbone.in_channels": (_int, "1"),
    "head.kind": (_str, "ssm"),
    "head.num_fc": (_int, "1"),
    "ssm.num_heads": (_int, "4"),
    "ssm.num_classes": (_int, "10"),
    "ssm.bn_relu_on_last": (_bool, "true"),
    "ssm.use_bn": (_bool, "true"),
    "ssm.use_relu": (_bool, "true"),
    "train.epochs": (_int, "15"),
    "train.milestones": (_int_list, "8,12"),
    "train.batch_size": (_int, "128"),
    "train.eval_batch_size": (_int, "512"),
    "train.base_lr": (_float, "0.05"),
    "train.lr_decay": (_float, "0.1"),
    "train.momentum": (_float, "0.9"),
    "train.weight_decay": (_float, "0.0001"),
    "train.scheme": (_str, "joint"),
    "train.seed": (_int, "0"),
    "train.augment_pad": (_int, "2"),
    "train.flip_prob": (_float, "0.0"),
    "data.source": (_str, "synthetic"),
    "data.train_images": (_path, ""),
    "data.train_labels": (_path, ""),
    "data.test_images": (_path, ""),
    "data.test_labels": (_path, ""),
    "data.synthetic_per_class": (_int, "200"),
    "data.synthetic_test_per_class": (_int, "50"),
    "data.image_size": (_int, "16"),
    "data.seed": (_int, "0"),
    "precision": (_int, "32"),
    "out_dir": (_path, "runs/desk"),
}


# ═══════════════════════════════════════════════════════════════════════════════
# LOADING
# ═══════════════════════════════════════════════════════════════════════════════

def parse_run_config(values: Mapping[str, Optional[str]], check_paths: bool = True) -> RunConfig:
    """Type and validate a flat key → text mapping; absent keys take their defaults."""
    unknown = sorted(set(values) - set(SCHEMA))
    if unknown:
        raise ConfigError(unknown[0], f"unknown key (known keys: {', '.join(SCHEMA)})")

    typed = {}
    for key, (parser, default) in SCHEMA.items():
        raw = values.get(key, default)
        if raw is None:
            raise ConfigError(key, "missing value")
        typed[key] = parser(key, str(raw))

    def section(prefix: str) -> dict:
        return {k[len(prefix) + 1:]: v for k, v in typed.items() if k.startswith(prefix + ".")}

    backbone = BackboneConfig(**section("backbone"))
    head = HeadConfig(**section("head"))
    train = TrainConfig(**section("train"))
    ssm = SSMConfig(num_channels=backbone.feature_width, scheme=train.scheme, **section("ssm"))
    data = DataConfig(**section("data"))

    precision = typed["precision"]
    if precision not in PRECISIONS:
        raise ConfigError("precision", f"must be one of {PRECISIONS}, got {precision}")
    out_dir = typed["out_dir"]
    if out_dir is None:
        raise ConfigError("out_dir", "must not be empty")

    if check_paths and data.source == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            path = getattr(data, key)
            if not path.exists():
                raise ConfigError(f"data.{key}", f"file not found: {path}")

    return RunConfig(backbone, head, ssm, train, data, out_dir, precision)


def load_run_config(path: Union[str, Path, None] = None, overrides: Optional[Mapping[str, str]] = None,
                    check_paths: bool = True) -> RunConfig:
    """Read a config file (defaults only when `path` is None), then apply `overrides`."""
    values: Dict[str, Optional[str]] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError("config", f"file not found: {path}")
        values.update(dotenv_values(path, interpolate=False))
        logger.info("read %d config keys from %s", len(values), path)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = str(value)
    return parse_run_config(values, check_paths=check_paths)


def run_config_to_dict(config: RunConfig) -> Dict[str, str]:
    """Flat key → text echo of a config; `parse_run_config` of the result gives back an equal config."""
    def join(items) -> str:
        return ",".join(str(i) for i in items)

    def text(value) -> str:
        if value is None:
            return ""
        if isinstance(value, bool):
            return "true" if value else "false"
        return str(value)

    b, h, s, t, d = config.backbone, config.head, config.ssm, config.train, config.data
    return {
        "backbone.kind": b.kind,
        "backbone.channels": join(b.channels),
        "backbone.in_channels": text(b.in_channels),
        "head.kind": h.kind,
        "head.num_fc": text(h.num_fc),
        "ssm.num_heads": text(s.num_heads),
        "ssm.num_classes": text(s.num_classes),
        "ssm.bn_relu_on_last": text(s.bn_relu_on_last),
        "ssm.use_bn": text(s.use_bn),
        "ssm.use_relu": text(s.use_relu),
        "train.epochs": text(t.epochs),
        "train.milestones": join(t.milestones),
        "train.batch_size": text(t.batch_size),
        "train.eval_batch_size": text(t.eval_batch_size),
        "train.base_lr": repr(t.base_lr),
        "train.lr_decay": repr(t.lr_decay),
        "train.momentum": repr(t.momentum),
        "train.weight_decay": repr(t.weight_decay),
        "train.scheme": t.scheme,
        "train.seed": text(t.seed),
        "train.augment_pad": text(t.augment_pad),
        "train.flip_prob": repr(t.flip_prob),
        "data.source": d.source,
        "data.train_images": text(d.train_images),
        "data.train_labels": text(d.train_labels),
        "data.test_images": text(d.test_images),
        "data.test_labels": text(d.test_labels),
        "data.synthetic_per_class": text(d.synthetic_per_class),
        "data.synthetic_test_per_class": text(d.synthetic_test_per_class),
        "data.image_size": text(d.image_size),
        "data.seed": text(d.seed),
        "precision": text(config.precision),
        "out_dir": text(config.out_dir),
    }
