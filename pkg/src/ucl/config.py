"""Run configuration: a typed dataclass loaded from a flat ``key = value`` file.

Config files use INI syntax with a single ``[run]`` section. Keys left
unset fall back to the per-dataset defaults in :data:`DATASET_DEFAULTS`.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .augment import AugConfig
from .data import SyntheticConfig
from .knn import KnnConfig
from .models import ArchConfig
from .strategies import STRATEGIES, StrategyConfig

PARADIGMS = ("ucl_simsiam", "ucl_barlow", "scl")

# tuned UCL hyperparameters per benchmark; synthetic reuses the CIFAR-10 row
DATASET_DEFAULTS = {
    "cifar10": dict(num_tasks=5, classes_per_task=2, si_c=100.0, si_xi=1.0, der_alpha=0.1,
                    lump_alpha=0.1, buffer_size=200, image_size=32),
    "cifar100": dict(num_tasks=20, classes_per_task=5, si_c=0.1, si_xi=1.0, der_alpha=0.1,
                     lump_alpha=0.1, buffer_size=200, image_size=32),
    "tiny_imagenet": dict(num_tasks=20, classes_per_task=5, si_c=0.01, si_xi=1.0, der_alpha=0.01,
                          lump_alpha=0.4, buffer_size=256, image_size=64),
    "synthetic": dict(num_tasks=3, classes_per_task=2, si_c=100.0, si_xi=1.0, der_alpha=0.1,
                      lump_alpha=0.1, buffer_size=200, image_size=32),
}

PARADIGM_DEFAULTS = {"ucl": dict(epochs=200, batch_size=256), "scl": dict(epochs=50, batch_size=32)}


@dataclass
class RunConfig:
    # stream
    dataset: str = "synthetic"
    data_root: Optional[str] = None
    download: bool = False
    num_tasks: Optional[int] = None
    classes_per_task: Optional[int] = None
    per_task_cap: Optional[int] = None
    synthetic_num_classes: int = 10
    synthetic_image_size: int = 32
    synthetic_train_per_class: int = 100
    synthetic_test_per_class: int = 50
    synthetic_noise: float = 0.1
    synthetic_seed: int = 0
    # method
    paradigm: str = "ucl_simsiam"
    strategy: str = "finetune"
    # architecture
    backbone: str = "resnet18"
    proj_dim: int = 2048
    proj_hidden: int = 2048
    pred_hidden: int = 512
    tiny_widths: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    # optimization
    epochs: Optional[int] = None
    batch_size: Optional[int] = None
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    # objectives and strategies
    lambda_bt: float = 0.005
    bt_centered: bool = True
    si_c: Optional[float] = None
    si_xi: Optional[float] = None
    der_alpha: Optional[float] = None
    der_target: str = "projector"
    lump_alpha: Optional[float] = None
    lump_fixed_lambda: Optional[float] = None
    buffer_size: Optional[int] = None
    replay_batch_size: Optional[int] = None
    # augmentation
    crop_scale_min: float = 0.2
    crop_scale_max: float = 1.0
    crop_padding: int = 4
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_p: float = 0.2
    # evaluation
    knn_k: int = 200
    knn_temperature: float = 0.1
    knn_feature: str = "backbone"
    # bookkeeping
    base_seed: int = 0
    trials: int = 3
    out_dir: str = "runs/default"
    save_checkpoints: bool = True

    # -- derived views ------------------------------------------------------

    @property
    def family(self) -> str:
        return "scl" if self.paradigm == "scl" else "ucl"

    @property
    def objective(self) -> str:
        return "barlow" if self.paradigm == "ucl_barlow" else "simsiam"

    @property
    def seeds(self) -> list[int]:
        return [self.base_seed + k for k in range(self.trials)]

    @property
    def image_size(self) -> int:
        if self.dataset == "synthetic":
            return self.synthetic_image_size
        return DATASET_DEFAULTS[self.dataset]["image_size"]

    def resolved(self) -> RunConfig:
        """Copy with every ``None`` default filled in and values validated."""
        if self.dataset not in DATASET_DEFAULTS:
            raise ValueError(f"unknown dataset {self.dataset!r}")
        if self.paradigm not in PARADIGMS:
            raise ValueError(f"unknown paradigm {self.paradigm!r}; expected one of {PARADIGMS}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        fill = {**DATASET_DEFAULTS[self.dataset], **PARADIGM_DEFAULTS[self.family]}
        updates = {k: v for k, v in fill.items() if hasattr(self, k) and getattr(self, k) is None}
        cfg = dataclasses.replace(self, **updates)
        cfg.strategy_config().validate()
        cfg.arch_config().validate()
        return cfg

    def arch_config(self) -> ArchConfig:
        return ArchConfig(
            backbone=self.backbone, input_size=self.image_size, objective=self.objective,
            proj_dim=self.proj_dim, proj_hidden=self.proj_hidden, pred_hidden=self.pred_hidden,
            supervised=self.family == "scl", num_tasks=self.num_tasks or 1,
            classes_per_task=self.classes_per_task or 1, tiny_widths=list(self.tiny_widths),
        )

    def strategy_config(self) -> StrategyConfig:
        return StrategyConfig(
            name=self.strategy, paradigm=self.family, lr=self.lr, momentum=self.momentum,
            weight_decay=self.weight_decay, der_alpha=self.der_alpha if self.der_alpha is not None else 0.1,
            der_target=self.der_target, si_c=self.si_c if self.si_c is not None else 100.0,
            si_xi=self.si_xi if self.si_xi is not None else 1.0,
            lump_alpha=self.lump_alpha if self.lump_alpha is not None else 0.1,
            lump_fixed_lambda=self.lump_fixed_lambda, buffer_size=self.buffer_size or 0,
            replay_batch_size=self.replay_batch_size,
        )

    def aug_config(self) -> AugConfig:
        return AugConfig.for_dataset(
            self.dataset, self.image_size, crop_scale=(self.crop_scale_min, self.crop_scale_max),
            crop_padding=self.crop_padding, flip_p=self.flip_p, jitter_p=self.jitter_p,
            brightness=self.brightness, contrast=self.contrast, saturation=self.saturation,
            hue=self.hue, grayscale_p=self.grayscale_p,
        )

    def knn_config(self) -> KnnConfig:
        return KnnConfig(k=self.knn_k, temperature=self.knn_temperature, feature_source=self.knn_feature)

    def synthetic_config(self) -> SyntheticConfig:
        return SyntheticConfig(
            num_classes=self.synthetic_num_classes, image_size=self.synthetic_image_size,
            train_per_class=self.synthetic_train_per_class, test_per_class=self.synthetic_test_per_class,
            noise=self.synthetic_noise, seed=self.synthetic_seed,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> RunConfig:
        return cls(**_coerce_all(values))


# ---------------------------------------------------------------------------
# parsing

_HINTS = typing.get_type_hints(RunConfig)


def _parse_scalar(raw: str, typ):
    if typ is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return typ(raw.strip())


def coerce_value(key: str, value):
    if key not in _HINTS:
        raise KeyError(f"unknown config key {key!r}")
    typ = _HINTS[key]
    optional = typing.get_origin(typ) is typing.Union and type(None) in typing.get_args(typ)
    if optional:
        typ = next(t for t in typing.get_args(typ) if t is not type(None))
        if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none", "null")):
            return None
    if typing.get_origin(typ) is list:
        (inner,) = typing.get_args(typ)
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        return [_parse_scalar(str(v), inner) for v in value]
    if isinstance(value, str):
        return _parse_scalar(value, typ)
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, typ):
        raise TypeError(f"{key}: expected {typ.__name__}, got {type(value).__name__}")
    return value


def _coerce_all(values: dict) -> dict:
    return {k: coerce_value(k, v) for k, v in values.items()}


def load_config(path: str | os.PathLike, overrides: dict | None = None) -> RunConfig:
    """Read a ``[run]`` section; unknown keys raise ``KeyError``."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    text = Path(path).read_text()
    parser.read_string(text)
    extra_sections = [s for s in parser.sections() if s != "run"]
    if extra_sections:
        raise KeyError(f"unexpected sections {extra_sections}; use a single [run] section")
    values = dict(parser["run"]) if parser.has_section("run") else {}
    values.update(overrides or {})
    return RunConfig(**_coerce_all(values))


def dump_config(cfg: RunConfig) -> str:
    lines = ["[run]"]
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ", ".join(str(x) for x in v)
        lines.append(f"{k} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"


def parse_overrides(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"override must look like key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    return out
