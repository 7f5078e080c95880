"""Training configuration and its file formats (nested JSON or flat key=value)."""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidConfigError
from .losses import LossWeights
from .phantom import DatasetConfig
from .segmentation import SegConfig
from .translation import TranslatorConfig


class BaselineMode(str, enum.Enum):
    TARGET_ONLY = "TARGET_ONLY"  # segmenter on labeled target only
    FINETUNE = "FINETUNE"  # pretrain on source, fine-tune everything on target
    RA_ONLY = "RA_ONLY"  # pretrain on source, train only target adapters + stem
    DET_TRANSLATION_SEG = "DET_TRANSLATION_SEG"  # one-to-one translation + synthesized dice
    STOCH_TRANSLATION_SEG = "STOCH_TRANSLATION_SEG"  # sampled styles + synthesized dice
    STOCH_TRANSLATION_SEG_RA = "STOCH_TRANSLATION_SEG_RA"  # ... plus residual adapters

    @property
    def uses_translation(self) -> bool:
        return self.name.endswith(("TRANSLATION_SEG", "TRANSLATION_SEG_RA"))

    @property
    def stochastic(self) -> bool:
        return self.name.startswith("STOCH")

    @property
    def pretrains(self) -> bool:
        return self in (BaselineMode.FINETUNE, BaselineMode.RA_ONLY)

    @property
    def trains_adapters(self) -> bool:
        return self in (BaselineMode.RA_ONLY, BaselineMode.STOCH_TRANSLATION_SEG_RA)


@dataclass
class TrainConfig:
    mode: BaselineMode = BaselineMode.STOCH_TRANSLATION_SEG_RA
    learning_rate: float = 1e-4
    batch_size: int = 32
    iterations: int = 10_000
    pretrain_iterations: int = 2_000
    beta1: float = 0.5
    beta2: float = 0.999
    weights: LossWeights = field(default_factory=LossWeights)
    synth_ratio: float = 0.5  # fraction of each segmentation mini-batch that is synthesized
    real_fraction: float = 1.0  # share of labeled target patients used for training
    synth_fraction: float = 1.0  # share of source patients available for synthesis
    seg_warmup: int = 0  # steps before segmentation gradients reach the translator
    non_saturating: bool = False
    per_image_dice: bool = False
    seed: int = 0
    checkpoint_every: int = 0  # 0: final checkpoint only
    deterministic: bool = True  # single-threaded, deterministic kernels
    translator: TranslatorConfig = field(default_factory=TranslatorConfig)
    segmenter: SegConfig = field(default_factory=SegConfig)

    def validate(self):
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise InvalidConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 2:
            raise InvalidConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.iterations < 0 or self.pretrain_iterations < 0:
            raise InvalidConfigError("iteration counts must be non-negative")
        for name in ("synth_ratio", "real_fraction", "synth_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidConfigError(f"{name} must be in [0, 1], got {v}")
        if self.translator.source_channels != self.segmenter.source_channels or (
            self.translator.target_channels != self.segmenter.target_channels
        ):
            raise InvalidConfigError("translator and segmenter disagree on channel counts")
        return self

    def to_dict(self) -> dict:
        return _to_plain(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _from_plain(cls, d).validate()


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, tuple):
        return list(obj)
    return obj


def _coerce(tp, value):
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        return tp(value)
    if tp is bool or tp == "bool":
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise InvalidConfigError(f"not a boolean: {value!r}")
        return bool(value)
    if tp in (int, "int"):
        return int(value)
    if tp in (float, "float"):
        return float(value)
    if isinstance(value, str) and "tuple" in str(tp):
        return tuple(int(v) for v in value.strip("()[] ").split(",") if v.strip())
    if isinstance(value, list):
        return tuple(value)
    return value


def _from_plain(cls, d: dict):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in d.items():
        if key not in known:
            raise InvalidConfigError(f"unknown config key {key!r} for {cls.__name__}")
        f = known[key]
        sub = _DATACLASS_FIELDS.get(f.name) if cls is TrainConfig else None
        if sub is not None:
            kwargs[key] = _from_plain(sub, value)
        else:
            tp = f.type if not isinstance(f.type, str) else _STR_TYPES.get(f.type, f.type)
            try:
                kwargs[key] = _coerce(tp, value)
            except (TypeError, ValueError) as exc:
                raise InvalidConfigError(f"bad value for {key!r}: {value!r}") from exc
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise InvalidConfigError(str(exc)) from exc


_DATACLASS_FIELDS = {
    "weights": LossWeights,
    "translator": TranslatorConfig,
    "segmenter": SegConfig,
}
_STR_TYPES = {"BaselineMode": BaselineMode, "int": int, "float": float, "bool": bool}


def parse_config_text(text: str) -> dict:
    """Parse nested JSON, or flat ``key=value`` lines with dotted keys for nesting."""
    stripped = text.strip()
    if stripped.startswith("{"):
        return json.loads(stripped)
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        node = out
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return out


def load_train_config(path, overrides: dict | None = None) -> TrainConfig:
    d = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    for key, value in (overrides or {}).items():
        node = d
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return TrainConfig.from_dict(d)


def load_dataset_config(path, overrides: dict | None = None) -> DatasetConfig:
    d = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    d.update(overrides or {})
    cfg = _from_plain(DatasetConfig, d)
    try:
        cfg.validate()
    except ValueError as exc:
        raise InvalidConfigError(str(exc)) from exc
    return cfg
