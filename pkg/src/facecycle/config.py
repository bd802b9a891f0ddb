"""Run configuration: nested dataclasses addressed by dotted keys.

Config files are plain ``key = value`` lines (``#`` starts a comment), e.g.::

    train.batch_size = 32
    data.corpus_root = /data/voxceleb_frames
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_type_hints

from .nets import DEFAULT_BACKBONE_FILE


@dataclass
class DataConfig:
    corpus_root: str = ""
    image_size: int = 64
    flip_probability: float = 0.5
    workers: int = 0
    cache_images: bool = True


@dataclass
class ModelConfig:
    d_exp: int = 256
    d_id: int = 256
    backbone_weights: str = DEFAULT_BACKBONE_FILE


@dataclass
class LossConfig:
    lambda_perc: float = 0.05
    alpha_margin: float = 0.1
    flow: float = 1.0
    expression: float = 1.0
    identity: float = 1.0
    margin: float = 1.0


@dataclass
class TrainConfig:
    stage: int = 1
    batch_size: int = 32
    lr_stage1: float = 5e-5
    lr_stage2: float = 1e-4
    epochs_stage1: int = 40
    epochs_stage2: int = 20
    # 0 means one pass over the corpus frames
    steps_per_epoch: int = 0
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    lr_drop_factor: float = 10.0
    grad_clip: float = 10.0
    seed: int = 0
    stage1_checkpoint: str = ""
    resume: str = ""
    checkpoint_every: int = 1000
    max_steps: int = 0

    def validate(self):
        if self.stage not in (1, 2):
            raise ValueError(f"train.stage must be 1 or 2, got {self.stage}")
        for name in ("batch_size", "epochs_stage1", "epochs_stage2", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"train.{name} must be positive")
        for name in ("lr_stage1", "lr_stage2", "lr_drop_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"train.{name} must be positive")
        if self.steps_per_epoch < 0 or self.max_steps < 0:
            raise ValueError("train.steps_per_epoch and train.max_steps must be >= 0")
        if self.stage == 2 and not self.stage1_checkpoint and not self.resume:
            raise ValueError("stage 2 requires train.stage1_checkpoint")

    @property
    def lr(self):
        return self.lr_stage1 if self.stage == 1 else self.lr_stage2

    @property
    def epochs(self):
        return self.epochs_stage1 if self.stage == 1 else self.epochs_stage2


@dataclass
class ProbeSection:
    task: str = "expression_classify"
    which: str = "expr"
    epochs: int = 300
    # 0 picks the task default (30 for classification, 0.01 for regression)
    lr_initial: float = 0.0
    lr_drop_every: int = 80
    # 0 picks the task default (256 for classification, 16 for regression)
    batch_size: int = 0
    train_set: str = ""
    test_set: str = ""


@dataclass
class VerifySection:
    pairs: str = ""
    folds: int = 0


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeSection = field(default_factory=ProbeSection)
    verify: VerifySection = field(default_factory=VerifySection)

    def flat(self) -> dict:
        out = {}
        for sec in dataclasses.fields(self):
            for f in dataclasses.fields(getattr(self, sec.name)):
                out[f"{sec.name}.{f.name}"] = getattr(getattr(self, sec.name), f.name)
        return out

    def set(self, key: str, value):
        try:
            sec_name, name = key.split(".")
            sec = getattr(self, sec_name)
            hint = get_type_hints(type(sec))[name]
        except (ValueError, AttributeError, KeyError):
            raise KeyError(f"unknown config key {key!r}") from None
        setattr(sec, name, _coerce(value, hint, key))

    def digest(self) -> str:
        return hashlib.sha1(json.dumps(self.flat(), sort_keys=True).encode()).hexdigest()[:8]


def _coerce(value, hint, key):
    if not isinstance(value, str):
        return hint(value) if hint in (int, float) else value
    value = value.strip()
    try:
        if hint is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if hint is int:
            return int(value)
        if hint is float:
            return float(value)
    except ValueError:
        raise ValueError(f"{key}: cannot parse {value!r} as {hint.__name__}") from None
    return value


def parse_assignment(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ValueError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def load_config(path=None, overrides=()) -> Config:
    cfg = Config()
    if path:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                cfg.set(*parse_assignment(line))
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    for item in overrides:
        cfg.set(*parse_assignment(item))
    return cfg


def dump_config(cfg: Config) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.flat().items())
