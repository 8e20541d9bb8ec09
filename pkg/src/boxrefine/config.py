"""Run configuration: one YAML file with a section per component.

Resolution order is defaults, then ``--preset``, then the file, then CLI
flags. Unknown keys are errors. The single top-level ``seed`` drives the
dataset, training and simulated-tracker seeds, so those sections take no
``seed`` key of their own.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .data import SyntheticSpec
from .geometry import JitterParams
from .model import ModelConfig
from .refine import SimulatedTrackerSpec
from .training import LossConfig, TrainConfig


@dataclass
class EvalConfig:
    num_sequences: int = 10
    seq_length: int = 40
    mode: str = "detached"
    mask_enabled: bool = False
    mask_threshold: float = 0.5
    # when set, bisect tracker.sigma_translation to this coarse mean IoU
    target_coarse_iou: Optional[float] = None
    workers: int = 1

    def __post_init__(self):
        if self.mode not in ("detached", "feedback"):
            raise ValueError(f"eval.mode must be 'detached' or 'feedback', got {self.mode!r}")


@dataclass
class AblationConfig:
    epochs: int = 1
    iterations_per_epoch: int = 20
    num_eval_sequences: int = 4
    fusions: tuple = ("pixelwise", "depthwise", "naive")
    heads: tuple = ("corner", "rpn", "rcnn")
    masks: tuple = (True, False)

    def __post_init__(self):
        self.fusions, self.heads, self.masks = tuple(self.fusions), tuple(self.heads), tuple(self.masks)
        if self.epochs < 1 or self.iterations_per_epoch < 1 or self.num_eval_sequences < 1:
            raise ValueError("ablation budgets must be >= 1")


@dataclass
class PathsConfig:
    dataset: Optional[str] = None
    checkpoint: Optional[str] = None
    out: str = "runs/default"


SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "jitter": JitterParams,
    "loss": LossConfig,
    "tracker": SimulatedTrackerSpec,
    "data": SyntheticSpec,
    "eval": EvalConfig,
    "ablation": AblationConfig,
    "paths": PathsConfig,
}
SEEDED_SECTIONS = ("train", "tracker", "data")

PRESETS = {
    "micro": {
        "model": {"input_size": 128},
        "data": {"num_sequences": 40, "seq_length": 40, "image_size": [128, 128]},
        "train": {"epochs": 4, "iterations_per_epoch": 100, "batch_size": 16, "lr_halving_period_epochs": 2},
        "eval": {"num_sequences": 10, "seq_length": 40, "target_coarse_iou": 0.5},
        "ablation": {"epochs": 1, "iterations_per_epoch": 20, "num_eval_sequences": 4},
    },
    "small": {
        "model": {"input_size": 128},
        "data": {"num_sequences": 80, "seq_length": 60, "image_size": [160, 160]},
        "train": {"epochs": 10, "iterations_per_epoch": 200, "batch_size": 16, "lr_halving_period_epochs": 4},
        "eval": {"num_sequences": 20, "seq_length": 60, "target_coarse_iou": 0.5},
        "ablation": {"epochs": 3, "iterations_per_epoch": 100, "num_eval_sequences": 10},
    },
}


class ConfigError(ValueError):
    pass


def _section_keys(name):
    keys = {f.name for f in dataclasses.fields(SECTIONS[name])}
    if name in SEEDED_SECTIONS:
        keys.discard("seed")
    return keys


def _check_keys(raw: dict, origin: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{origin}: top level must be a mapping")
    for key, val in raw.items():
        if key == "seed":
            continue
        if key not in SECTIONS:
            raise ConfigError(f"{origin}: unknown key {key!r}")
        if not isinstance(val, dict):
            raise ConfigError(f"{origin}: section {key!r} must be a mapping")
        unknown = set(val) - _section_keys(key)
        if unknown:
            raise ConfigError(f"{origin}: unknown key(s) {', '.join(f'{key}.{k}' for k in sorted(unknown))}")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    jitter: JitterParams = field(default_factory=JitterParams)
    loss: LossConfig = field(default_factory=LossConfig)
    tracker: SimulatedTrackerSpec = field(default_factory=SimulatedTrackerSpec)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @classmethod
    def from_dict(cls, raw: dict, origin: str = "config") -> "RunConfig":
        _check_keys(raw, origin)
        seed = int(raw.get("seed", 0))
        kwargs = {"seed": seed}
        for name, klass in SECTIONS.items():
            vals = dict(raw.get(name, {}))
            if name in SEEDED_SECTIONS:
                vals["seed"] = seed
            try:
                kwargs[name] = klass(**vals)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"{origin}: section {name!r}: {e}") from None
        return cls(**kwargs)

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in SECTIONS:
            d = dataclasses.asdict(getattr(self, name))
            if name in SEEDED_SECTIONS:
                d.pop("seed", None)
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out

    def eval_data_spec(self) -> SyntheticSpec:
        """Held-out sequences drawn from a disjoint seed stream."""
        return dataclasses.replace(self.data, num_sequences=self.eval.num_sequences,
                                   seq_length=self.eval.seq_length, seed=self.data.seed + 1000)

    def dump(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path


def parse_override(text: str) -> dict:
    """``section.key=value`` (value parsed as YAML) -> nested dict."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    path, value = text.split("=", 1)
    keys = path.strip().split(".")
    out = cur = {}
    for k in keys[:-1]:
        cur[k] = {}
        cur = cur[k]
    cur[keys[-1]] = yaml.safe_load(value)
    return out


def load_config(path=None, preset: Optional[str] = None, overrides=()) -> RunConfig:
    raw: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        raw = copy.deepcopy(PRESETS[preset])
    origin = "config"
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file {path} not found")
        origin = str(path)
        loaded = yaml.safe_load(path.read_text()) or {}
        _check_keys(loaded, origin)
        raw = _merge(raw, loaded)
    for o in overrides:
        ov = o if isinstance(o, dict) else parse_override(o)
        _check_keys(ov, "override")
        raw = _merge(raw, ov)
    return RunConfig.from_dict(raw, origin)
