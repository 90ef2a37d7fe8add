"""Run configuration: nested dataclasses, JSON files, and ``key=value`` overrides."""
from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .ewa import ShareSchedule
from .optim import OptimizerConfig
from .vit import ViTConfig


@dataclass
class MoEConfig:
    num_experts: int = 4
    mode: str = "rup"
    placement: str = "every-2"  # every-2 | last-4 | none
    k: int = 1
    capacity_ratio: float = 1.05
    balance_weight: float = 0.01


@dataclass
class LRScheduleConfig:
    kind: str = "cosine"
    warmup_epochs: float = 1.0
    warmup_steps: int = 0  # takes precedence when > 0


@dataclass
class DatasetConfig:
    train: str = "synthetic:n=4096,classes=10,size=32,seed=7"
    test: str = "synthetic:n=1024,classes=10,size=32,seed=8"
    hflip: bool = False
    mixup_alpha: float = 0.0


@dataclass
class TrainConfig:
    model: ViTConfig = field(default_factory=ViTConfig)
    moe: MoEConfig = field(default_factory=MoEConfig)
    ewa: ShareSchedule = field(default_factory=ShareSchedule)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    lr_schedule: LRScheduleConfig = field(default_factory=LRScheduleConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    epochs: int = 20
    steps: int = 0  # when > 0, run exactly this many optimizer steps instead of epochs
    batch_size: int = 128
    eval_batch_size: int = 256
    seed: int = 0
    label_smoothing: float = 0.1
    eval_every: int = 1  # epochs between evaluations

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def uses_moe(self) -> bool:
        return self.moe.placement != "none" and self.moe.num_experts >= 1


def from_dict(data: dict) -> TrainConfig:
    return _build(TrainConfig, data, "")


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ValueError(f"config section {path or '<root>'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ValueError(f"unknown config keys under {path or '<root>'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        kwargs[name] = _build(sub, value, f"{path}{name}.") if sub else value
    return cls(**kwargs)


_NESTED = {
    (TrainConfig, "model"): ViTConfig,
    (TrainConfig, "moe"): MoEConfig,
    (TrainConfig, "ewa"): ShareSchedule,
    (TrainConfig, "optimizer"): OptimizerConfig,
    (TrainConfig, "lr_schedule"): LRScheduleConfig,
    (TrainConfig, "dataset"): DatasetConfig,
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` strings to a nested dict; values parse as JSON when possible."""
    data = copy.deepcopy(data)
    for item in overrides:
        key, eq, raw = item.partition("=")
        if not eq:
            raise ValueError(f"override {item!r} is not key=value")
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ValueError(f"unknown config section {part!r} in override {item!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ValueError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(raw.strip())
    return data


PRESETS: dict[str, dict] = {
    "desk": {},
    # shrunken desk run used by the directional vanilla-vs-EWA comparison
    "smoke": {
        "model": {"image_size": 16, "d_model": 32, "n_heads": 2},
        "dataset": {"train": "synthetic:n=1024,classes=10,size=16,seed=7,noise=1.5",
                    "test": "synthetic:n=512,classes=10,size=16,seed=8,noise=1.5"},
        "batch_size": 64,
    },
    "vanilla": {"moe": {"placement": "none"}},
    "early-ewa-topk": {
        "moe": {"mode": "topk", "placement": "every-2", "k": 1, "capacity_ratio": 1.05,
                "balance_weight": 0.01},
        "ewa": {"kind": "constant", "early_cutoff_fraction": 0.5},
    },
    "full-scale": {
        "model": {"image_size": 32, "patch_size": 4, "d_model": 384, "n_heads": 6, "depth": 12,
                  "n_classes": 100, "drop_path": 0.1},
        "optimizer": {"kind": "adamw", "lr": 6e-4, "weight_decay": 0.06},
        "lr_schedule": {"warmup_epochs": 30},
        "dataset": {"hflip": True, "mixup_alpha": 0.8},
        "epochs": 300,
        "batch_size": 128,
    },
    "finetune": {
        "optimizer": {"kind": "sgd", "lr": 0.01, "momentum": 0.9, "weight_decay": 0.0},
        "ewa": {"granularity": "step"},
        "lr_schedule": {"warmup_steps": 20},
        "steps": 200,
    },
}


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve(preset: str = "desk", path: str | Path | None = None,
            overrides: list[str] | None = None, seed: int | None = None) -> TrainConfig:
    """Preset, then config file, then ``--set`` overrides, then an explicit seed."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    data = _merge(TrainConfig().to_dict(), PRESETS[preset])
    if path is not None:
        data = _merge(data, json.loads(Path(path).read_text()))
    data = apply_overrides(data, overrides or [])
    if seed is not None:
        data["seed"] = seed
    return from_dict(data)


def save_config(cfg: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
