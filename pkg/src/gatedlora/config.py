"""Run configuration: dataclasses plus a strict JSON round trip.

Unknown keys are rejected at every nesting level.  The regularizer weight is
spelled ``lambda`` in JSON and ``lam`` in Python.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .adapters import KINDS, RegularizerSpec
from .errors import ConfigError
from .model import ModelConfig

_JSON_KEY = {"lam": "lambda"}
OPTIMIZERS = ("sgd_momentum", "adamw")
SELECTIONS = ("best_val", "last")


@dataclass
class AdapterSpec:
    kind: str = "lora"
    rank: int = 64
    alpha: float = 64.0
    tau: float = 0.1
    s_init: float = 0.5
    gated: bool = True
    ste: bool = True
    always_flow: bool = False
    score_lr_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"adapter kind must be one of {KINDS}, got {self.kind!r}")
        if self.rank < 1:
            raise ConfigError("adapter rank must be >= 1")
        if self.alpha <= 0 or self.tau <= 0:
            raise ConfigError("adapter alpha and tau must be positive")
        if self.score_lr_scale < 0:
            raise ConfigError("score_lr_scale must be non-negative")


@dataclass
class OptimSpec:
    kind: str = "sgd_momentum"
    lr: float = 0.005
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.kind!r}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        self.betas = tuple(self.betas)


@dataclass
class ScheduleSpec:
    warmup_steps: int = 500
    floor: float = 0.0
    base_lr: float | None = None
    total_steps: int | None = None

    def resolved(self, base_lr: float, total_steps: int) -> "ScheduleSpec":
        return ScheduleSpec(self.warmup_steps, self.floor,
                            self.base_lr if self.base_lr is not None else base_lr,
                            self.total_steps if self.total_steps is not None else total_steps)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    adapter: AdapterSpec = field(default_factory=AdapterSpec)
    reg: RegularizerSpec = field(default_factory=RegularizerSpec)
    optim: OptimSpec = field(default_factory=OptimSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    steps: int = 2000
    eval_every: int = 100
    batch_size: int = 32
    seed: int = 0
    source: str = "synth:source?seed=0"
    target: str = "synth:target?seed=0"
    selection: str = "best_val"
    knn_k: int = 20

    def __post_init__(self):
        if self.selection not in SELECTIONS:
            raise ConfigError(f"selection must be one of {SELECTIONS}")
        if self.steps < 0 or self.eval_every < 1 or self.batch_size < 1 or self.knn_k < 1:
            raise ConfigError("steps >= 0, eval_every >= 1, batch_size >= 1, knn_k >= 1 required")
        sched = self.schedule.resolved(self.optim.lr, self.steps)
        if self.steps > 0 and not sched.warmup_steps < sched.total_steps:
            raise ConfigError(f"warmup_steps ({sched.warmup_steps}) must be < total steps ({sched.total_steps})")

    def to_dict(self) -> dict:
        return _to_dict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _from_dict(cls, data, "config")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        val = getattr(obj, f.name)
        if dataclasses.is_dataclass(val):
            val = _to_dict(val)
        elif isinstance(val, tuple):
            val = list(val)
        out[_JSON_KEY.get(f.name, f.name)] = val
    return out


_NESTED = {"model": ModelConfig, "adapter": AdapterSpec, "reg": RegularizerSpec,
           "optim": OptimSpec, "schedule": ScheduleSpec}


def _from_dict(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {_JSON_KEY.get(f.name, f.name): f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kwargs = {}
    for key, val in data.items():
        name = names[key]
        if cls is RunConfig and name in _NESTED:
            val = _from_dict(_NESTED[name], val, f"{where}.{key}")
        kwargs[name] = val
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_config(path: str | Path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return RunConfig.from_dict(data)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(cfg.to_json() + "\n")


def pretrain_config(**changes) -> RunConfig:
    """Supervised source-task recipe used to build the frozen trunk."""
    base = RunConfig(optim=OptimSpec(kind="adamw", lr=1e-3, weight_decay=0.05),
                     schedule=ScheduleSpec(warmup_steps=100), steps=2000,
                     reg=RegularizerSpec(lam=0.0))
    return dataclasses.replace(base, **changes)


DESK_SOURCE = "synth:source?seed=0&noise=1.0"
DESK_TARGET = "synth:target?seed=0&noise=1.0"


def desk_finetune_config(**changes) -> RunConfig:
    """Reduced-budget fine-tune used by the experiment scripts and the acceptance suite.

    800 steps with a 100-step warmup fit a single CPU.  Scores take a 0.025
    learning-rate multiplier: with the shared rate the penalty switches every
    gate off during warmup, before any adapter has learned anything.
    """
    base = RunConfig(adapter=AdapterSpec(score_lr_scale=0.025), schedule=ScheduleSpec(warmup_steps=100),
                     steps=800, source=DESK_SOURCE, target=DESK_TARGET)
    return dataclasses.replace(base, **changes)


def desk_pretrain_config(**changes) -> RunConfig:
    return pretrain_config(**{"source": DESK_SOURCE, "target": DESK_TARGET, **changes})
