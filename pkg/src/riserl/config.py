"""Experiment configuration: nested dataclasses, JSON round-trip, strict keys."""

from __future__ import annotations

import dataclasses
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_type_hints

from .encoders import CombineMode, FixedEncoderSpec, FixedKind
from .envs import EnvKind, EnvSpec
from .errors import ConfigError


class Mode(str, enum.Enum):
    PLAIN = "plain"
    RISE = "rise"
    R2D2 = "r2d2"


@dataclass
class NetworkConfig:
    mode: Mode = Mode.RISE
    combine: CombineMode = CombineMode.UPSCALE_MULTIPLY
    add_sigmoid: bool = True
    fixed: FixedEncoderSpec = field(default_factory=FixedEncoderSpec)
    convs: list = field(default_factory=lambda: [[16, 4, 2], [32, 3, 2]])
    feature_dim: int = 128
    framestack: int = 2
    lstm_hidden: int = 64
    head_hidden: int = 128
    context: int = 16
    no_grad_burn_in: int = 0
    stored_state: bool = False
    burn_in: int = 4
    seq_len: int = 8

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.combine = CombineMode(self.combine)
        if isinstance(self.fixed, dict):
            self.fixed = _build(FixedEncoderSpec, self.fixed, "network.fixed")
        for name in ("feature_dim", "framestack", "lstm_hidden", "head_hidden", "context", "seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"network.{name} must be >= 1")
        if self.no_grad_burn_in < 0 or self.burn_in < 0:
            raise ConfigError("burn-in lengths must be >= 0")


@dataclass
class OptimConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float | None = None  # None -> 0.005 / batch_size
    clip_norm: float = 10.0
    huber_kappa: float = 1.0

    def __post_init__(self):
        if self.lr <= 0 or self.clip_norm <= 0 or self.huber_kappa <= 0:
            raise ConfigError("optim.lr, clip_norm and huber_kappa must be positive")


@dataclass
class ReplayConfig:
    capacity: int = 1 << 17
    prioritized: bool = True
    alpha: float = 0.2
    beta: float = 0.4
    eps_priority: float = 1e-6
    min_fill: int = 1000

    def __post_init__(self):
        if self.capacity < 1 or self.min_fill < 1:
            raise ConfigError("replay.capacity and min_fill must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("replay.alpha must lie in [0, 1]")


@dataclass
class ScheduleConfig:
    total_frames: int = 200_000
    num_envs: int = 8
    batch_size: int = 64
    gamma: float = 0.99
    n_step: int = 3
    double_q: bool = False
    target_sync: int = 200
    eps_start: float = 1.0
    eps_end: float = 0.01
    eps_decay_frames: int = 50_000
    eps_disable_frames: int | None = None
    log_every: int = 2_000
    checkpoint_every: int = 0
    save_replay: bool = False

    def __post_init__(self):
        if self.total_frames < 0:
            raise ConfigError("schedule.total_frames must be >= 0")
        if self.num_envs < 1 or self.batch_size < 1 or self.n_step < 1 or self.target_sync < 1:
            raise ConfigError("schedule sizes must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("schedule.gamma must lie in [0, 1)")
        if self.eps_decay_frames < 1 or self.log_every < 1:
            raise ConfigError("schedule.eps_decay_frames and log_every must be >= 1")


@dataclass
class ExperimentConfig:
    env: EnvSpec = field(default_factory=EnvSpec)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        fixed = self.network.fixed
        if self.network.mode is Mode.R2D2 and self.schedule.double_q:
            raise ConfigError("schedule.double_q is only supported for plain and rise modes")
        if fixed.kind is FixedKind.DOWNSAMPLE and max(fixed.downsample_hw) > self.env.obs_size:
            raise ConfigError("network.fixed.downsample_hw larger than the observation")

    @property
    def adam_eps(self) -> float:
        return self.optim.eps if self.optim.eps is not None else 0.005 / self.schedule.batch_size

    def to_dict(self) -> dict:
        return _to_jsonable(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return _build(cls, data, "")

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)


def _to_jsonable(x: Any) -> Any:
    if isinstance(x, enum.Enum):
        return x.value
    if isinstance(x, dict):
        return {k: _to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_to_jsonable(v) for v in x]
    return x


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        sub = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, sub)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def desk_preset(env: str = "tmaze", mode: str = "rise", **overrides) -> ExperimentConfig:
    """Small settings that train in minutes on one CPU core."""
    cfg = ExperimentConfig(env=EnvSpec(kind=EnvKind(env)), network=NetworkConfig(mode=Mode(mode)))
    # per-element grads sit near 1e-6 at these sizes, so 0.005/b would swamp Adam's step
    cfg.optim.eps = 1e-8
    if cfg.env.kind is EnvKind.TMAZE:
        # a wall bump costs only a discount step; 0.9 keeps "forward" clearly ahead of stalling
        cfg.schedule.gamma = 0.9
        cfg.schedule.total_frames = 100_000
        cfg.network.context = 8
        if cfg.network.mode is not Mode.R2D2:
            # multi-step targets carry the turn taken by an early, cue-blind policy back into
            # the corridor and can pin one cue's forward values negative; one-step uses the max.
            # Sequence replay learns the cue far more slowly with n=1, so it keeps the default.
            cfg.schedule.n_step = 1
        # window reaches back to the step cap so late junction arrivals still see the cue
        cfg.network.no_grad_burn_in = cfg.env.max_steps - cfg.network.context
    for dotted, value in overrides.items():
        obj = cfg
        *path, last = dotted.split("__")
        for p in path:
            obj = getattr(obj, p)
        if not hasattr(obj, last):
            raise ConfigError(f"unknown override {dotted}")
        setattr(obj, last, value)
    return ExperimentConfig.from_dict(cfg.to_dict())
