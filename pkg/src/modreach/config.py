"""Run configuration: typed sections, INI-style files, and override handling.

A config file is flat ``key = value`` text grouped in sections::

    [arm]
    dof = 3
    link_lengths = 0.37, 0.374, 0.229

    [control]
    steps = 150000

Unknown sections or keys are rejected. Values are coerced to the type of
the dataclass field they land in.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping


class ConfigError(ValueError):
    """Invalid configuration value, key or file."""


@dataclass
class ArmConfig:
    dof: int = 3
    link_lengths: tuple[float, ...] = (0.37, 0.374, 0.229)
    joint_lo: tuple[float, ...] = (-1.0, -0.8, -1.2)
    joint_hi: tuple[float, ...] = (1.0, 1.6, 1.2)
    rest_angles: tuple[float, ...] = (0.0, 0.0, 0.0)
    step_size: float = 0.04
    # camera window in world metres; 84 px at 16/7 cm per px
    frame_x0: float = -0.645
    frame_y0: float = -0.96
    frame_size: float = 1.92
    target_radius: float = 0.09
    reach_threshold: float = 0.05
    reward_scale: float = 1e-3
    hold_count: int = 4
    success_radius: float = 0.16
    max_steps: int = 200
    sample_retries: int = 1000

    def validate(self) -> None:
        if self.dof not in (1, 2, 3):
            raise ConfigError(f"dof must be 1, 2 or 3, got {self.dof}")
        for name in ("link_lengths", "joint_lo", "joint_hi", "rest_angles"):
            if len(getattr(self, name)) != 3:
                raise ConfigError(f"arm.{name} needs 3 values")
        if any(lo >= hi for lo, hi in zip(self.joint_lo, self.joint_hi)):
            raise ConfigError("every joint needs lo < hi")
        if any(length <= 0 for length in self.link_lengths):
            raise ConfigError("link lengths must be positive")
        if self.step_size <= 0 or self.frame_size <= 0 or self.max_steps < 1:
            raise ConfigError("step_size, frame_size and max_steps must be positive")
        if self.reach_threshold <= 0 or self.hold_count < 1:
            raise ConfigError("reach_threshold and hold_count must be positive")


@dataclass
class RenderConfig:
    b_offset_x: float = 0.03
    b_offset_y: float = -0.02
    b_thickness_scale: float = 1.4
    b_texture_seed: int = 1418


@dataclass
class PerceptionConfig:
    steps: int = 20000
    batch_size: int = 128
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    rho: float = 0.9
    eps: float = 1e-6
    p_real: float = 0.0
    sim_pool: int = 30000
    real_count: int = 1418
    eval_count: int = 400
    augment_real: bool = True
    augment_sim: bool = False
    log_every: int = 100


@dataclass
class ControlConfig:
    method: str = "kgps"
    steps: int = 150000
    batch_size: int = 64
    gamma: float = 0.99
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    rho: float = 0.9
    eps: float = 1e-6
    replay_capacity: int = 100000
    target_sync: int = 1000
    literal_bellman: bool = False
    eps_start: float = 1.0
    eps_end: float = 0.1
    decay_fraction: float = 0.6
    eval_every: int = 10000
    eval_episodes: int = 200
    learn_start: int = 64

    def validate(self) -> None:
        if self.method not in ("kgps", "egreedy"):
            raise ConfigError(f"control.method must be kgps or egreedy, got {self.method!r}")
        if self.steps < 0 or self.batch_size < 1 or self.replay_capacity < self.batch_size:
            raise ConfigError("bad control budget / batch / capacity")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")


@dataclass
class FinetuneConfig:
    steps: int = 10000
    beta: float = 0.8
    task_batch: int = 64
    perception_batch: int = 256
    p_real: float = 0.75
    explore: float = 0.1
    lr_start: float = 3e-4
    lr_end: float = 3e-5
    control_lr_start: float = 1e-6
    control_lr_end: float = 1e-7
    rho: float = 0.9
    eps: float = 1e-6
    gamma: float = 0.99
    replay_capacity: int = 10000
    target_sync: int = 1000
    learn_start: int = 256
    augment_real: bool = True
    naive: bool = False

    def validate(self) -> None:
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"finetune.beta must lie in [0, 1], got {self.beta}")


@dataclass
class RunConfig:
    seed: int = 0
    arm: ArmConfig = field(default_factory=ArmConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    perception: PerceptionConfig = field(default_factory=PerceptionConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    def validate(self) -> "RunConfig":
        self.arm.validate()
        self.control.validate()
        self.finetune.validate()
        for p in (self.perception.p_real, self.finetune.p_real):
            if not 0.0 <= p <= 1.0:
                raise ConfigError("p_real must lie in [0, 1]")
        return self

    def set(self, dotted: str, raw: Any) -> None:
        """Set ``section.key`` (or top-level ``seed``) from a raw value."""
        section, _, key = dotted.rpartition(".")
        target = getattr(self, section) if section else self
        if section and not dataclasses.is_dataclass(target):
            raise ConfigError(f"unknown section {section!r}")
        names = {f.name: f for f in fields(target)}
        if key not in names or dataclasses.is_dataclass(getattr(target, key)):
            raise ConfigError(f"unknown config key {dotted!r}")
        setattr(target, key, _coerce(getattr(target, key), raw, dotted))

    def update(self, values: Mapping[str, Any]) -> "RunConfig":
        for k, v in values.items():
            self.set(k, v)
        return self

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["run"] = {"seed": str(self.seed)}
        for sec in ("arm", "render", "perception", "control", "finetune"):
            obj = getattr(self, sec)
            cp[sec] = {f.name: _format(getattr(obj, f.name)) for f in fields(obj)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _format(value: Any) -> str:
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    return str(value)


def _coerce(current: Any, raw: Any, key: str) -> Any:
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(current, tuple) else type(current)(raw)
    text = raw.strip()
    try:
        if isinstance(current, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(current, tuple):
            return tuple(float(t) for t in text.split(","))
        if isinstance(current, int):
            return int(float(text)) if "e" in text.lower() else int(text)
        if isinstance(current, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def load_config(path: str | os.PathLike | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Build a validated RunConfig from defaults, an optional file and overrides.

    When ``path`` is None the ``MODREACH_CONFIG`` environment variable is
    consulted.
    """
    cfg = RunConfig()
    path = path or os.environ.get("MODREACH_CONFIG")
    if path:
        cp = configparser.ConfigParser()
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cp.read_string(text)
        for sec in cp.sections():
            for key, value in cp[sec].items():
                cfg.set(key if sec == "run" else f"{sec}.{key}", value)
    if overrides:
        cfg.update(overrides)
    return cfg.validate()
