"""Network and training configuration, with a flat ``key = value`` text format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional


class ConfigError(ValueError):
    pass


def _stages_from_text(text: str) -> tuple:
    stages = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            convs, chans = item.lower().split("x")
            stages.append((int(convs), int(chans)))
        except ValueError:
            raise ConfigError(f"bad stage spec {item!r}, expected <convs>x<channels>") from None
    return tuple(stages)


def _stages_to_text(stages) -> str:
    return ",".join(f"{c}x{ch}" for c, ch in stages)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


TOY_STAGES = ((2, 8), (2, 16), (3, 32), (3, 64), (3, 64))
VGG16_STAGES = ((2, 64), (2, 128), (3, 256), (3, 512), (3, 512))


@dataclass(frozen=True)
class NetConfig:
    stages: tuple = TOY_STAGES
    # stage indices (0-based) whose last conv feeds a side output; None = every stage
    side_taps: Optional[tuple] = None
    # None = all ones
    loss_weights: Optional[tuple] = None
    # None = 1/M
    fusion_init: Optional[float] = None
    deep_supervision: bool = True
    pooling_mode: str = "max"
    input_channels: int = 3
    kernel_size: int = 3
    # class-balanced (True) or plain cross-entropy for the fusion loss
    balanced_fuse: bool = True

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("at least one stage is required")
        for convs, chans in self.stages:
            if convs < 1 or chans < 1:
                raise ConfigError(f"invalid stage ({convs}, {chans})")
        if self.pooling_mode not in ("max", "average"):
            raise ConfigError(f"pooling_mode must be max or average, got {self.pooling_mode!r}")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")
        taps = self.taps
        if any(t < 0 or t >= len(self.stages) for t in taps):
            raise ConfigError(f"side_taps {taps} out of range for {len(self.stages)} stages")
        if list(taps) != sorted(set(taps)):
            raise ConfigError(f"side_taps must be strictly increasing, got {taps}")
        if len(self.alphas) != len(taps):
            raise ConfigError(f"{len(self.alphas)} loss weights for {len(taps)} side outputs")

    @property
    def taps(self) -> tuple:
        return tuple(range(len(self.stages))) if self.side_taps is None else tuple(self.side_taps)

    @property
    def num_sides(self) -> int:
        return len(self.taps)

    @property
    def alphas(self) -> tuple:
        if self.loss_weights is None:
            return (1.0,) * self.num_sides
        return tuple(self.loss_weights)

    @property
    def fusion_weight_init(self) -> float:
        return 1.0 / self.num_sides if self.fusion_init is None else self.fusion_init

    def stage_strides(self) -> list:
        """Cumulative input stride at each stage: 1, 2, 4, ..."""
        return [2**s for s in range(len(self.stages))]

    @property
    def min_input_size(self) -> int:
        return self.stage_strides()[-1]

    def replace(self, **changes) -> "NetConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1
    learning_rate: float = 3e-4
    momentum: float = 0.9
    weight_decay: float = 0.0002
    iterations: int = 2000
    # iteration at which the learning rate is divided by 10; None = iterations // 2
    lr_drop: Optional[int] = None
    seed: int = 0
    angles: int = 16
    flips: bool = True
    scales: tuple = (1.0,)
    consensus_threshold: int = 3
    # optional square training resize; None keeps native size
    resize: Optional[int] = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("rates must be non-negative")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.lr_drop is not None and self.lr_drop > self.iterations:
            raise ConfigError(f"lr_drop {self.lr_drop} exceeds iterations {self.iterations}")

    @property
    def drop_at(self) -> int:
        return self.iterations // 2 if self.lr_drop is None else self.lr_drop

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


FULL_SCALE_TRAIN = TrainConfig(batch_size=10, learning_rate=1e-6, iterations=10000, lr_drop=5000)


_PARSERS: dict[str, Any] = {
    "stages": _stages_from_text,
    "side_taps": _ints,
    "loss_weights": _floats,
    "scales": _floats,
}


def _coerce(cls, key: str, text: str):
    if key in _PARSERS:
        return _PARSERS[key](text)
    ftype = {f.name: f.type for f in fields(cls)}[key]
    if text.strip().lower() in ("none", ""):
        if "Optional" in str(ftype):
            return None
    if "bool" in str(ftype):
        return _parse_bool(text)
    if "int" in str(ftype):
        return int(text)
    if "float" in str(ftype):
        return float(text)
    return text.strip()


def parse_pairs(text: str, source: str = "<config>") -> dict:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        pairs[key.strip().replace("-", "_")] = value.strip()
    return pairs


def from_pairs(cls, pairs: dict, base=None):
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in pairs.items():
        if key not in known:
            raise ConfigError(f"unknown {cls.__name__} key {key!r}")
        try:
            kwargs[key] = value if not isinstance(value, str) else _coerce(cls, key, value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    base = base if base is not None else cls()
    return dataclasses.replace(base, **kwargs)


def load_config(cls, path, overrides: Optional[dict] = None):
    """Read a key-value config file, then apply ``overrides`` (last writer wins)."""
    pairs = parse_pairs(Path(path).read_text(), str(path)) if path else {}
    pairs.update(overrides or {})
    return from_pairs(cls, pairs)


def dump_config(cfg) -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if f.name == "stages":
            text = _stages_to_text(value)
        elif isinstance(value, tuple):
            text = ",".join(str(v) for v in value)
        else:
            text = str(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"
