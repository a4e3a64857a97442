"""Run configuration: model geometry, training, memory policy, synthetic data.

Configs are read from and written to INI files (``[model]``, ``[train]``,
``[memory]``, ``[synth]`` sections); unknown keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    H: int = 64
    W: int = 64
    P: int = 16
    C: int = 32
    L: int = 4
    heads: int = 2
    M_max: int = 4
    mask_add_layers: tuple = None  # None means every layer
    mlp_ratio: int = 4
    decoupling: str = "both"  # none | decoup1 | decoup2 | both
    dts: bool = True
    dts_global: str = "ref"  # ref | current (the DTS-t variant)
    stem_channels: tuple = (16, 32)

    def __post_init__(self):
        if self.mask_add_layers is None:
            self.mask_add_layers = tuple(range(self.L))
        self.mask_add_layers = tuple(int(i) for i in self.mask_add_layers)
        self.stem_channels = tuple(int(c) for c in self.stem_channels)
        self.validate()

    @property
    def N(self) -> int:
        return (self.H // self.P) * (self.W // self.P)

    @property
    def grid(self) -> tuple:
        return (self.H // self.P, self.W // self.P)

    @property
    def d_k(self) -> int:
        return self.C // self.heads

    def validate(self) -> None:
        if self.P < 4 or self.P % 4:
            raise ConfigError(f"patch stride P={self.P} must be a positive multiple of 4")
        if self.H % self.P or self.W % self.P:
            raise ConfigError(f"frame {self.H}x{self.W} not divisible by patch stride {self.P}")
        if self.C % self.heads:
            raise ConfigError(f"C={self.C} not divisible by heads={self.heads}")
        if self.C % 2:
            raise ConfigError("C must be even (decoder halves the channel count)")
        if self.N <= 0 or self.L < 1 or self.M_max < 1:
            raise ConfigError("N, L and M_max must be positive")
        if not set(self.mask_add_layers) <= set(range(self.L)):
            raise ConfigError(f"mask_add_layers {self.mask_add_layers} outside 0..{self.L - 1}")
        if self.decoupling not in ("none", "decoup1", "decoup2", "both"):
            raise ConfigError(f"unknown decoupling mode {self.decoupling!r}")
        if self.dts_global not in ("ref", "current"):
            raise ConfigError(f"unknown dts_global {self.dts_global!r}")
        if len(self.stem_channels) != 2:
            raise ConfigError("stem_channels needs two entries (1/4 and 1/8 scale)")


@dataclass
class TrainConfig:
    steps: int = 6000
    batch: int = 4
    grad_accum: int = 2
    seq_len: int = 5
    lr: float = 2e-4
    lr_main: float = 1e-4
    warmup_steps: int = 200
    loss_ce_weight: float = 0.5
    loss_jaccard_weight: float = 0.5
    bootstrap_final: float = 0.15
    bootstrap_anneal_frac: float = 0.2
    teacher_forcing_frac: float = 0.3
    tau_start: float = 1.0
    tau_end: float = 0.1
    store_interval: int = 2
    ratio_reg_weight: float = 0.0  # >0 enables the fixed-0.5 selection-rate loss
    ratio_reg_target: float = 0.5
    grad_clip: float = 1.0
    seed: int = 0
    precision: str = "float32"
    log_every: int = 50
    prefetch: int = 4

    def validate(self) -> None:
        for name in ("steps", "batch", "grad_accum", "seq_len", "store_interval"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1")
        if not 0 < self.bootstrap_final <= 1:
            raise ConfigError("train.bootstrap_final must be in (0, 1]")
        if self.tau_start <= 0 or self.tau_end <= 0:
            raise ConfigError("Gumbel temperatures must be positive")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"train.precision {self.precision!r} not in float32/float64")

    def __post_init__(self):
        self.validate()


@dataclass
class MemoryPolicy:
    kind: str = "fifo"  # fifo | topk
    store_interval: int = 5
    cap: int = 3
    topk: int | None = None  # None: scaled from 520 tokens per 1024-token grid

    def __post_init__(self):
        if self.kind == "fifo_frames":
            self.kind = "fifo"
        if self.kind == "topk_tokens":
            self.kind = "topk"
        if self.kind not in ("fifo", "topk"):
            raise ConfigError(f"unknown memory policy {self.kind!r}")
        if self.store_interval < 1 or self.cap < 1:
            raise ConfigError("store_interval and cap must be >= 1")
        if self.topk is not None and self.topk < 0:
            raise ConfigError("topk must be non-negative")

    def topk_for(self, N: int) -> int:
        if self.topk is not None:
            return self.topk
        return int(round(520 * N / 1024))


@dataclass
class SynthConfig:
    H: int = 64
    W: int = 64
    num_objects: int = 2
    shapes: tuple = ("square", "disc", "triangle")
    size_min: int = 14
    size_max: int = 24
    speed_min: float = 0.5
    speed_max: float = 3.0
    occlusion: bool = True
    frames: int = 5
    noise: float = 0.0
    min_color_gap: float = 0.35
    seed: int = 0

    def __post_init__(self):
        self.shapes = tuple(self.shapes)
        if self.num_objects < 1:
            raise ConfigError("synth.num_objects must be >= 1")
        if self.size_min > self.size_max or self.size_max >= min(self.H, self.W):
            raise ConfigError("synth object sizes do not fit the frame")
        if self.frames < 1:
            raise ConfigError("synth.frames must be >= 1")
        bad = set(self.shapes) - {"square", "disc", "triangle"}
        if bad:
            raise ConfigError(f"unknown shapes {sorted(bad)}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    memory: MemoryPolicy = field(default_factory=MemoryPolicy)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def to_dict(self) -> dict:
        return {name: _plain(dataclasses.asdict(getattr(self, name))) for name in _SECTIONS}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        kwargs = {}
        for name, klass in _SECTIONS.items():
            section = dict(d.get(name, {}))
            known = {f.name for f in fields(klass)}
            unknown = set(section) - known
            if unknown:
                raise ConfigError(f"[{name}] unknown keys: {sorted(unknown)}")
            try:
                kwargs[name] = klass(**section)
            except TypeError as exc:
                raise ConfigError(f"[{name}] {exc}") from exc
        return cls(**kwargs)


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "memory": MemoryPolicy, "synth": SynthConfig}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def model_digest(cfg: ModelConfig) -> str:
    blob = json.dumps(_plain(dataclasses.asdict(cfg)), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# --------------------------------------------------------------------------
# INI round trip
# --------------------------------------------------------------------------

def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if raw.lower() in ("none", ""):
        return None
    if isinstance(default, tuple) or (default is None and "," in raw):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        return tuple(_scalar(p) for p in parts)
    return _scalar(raw)


def _scalar(raw: str):
    for conv in (int, float):
        try:
            return conv(raw)
        except ValueError:
            pass
    return raw


def _format_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return ", ".join(str(x) for x in v) + ("," if len(v) == 1 else "")
    if v is None:
        return "none"
    return str(v)


def load_config(path) -> RunConfig:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    extra = set(parser.sections()) - set(_SECTIONS)
    if extra:
        raise ConfigError(f"{path}: unknown sections {sorted(extra)}")
    d = {}
    for name, klass in _SECTIONS.items():
        if not parser.has_section(name):
            continue
        defaults = {f.name: _field_default(f) for f in fields(klass)}
        section = {}
        for key, raw in parser.items(name):
            if key not in defaults:
                raise ConfigError(f"{path}: [{name}] unknown key {key!r}")
            try:
                value = _parse_value(raw, defaults[key])
            except ConfigError as exc:
                raise ConfigError(f"{path}: [{name}] {key}: {exc}") from exc
            if isinstance(defaults[key], float) and isinstance(value, int):
                value = float(value)
            section[key] = value
        d[name] = section
    return RunConfig.from_dict(d)


def _field_default(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
        return f.default_factory()  # type: ignore[misc]
    return None


def dump_config(cfg: RunConfig, path) -> None:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for name, section in cfg.to_dict().items():
        parser[name] = {k: _format_value(v) for k, v in section.items()}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        parser.write(fh)
