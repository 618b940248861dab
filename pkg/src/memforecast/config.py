"""Dataclass configs, prediction-length presets and the dotted key=value file format."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError

# pred_len -> (encoder_len, decoder_len, batch_size, enc_layers)
PRED_LEN_BUCKETS = {
    24: (48, 48, 32, 1),
    48: (96, 48, 32, 1),
    168: (168, 168, 8, 2),
    336: (168, 168, 8, 2),
    720: (336, 336, 4, 2),
}

# host model -> (n_slots, mem_heads)
MEMORY_PRESETS = {
    "informer": (1, 4),
    "fedformer": (1, 2),
    "probtrans": (2, 2),
}


@dataclass
class ModelConfig:
    d_model: int = 1024
    d_ff: int = 2048
    n_heads: int = 8
    enc_layers: int = 1
    dec_layers: int = 1
    base_dropout: float = 0.1
    activation: str = "gelu"
    encoder_len: int = 48
    decoder_len: int = 48
    pred_len: int = 24
    d_f: int = 7
    univariate: bool = False
    target_index: int = -1
    kernel_width: int = 3
    delta: float = 1.0
    use_memory: bool = True
    n_slots: int = 1
    mem_heads: int = 4
    gate_feed: str = "current"          # "current" | "previous"
    update_order: str = "update_first"  # "update_first" | "decode_first"
    squash_candidate: bool = True
    precision: str = "float64"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.use_memory and self.d_model % self.mem_heads:
            raise ConfigurationError(f"d_rm={self.d_model} not divisible by mem_heads={self.mem_heads}")
        if self.d_model % 2:
            raise ConfigurationError("d_model must be even")
        if self.activation.lower() != "gelu":
            raise ConfigurationError(f"only GELU is supported, got {self.activation!r}")
        if self.decoder_len > self.encoder_len:
            raise ConfigurationError("decoder_len must not exceed encoder_len")
        if self.n_slots < 1:
            raise ConfigurationError("n_slots must be >= 1")
        if self.gate_feed not in ("current", "previous"):
            raise ConfigurationError(f"gate_feed must be current|previous, got {self.gate_feed!r}")
        if self.update_order not in ("update_first", "decode_first"):
            raise ConfigurationError(f"update_order must be update_first|decode_first, got {self.update_order!r}")
        if self.precision not in ("float64", "float32"):
            raise ConfigurationError(f"precision must be float64|float32, got {self.precision!r}")
        if not 0.0 <= self.base_dropout < 1.0:
            raise ConfigurationError("base_dropout must lie in [0, 1)")

    @property
    def d_rm(self) -> int:
        return self.d_model

    @property
    def output_dim(self) -> int:
        return 1 if self.univariate else self.d_f

    @classmethod
    def for_pred_len(cls, pred_len: int, **overrides) -> "ModelConfig":
        if pred_len not in PRED_LEN_BUCKETS:
            raise ConfigurationError(f"no preset for pred_len={pred_len}; choose from {sorted(PRED_LEN_BUCKETS)}")
        enc, dec, _, layers = PRED_LEN_BUCKETS[pred_len]
        kw = dict(encoder_len=enc, decoder_len=dec, pred_len=pred_len, enc_layers=layers)
        kw.update(overrides)
        return cls(**kw)


@dataclass
class TrainSchedule:
    theta_max: float = 0.1
    gamma_decay: float = 0.01
    cadence: int = 100
    epochs: int = 6
    patience: int = 3
    lr0: float = 1e-4
    lr_halving_start_epoch: int = 2
    progressive: bool = True
    batch_size: int = 1
    grad_clip: float = 5.0
    target_only: bool = False
    shuffle: bool = True

    def __post_init__(self):
        if not 0.0 < self.theta_max <= 0.5:
            raise ConfigurationError(f"theta_max must lie in (0, 0.5], got {self.theta_max}")
        if self.gamma_decay < 0:
            raise ConfigurationError("gamma_decay must be non-negative")
        if self.cadence < 1 or self.epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ConfigurationError("cadence, epochs, patience and batch_size must be positive")


@dataclass
class DataConfig:
    path: str = ""                 # empty -> synthetic
    datetime_column: str = "date"
    target_column: str = ""
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    stride: int = 1
    synth_points: int = 2000
    synth_features: int = 3
    synth_seed: int = 0
    synth_noise: float = 0.1


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    seed: int = 0
    out: str = "runs/default"

    @classmethod
    def for_pred_len(cls, pred_len: int) -> "RunConfig":
        _, _, batch, _ = PRED_LEN_BUCKETS.get(pred_len, (0, 0, 1, 0))
        return cls(model=ModelConfig.for_pred_len(pred_len), schedule=TrainSchedule(batch_size=batch))


def _convert(raw: str, typ, where: str):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if typing.get_origin(typ) is tuple:
            parts = [p for p in raw.replace(",", " ").replace("/", " ").split() if p]
            return tuple(float(p) for p in parts)
    except ValueError:
        raise ConfigurationError(f"{where}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None
    raise ConfigurationError(f"{where}: unsupported field type {typ}")


def _field_types(obj) -> dict[str, object]:
    hints = typing.get_type_hints(type(obj))
    return {f.name: hints[f.name] for f in dataclasses.fields(obj)}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse ``section.key = value`` lines (``#`` starts a comment) over the defaults.

    A ``model.pred_len`` line re-seeds the model/schedule defaults from the
    matching prediction-length preset before later keys are applied.
    """
    entries: list[tuple[int, str, str]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        entries.append((lineno, key, value))

    cfg = RunConfig()
    for lineno, key, value in entries:
        if key == "model.pred_len":
            pl = _convert(value, int, f"{source}:{lineno}")
            if pl in PRED_LEN_BUCKETS:
                cfg = RunConfig.for_pred_len(pl)
            break

    sections = {"data": cfg.data, "model": cfg.model, "schedule": cfg.schedule}
    for lineno, key, value in entries:
        where = f"{source}:{lineno}"
        if key in ("seed", "out"):
            setattr(cfg, key, _convert(value, int if key == "seed" else str, where))
            continue
        section, _, name = key.partition(".")
        if section not in sections or not name:
            raise ConfigurationError(f"{where}: unknown key {key!r}")
        target = sections[section]
        types = _field_types(target)
        if name not in types:
            raise ConfigurationError(f"{where}: unknown field {key!r}")
        setattr(target, name, _convert(value, types[name], where))
    try:
        # re-run validation on the mutated dataclasses
        cfg.model.validate()
        TrainSchedule.__post_init__(cfg.schedule)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{source}: {exc}") from None
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"{path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


def dump_config(cfg: RunConfig) -> str:
    """Resolved key=value text; feeding it back to parse_config reproduces ``cfg``."""
    lines = [f"seed = {cfg.seed}", f"out = {cfg.out}"]
    # pred_len first so the preset re-seed happens before explicit overrides
    lines.append(f"model.pred_len = {cfg.model.pred_len}")
    for section in ("data", "model", "schedule"):
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            if section == "model" and f.name == "pred_len":
                continue
            lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
