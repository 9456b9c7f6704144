"""Flat ``section.key = value`` configuration files.

Sections map to nested dataclasses; a field ``lr_mcm`` of the ``optim``
section is written ``optim.lr_mcm = 0.0001``. Blank lines and ``#``
comments are ignored. Unknown keys, duplicates and malformed values raise
:class:`ConfigError` naming the offending line.
"""
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Tuple

from imcnet.errors import ConfigError

# ---------------------------------------------------------------------------
# generic codec


def parse_kv(text, source="<config>"):
    """Parse ``key = value`` lines into an ordered dict of strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(text, tp, key):
    try:
        if tp is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        if typing.get_origin(tp) is tuple:
            inner = typing.get_args(tp)[0]
            items = [s.strip() for s in text.split(",") if s.strip()]
            return tuple(_convert(s, inner, key) for s in items)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def _leaves(cls, prefix=""):
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            yield from _leaves(tp, prefix + f.name + ".")
        else:
            yield prefix + f.name, tp


def to_kv(obj, prefix=""):
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            out.update(to_kv(value, prefix + f.name + "."))
        else:
            out[prefix + f.name] = _format(value)
    return out


def from_kv(cls, mapping):
    """Build ``cls`` from a flat mapping; missing keys keep their defaults."""
    known = dict(_leaves(cls))
    unknown = sorted(set(mapping) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")

    def build(c, prefix):
        hints = typing.get_type_hints(c)
        kwargs = {}
        for f in dataclasses.fields(c):
            key = prefix + f.name
            tp = hints[f.name]
            if dataclasses.is_dataclass(tp):
                kwargs[f.name] = build(tp, key + ".")
            elif key in mapping:
                kwargs[f.name] = _convert(mapping[key], tp, key)
        return c(**kwargs)

    return build(cls, "")


def serialize(obj):
    return "".join(f"{k} = {v}".rstrip() + "\n" for k, v in to_kv(obj).items())


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class ModelConfig:
    n: int = 1
    dt: int = 4
    key_channels: int = 64
    channels: int = 64
    cascade_depth: int = 4
    encoder_channels: Tuple[int, ...] = (16, 32, 48, 64)
    input_size: Tuple[int, ...] = (64, 64)


@dataclass
class OptimConfig:
    lr_encoder: float = 1e-6
    lr_decoder: float = 1e-5
    lr_mcm: float = 1e-4
    lr_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 4
    iterations: int = 2000
    seed: int = 0
    checkpoint_every: int = 500
    # evaluate train-set J every eval_every iterations and stop once it
    # reaches target_j (0 disables early stopping)
    eval_every: int = 100
    target_j: float = 0.0
    augment: bool = False


@dataclass
class DataConfig:
    video: str = ""
    image: str = ""
    # used when no video dataset is given
    synthetic_count: int = 8
    synthetic_seed: int = 0
    synthetic_frames: int = 9


@dataclass
class OutputConfig:
    dir: str = "runs/default"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        self.validate()

    @property
    def n_frames(self):
        return 2 * self.model.n + 1

    def learning_rates(self) -> Dict[str, float]:
        o = self.optim
        return {"encoder": o.lr_encoder * o.lr_scale, "decoder": o.lr_decoder * o.lr_scale,
                "mcm": o.lr_mcm * o.lr_scale}

    def validate(self):
        m, o = self.model, self.optim
        checks = [
            (m.n >= 1, f"model.n must be >= 1, got {m.n}"),
            (m.dt >= 1, f"model.dt must be >= 1, got {m.dt}"),
            (1 <= m.cascade_depth <= 5, f"model.cascade_depth must be in 1..5, got {m.cascade_depth}"),
            (m.key_channels >= 1, f"model.key_channels must be positive, got {m.key_channels}"),
            (len(m.encoder_channels) == 4, f"model.encoder_channels needs 4 entries, got {m.encoder_channels}"),
            (len(m.encoder_channels) == 4 and m.encoder_channels[-1] == m.channels,
             f"last encoder channel count {m.encoder_channels[-1:]} must equal model.channels={m.channels}"),
            (len(m.input_size) == 2 and all(s > 0 and s % 32 == 0 for s in m.input_size),
             f"model.input_size must be two multiples of 32, got {m.input_size}"),
            (min(o.lr_encoder, o.lr_decoder, o.lr_mcm, o.lr_scale) >= 0, "learning rates must be >= 0"),
            (0 <= o.beta1 < 1 and 0 <= o.beta2 < 1, f"betas must lie in [0, 1), got {o.beta1}, {o.beta2}"),
            (o.batch_size >= 1, f"optim.batch_size must be >= 1, got {o.batch_size}"),
            (o.iterations >= 0, f"optim.iterations must be >= 0, got {o.iterations}"),
            (o.checkpoint_every >= 1, f"optim.checkpoint_every must be >= 1, got {o.checkpoint_every}"),
            (o.eval_every >= 1, f"optim.eval_every must be >= 1, got {o.eval_every}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    # -- io
    @classmethod
    def parse(cls, text, source="<config>"):
        return from_kv(cls, parse_kv(text, source))

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.parse(text, str(path))

    def dumps(self):
        return serialize(self)

    def save(self, path):
        Path(path).write_text(self.dumps())
