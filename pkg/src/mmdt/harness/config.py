"""Sectioned ``key = value`` run configuration (INI via configparser)."""
from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields

from ..blocks import ModelConfig
from ..errors import ParameterError
from .synthetic import SynthDims


@dataclass
class DataConfig:
    seed: int = 0
    task: str = "i2v"
    count: int = 1
    frames: int = 2
    height: int = 4
    width: int = 4
    audio_tokens: int = 8
    patch: int = 2

    def dims(self, model: ModelConfig) -> SynthDims:
        return SynthDims(self.frames, self.height, self.width, model.latent_channels,
                         self.audio_tokens, model.audio_channels, self.patch)


@dataclass
class TrainConfig:
    steps: int = 200
    lr: float = 1e-3
    seed: int = 0
    # one frozen (t, eps) draw per sample: the overfit regime
    fixed_noise: bool = True


@dataclass
class SampleConfig:
    steps: int = 8
    guidance_scale: float = 1.0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)

    SECTIONS = ("model", "data", "train", "sample")

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        for name in self.SECTIONS:
            part = getattr(self, name)
            d = part.to_dict() if isinstance(part, ModelConfig) else asdict(part)
            cp[name] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in d.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ParameterError(f"config does not parse: {exc}") from exc
        unknown = set(cp.sections()) - set(cls.SECTIONS)
        if unknown:
            raise ParameterError(f"unknown config sections {sorted(unknown)}")
        out = cls()
        if cp.has_section("model"):
            out.model = ModelConfig.from_dict(dict(cp["model"]))
        for name in ("data", "train", "sample"):
            if cp.has_section(name):
                setattr(out, name, _coerce(type(getattr(out, name)), dict(cp[name])))
        return out

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def _coerce(kind, raw: dict):
    defaults = kind()
    known = {f.name for f in fields(kind)}
    vals = {}
    for k, v in raw.items():
        if k not in known:
            raise ParameterError(f"unknown {kind.__name__} key {k!r}")
        default = getattr(defaults, k)
        if isinstance(default, bool):
            vals[k] = v.strip().lower() in ("1", "true", "yes", "on")
        else:
            try:
                vals[k] = type(default)(v)
            except ValueError as exc:
                raise ParameterError(f"bad value for {k!r}: {v!r}") from exc
    return kind(**vals)
