"""Plain ``key=value`` run configuration.

Keys are namespaced ``model.*``, ``teacher.*``, ``train.*`` and
``analysis.*``.  Blank lines and ``#`` comments are ignored, unknown or
duplicated keys are errors, and missing keys take the defaults below.  The
original text is kept verbatim so it can be echoed into checkpoints.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_channels: int = 1
    image_size: int = 16
    levels: int = 3
    latent_channels: list[int] = field(default_factory=lambda: [8, 16, 32])
    hidden_widths: list[int] = field(default_factory=lambda: [32, 64, 128])
    epsilon: float = 0.02
    horizon: float = 3.0
    seed: int = 0
    activation: str = "silu"

    def validate(self) -> None:
        L = self.levels
        if L < 1:
            raise ConfigError("model.levels must be >= 1")
        if len(self.latent_channels) != L or len(self.hidden_widths) != L:
            raise ConfigError(f"model.latent_channels and model.hidden_widths need {L} entries")
        if any(d <= 0 or d % 2 for d in self.latent_channels):
            raise ConfigError(f"model.latent_channels must be positive and even: {self.latent_channels}")
        if any(w <= 0 for w in self.hidden_widths):
            raise ConfigError("model.hidden_widths must be positive")
        if self.image_size % (2 ** (L - 1)):
            raise ConfigError(f"model.image_size {self.image_size} not divisible by 2^{L - 1}")
        if not 0 < self.epsilon < self.horizon:
            raise ConfigError("need 0 < model.epsilon < model.horizon")
        if self.activation not in ("silu", "identity"):
            raise ConfigError(f"model.activation must be silu or identity, got {self.activation!r}")

    def level_size(self, level: int) -> int:
        """Spatial side of level ``level`` (1-based)."""
        return self.image_size // 2 ** (level - 1)


@dataclass
class TeacherConfig:
    components: int = 8
    std: float = 0.2
    seed: int = 0
    n_traj: int = 4000
    n_grid: int = 9
    substeps: int = 64

    def validate(self) -> None:
        if self.components < 1:
            raise ConfigError("teacher.components must be >= 1")
        if self.std <= 0:
            raise ConfigError("teacher.std must be positive")
        if self.n_grid < 2 or self.substeps < 1 or self.n_traj < 1:
            raise ConfigError("teacher.n_grid >= 2, teacher.substeps >= 1, teacher.n_traj >= 1")


@dataclass
class TrainConfig:
    batch_size: int = 32
    samples_per_iter: int = 4
    epochs: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    decay: float = 0.95
    lambda1: str = "anneal"
    lambda2: float = 1.0
    seed: int = 0
    log_interval: int = 10
    feature_channels: int = 8
    feature_seed: int = 1234
    data: str = ""
    checkpoint: str = ""

    def validate(self) -> None:
        if self.samples_per_iter < 1:
            raise ConfigError("train.samples_per_iter must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("train.batch_size >= 1 and train.epochs >= 0 required")
        if self.lr <= 0:
            raise ConfigError("train.lr must be positive")
        if self.lambda2 != 1.0:
            raise ConfigError("train.lambda2 is fixed at 1")
        if self.lambda1 != "anneal":
            try:
                float(self.lambda1)
            except ValueError:
                raise ConfigError(f"train.lambda1 must be 'anneal' or a number, got {self.lambda1!r}")
        if not 0 < self.decay <= 1:
            raise ConfigError("train.decay must lie in (0, 1]")


@dataclass
class AnalysisConfig:
    t_edit: str = "mid"
    ratio: float = 0.5
    band: str = "high"
    n_eval: int = 1024
    eval_seed: int = 4242

    def validate(self) -> None:
        if not 0 <= self.ratio <= 1:
            raise ConfigError("analysis.ratio must lie in [0, 1]")
        if self.band not in ("low", "mid", "high", "all"):
            raise ConfigError("analysis.band must be low, mid, high or all")
        if self.t_edit != "mid":
            try:
                float(self.t_edit)
            except ValueError:
                raise ConfigError(f"analysis.t_edit must be 'mid' or a number, got {self.t_edit!r}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    text: str = ""

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        cfg = cls(text=text)
        seen = set()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in seen:
                raise ConfigError(f"line {lineno}: duplicate key {key}")
            seen.add(key)
            section, _, name = key.partition(".")
            target = getattr(cfg, section, None) if section in _SECTIONS else None
            if target is None or name not in {f.name for f in dataclasses.fields(target)}:
                raise ConfigError(f"unknown config key {key}")
            setattr(target, name, _coerce(key, value, _field_type(target, name)))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8", newline="") as f:
            return cls.parse(f.read())

    def validate(self) -> None:
        for s in _SECTIONS:
            getattr(self, s).validate()


_SECTIONS = ("model", "teacher", "train", "analysis")


def _field_type(obj, name):
    return {f.name: f.type for f in dataclasses.fields(obj)}[name]


def _coerce(key: str, value: str, typ: str):
    try:
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        if typ == "list[int]":
            return [int(v) for v in value.split(",") if v.strip()]
        return value
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {typ}") from None


def format_config(cfg: RunConfig) -> str:
    """Render every key, defaults included, as config text."""
    lines = []
    for s in _SECTIONS:
        sec = getattr(cfg, s)
        for f in dataclasses.fields(sec):
            v = getattr(sec, f.name)
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            lines.append(f"{s}.{f.name}={v}")
    return "\n".join(lines) + "\n"
