"""Run configuration and its flat ``key = value`` text format.

Keys are dotted (``attention.mode = adahan``); ``#`` starts a comment.
Values are ints, floats, ``true``/``false`` or bare strings.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields

from .errors import ConfigError

ATTENTION_MODES = ("han", "adahan", "soft", "straight_through")
AGGREGATORS = ("sum", "pairwise", "rn")
ENCODERS = ("desk", "clevr", "simple", "features")

# (filters, kernel, stride) per conv layer
ENCODER_LAYERS = {
    "desk": ((16, 3, 2), (32, 3, 2), (64, 3, 2), (128, 3, 2)),
    "clevr": ((128, 3, 2), (128, 3, 2), (128, 3, 2), (128, 3, 2)),
    "simple": ((64, 7, 2), (256, 3, 2), (256, 3, 2), (512, 3, 2), (512, 3, 2)),
}


@dataclass
class AttentionConfig:
    mode: str = "han"
    fraction: float = 0.25
    k: int = 0  # 0: derive k from fraction
    tau: float = 0.0  # 0: uniform level 1/(w*h)
    hops: int = 2
    st_normalizer: str = "sigmoid"


@dataclass
class AggregationConfig:
    kind: str = "sum"
    heads: int = 2
    head_dim: int = 32
    scaled: bool = False
    rn_hidden: int = 64
    rn_layers: int = 4


@dataclass
class ModelConfig:
    encoder: str = "desk"
    image_size: int = 64
    batch_norm: bool = True
    coords: bool = True
    feature_channels: int = 2048
    d: int = 64
    alignment_depth: int = 2
    embed_dim: int = 32
    lstm_hidden: int = 64
    classifier_hidden: int = 256
    dropout: float = 0.0


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-4
    l2: float = 1e-5
    max_steps: int = 20000
    seed: int = 0
    eval_every: int = 500
    checkpoint_every: int = 0
    plateau: bool = True
    plateau_windows: int = 3
    plateau_delta: float = 0.001


@dataclass
class RunConfig:
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    # -- flat view ---------------------------------------------------------
    def items(self):
        for section in fields(self):
            sub = getattr(self, section.name)
            for f in fields(sub):
                yield f"{section.name}.{f.name}", getattr(sub, f.name)

    @classmethod
    def keys(cls) -> list[str]:
        return [k for k, _ in cls().items()]

    def get(self, key: str):
        section, name = _split_key(key)
        return getattr(getattr(self, section), name)

    def set(self, key: str, value, line: int | None = None, column: int | None = None):
        section, name = _split_key(key, line, column)
        sub = getattr(self, section)
        current = getattr(sub, name)
        setattr(sub, name, _coerce(value, type(current), key, line, column))

    def copy(self) -> "RunConfig":
        return dataclasses.replace(
            self,
            attention=dataclasses.replace(self.attention),
            aggregation=dataclasses.replace(self.aggregation),
            model=dataclasses.replace(self.model),
            train=dataclasses.replace(self.train),
        )

    def with_overrides(self, overrides: dict) -> "RunConfig":
        out = self.copy()
        for k, v in overrides.items():
            out.set(k, v)
        out.validate()
        return out

    # -- text format -------------------------------------------------------
    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        cfg = (base or cls()).copy()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0]
            if not line.strip():
                continue
            if "=" not in line:
                col = len(line) - len(line.lstrip()) + 1
                raise ConfigError("expected 'key = value'", lineno, col)
            key, rest = line.split("=", 1)
            col = len(key) - len(key.lstrip()) + 1
            vcol = len(key) + 2 + len(rest) - len(rest.lstrip())
            key, value = key.strip(), rest.strip()
            if not value:
                raise ConfigError(f"missing value for {key!r}", lineno, len(line) + 1)
            if key not in _KEYS:
                raise ConfigError(f"unknown key {key!r}", lineno, col)
            cfg.set(key, value, lineno, vcol)
        cfg.validate()
        return cfg

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    # -- checks ------------------------------------------------------------
    def validate(self) -> "RunConfig":
        a, g, m, t = self.attention, self.aggregation, self.model, self.train
        _choice("attention.mode", a.mode, ATTENTION_MODES)
        _choice("attention.st_normalizer", a.st_normalizer, ("sigmoid", "softmax"))
        _choice("aggregation.kind", g.kind, AGGREGATORS)
        _choice("model.encoder", m.encoder, ENCODERS)
        if not 0 < a.fraction <= 1:
            raise ConfigError(f"attention.fraction must lie in (0, 1], got {a.fraction}")
        if a.k < 0 or a.hops < 1 or not 0 <= a.tau < 1:
            raise ConfigError("attention.k must be >= 0, attention.hops >= 1, attention.tau in [0, 1)")
        if a.mode == "soft" and g.kind != "sum":
            raise ConfigError("soft attention pools by weighted average; use aggregation.kind = sum")
        for key in ("aggregation.heads", "aggregation.head_dim", "aggregation.rn_hidden",
                    "aggregation.rn_layers", "model.d", "model.embed_dim", "model.lstm_hidden",
                    "model.classifier_hidden", "model.image_size", "model.feature_channels",
                    "train.batch_size", "train.eval_every", "train.plateau_windows"):
            if self.get(key) < 1:
                raise ConfigError(f"{key} must be positive")
        if g.kind == "pairwise" and g.heads * g.head_dim > m.d:
            raise ConfigError("aggregation.heads * aggregation.head_dim must not exceed model.d")
        if m.alignment_depth < 0 or not 0 <= m.dropout < 1:
            raise ConfigError("model.alignment_depth must be >= 0 and model.dropout in [0, 1)")
        if t.lr < 0 or t.l2 < 0 or t.max_steps < 0 or t.checkpoint_every < 0:
            raise ConfigError("train.lr, train.l2, train.max_steps, train.checkpoint_every must be >= 0")
        return self

    def grid(self) -> tuple[int, int]:
        """Spatial size of the attended map for image inputs."""
        if self.model.encoder == "features":
            raise ConfigError("feature-map inputs carry their own grid")
        n = self.model.image_size
        for _, _, stride in ENCODER_LAYERS[self.model.encoder]:
            n = -(-n // stride)
        return n, n


def preset(name: str) -> RunConfig:
    """``desk``: 64x64 scenes, 4x4 grid. ``clevr``: 128x128 scenes, 8x8 grid, paper sizes."""
    cfg = RunConfig()
    if name == "desk":
        return cfg.validate()
    if name == "clevr":
        cfg.model.encoder = "clevr"
        cfg.model.image_size = 128
        cfg.model.d = 256
        cfg.model.embed_dim = 64
        cfg.model.lstm_hidden = 256
        cfg.model.classifier_hidden = 1024
        cfg.model.dropout = 0.5
        cfg.aggregation.rn_hidden = 256
        cfg.aggregation.head_dim = 128
        cfg.train.batch_size = 64
        return cfg.validate()
    raise ConfigError(f"unknown preset {name!r}")


def _split_key(key: str, line=None, column=None) -> tuple[str, str]:
    if key not in _KEYS:
        raise ConfigError(f"unknown key {key!r}", line, column)
    section, name = key.split(".", 1)
    return section, name


def _choice(key, value, options):
    if value not in options:
        raise ConfigError(f"{key} must be one of {', '.join(options)}; got {value!r}")


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(value, kind, key, line, column):
    if not isinstance(value, str):
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, kind):
            return value
        raise ConfigError(f"{key} expects {kind.__name__}, got {value!r}", line, column)
    text = value.strip()
    try:
        if kind is bool:
            if text.lower() not in ("true", "false"):
                raise ValueError
            return text.lower() == "true"
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key} expects {kind.__name__}, got {text!r}", line, column) from None
    return text


_KEYS = frozenset(RunConfig.keys())
