"""Run configuration: a flat plain-text ``key = value`` file.

Lines starting with ``#`` and blank lines are ignored. Booleans accept
true/false/yes/no/1/0, tuples are comma-separated, optional values accept
``none``. Precedence: built-in defaults < config file < command-line flags.
"""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .conformer import ConformerConfig
from .data import SyntheticConfig
from .ensemble import ABLATIONS, AblationFlags, EnsembleConfig, ExtractorConfig, TrainConfig
from .errors import ConfigError
from .pretraining import PretrainConfig


@dataclass
class RunConfig:
    seed: int = 0
    # encoder
    model_dim: int = 64
    num_heads: int = 4
    num_layers: int = 3
    ff_expansion: int = 4
    kernel_size: int = 7
    max_relative_distance: int = 64
    dropout: float = 0.1
    conv_norm: str = "layer"
    # extractor and pyramid heads
    level_channels: tuple[int, ...] = (32, 64)
    strides: tuple[int, ...] = (1, 2)
    extractor_kernel: int = 3
    embed_dim: int = 832
    apn_kernel: int = 3
    # ablation columns
    pretrained_conformer: bool = True
    cross_modal_attention: bool = True
    pyramids: bool = True
    # ensemble optimisation
    epochs: int = 40
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-3
    max_grad_norm: float | None = 5.0
    task_adaptive_epochs: int = 10   # only used when pretrained_conformer is on
    # pretraining
    sigma: float = 0.2
    pretrain_epochs: int = 40
    pretrain_lr: float = 3e-3
    pretrain_batch_size: int = 8
    pretrain_dropout: float = 0.0
    # decoding and scoring
    strategy: str = "mean"
    denominator: str = "reference"
    # synthetic data
    vocab_size: int = 10
    train_size: int = 160
    dev_size: int = 20
    test_size: int = 20
    min_len: int = 1
    max_len: int | None = None
    motif_frames: int = 6
    rest_frames: int = 2
    jitter: float = 0.01
    style: float = 0.15
    shared_fraction: float = 0.5

    def conformer(self, dropout: float | None = None) -> ConformerConfig:
        return ConformerConfig(model_dim=self.model_dim, num_heads=self.num_heads, num_layers=self.num_layers,
                               ff_expansion=self.ff_expansion, kernel_size=self.kernel_size,
                               max_relative_distance=self.max_relative_distance,
                               dropout=self.dropout if dropout is None else dropout, conv_norm=self.conv_norm)

    def extractor(self) -> ExtractorConfig:
        return ExtractorConfig(self.level_channels, self.strides, self.extractor_kernel, self.embed_dim)

    def ensemble(self, num_classes: int) -> EnsembleConfig:
        return EnsembleConfig(num_classes, self.conformer(), self.extractor(), apn_kernel=self.apn_kernel)

    def ablation(self) -> AblationFlags:
        return AblationFlags(self.pretrained_conformer, self.cross_modal_attention, self.pyramids)

    def train(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.lr, self.weight_decay, self.max_grad_norm, self.seed,
                           self.ablation(), self.task_adaptive_epochs)

    def pretrain(self) -> PretrainConfig:
        return PretrainConfig(self.conformer(self.pretrain_dropout), self.sigma, self.pretrain_epochs,
                              self.pretrain_batch_size, self.pretrain_lr, self.weight_decay, self.max_grad_norm,
                              self.seed)

    def synthetic(self) -> SyntheticConfig:
        return SyntheticConfig(vocab_size=self.vocab_size, train_size=self.train_size, dev_size=self.dev_size,
                               test_size=self.test_size, min_len=self.min_len, max_len=self.max_len,
                               motif_frames=self.motif_frames, rest_frames=self.rest_frames, jitter=self.jitter,
                               style=self.style, shared_fraction=self.shared_fraction,
                               downsample=self.extractor().downsample)

    def with_preset(self, name: str) -> "RunConfig":
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation preset {name!r}; choose from {', '.join(ABLATIONS)}")
        return dataclasses.replace(self, **dataclasses.asdict(ABLATIONS[name]))

    def to_text(self) -> str:
        return "".join(f"{f.name} = {format_value(getattr(self, f.name))}\n" for f in fields(self))


_HINTS = typing.get_type_hints(RunConfig)


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def parse_value(key: str, raw: str):
    if key not in _HINTS:
        raise ConfigError(f"unknown config key {key!r}")
    hint = _HINTS[key]
    text = raw.strip()
    args = typing.get_args(hint)
    if isinstance(hint, types.UnionType) or typing.get_origin(hint) is typing.Union:
        if text.lower() == "none":
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if typing.get_origin(hint) is tuple:
            return tuple(int(x) for x in text.split(",") if x.strip())
        return hint(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def read_config_text(text: str, origin: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        try:
            values[key] = parse_value(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{origin}:{lineno}: {exc}") from exc
    return values


def load_run_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file (if any), then non-None ``overrides``."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values.update(read_config_text(p.read_text(), str(p)))
    for k, v in (overrides or {}).items():
        if v is not None:
            if k not in _HINTS:
                raise ConfigError(f"unknown config key {k!r}")
            values[k] = v
    return RunConfig(**values)
