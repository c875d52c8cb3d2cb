"""Model and training configuration, plus the flat ``key = value`` config format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.  Defaults are the desk-scale toy configuration."""

    in_channels: int = 3
    base_channels: int = 16
    depths: tuple[int, ...] = (1, 1, 2, 1)
    heads: tuple[int, ...] = (2, 2, 4, 4)
    # 0 means "the full extent of that stage"
    stripe_widths: tuple[int, ...] = (1, 2, 2, 0)
    mlp_ratio: int = 2
    lepe: bool = True
    fuse_width: int = 0  # c_f; 0 -> base_channels
    local_channels: tuple[int, ...] = (16, 32, 64, 128)
    local_merge: str = "concat"
    se_reduction: int = 4
    working_width: int = 0  # 0 -> base_channels
    gf_filter: bool = True
    lf_filter: bool = True
    corr_fuse: bool = True
    corr_softmax_axis: str = "channel"
    decm: bool = True
    image_size: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    @property
    def c_f(self) -> int:
        return self.fuse_width or self.base_channels

    @property
    def width(self) -> int:
        return self.working_width or self.base_channels

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * 2 ** i for i in range(4))

    def validate(self) -> None:
        for name in ("depths", "heads", "stripe_widths", "local_channels"):
            if len(getattr(self, name)) != 4:
                raise ConfigError(f"{name} must have four entries")
        for c, h in zip(self.stage_channels, self.heads):
            if h < 2 or h % 2:
                raise ConfigError(f"head count {h} must be even (half horizontal, half vertical)")
            if c % h:
                raise ConfigError(f"stage width {c} not divisible by {h} heads")
        for c in self.local_channels:
            if c % self.se_reduction:
                raise ConfigError(f"SE reduction {self.se_reduction} does not divide {c}")
        if self.local_merge not in ("concat", "sum"):
            raise ConfigError(f"local_merge must be concat|sum, got {self.local_merge!r}")
        if self.corr_softmax_axis not in ("channel", "spatial"):
            raise ConfigError(f"corr_softmax_axis must be channel|spatial")
        stage_sizes = [self.image_size // 4 // 2 ** i for i in range(4)]
        for size, s in zip(stage_sizes, self.stripe_widths):
            eff = effective_stripe(s, max(size, 1))
            if size >= 1 and size % eff:
                raise ConfigError(f"stripe width {s} does not divide stage extent {size}")

    def digest(self) -> str:
        return config_digest(self)

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


def effective_stripe(s: int, extent: int) -> int:
    return extent if s <= 0 else min(s, extent)


FULL_SCALE = dict(base_channels=64, heads=(2, 4, 8, 16), stripe_widths=(1, 2, 6, 0),
                  local_channels=(64, 128, 256, 512), se_reduction=16, image_size=384,
                  depths=(1, 2, 21, 1), mlp_ratio=4)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 2
    epochs: int = 50
    seed: int = 0
    theta: tuple[float, ...] = (1.0, 0.5, 0.5, 1.0)
    omega: float = 1.0
    edge_loss: str = "weighted"
    iou_variant: str = "soft"
    precision: str = "single"
    augment: bool = False
    max_steps: int = 0  # 0 -> run all epochs
    checkpoint_every: int = 0  # steps; 0 -> per epoch only

    def __post_init__(self) -> None:
        if len(self.theta) != 4 or any(t < 0 for t in self.theta):
            raise ConfigError("theta must be four nonnegative weights")
        if self.omega <= 0:
            raise ConfigError("omega must be positive")
        if self.edge_loss not in ("weighted", "bce"):
            raise ConfigError("edge_loss must be weighted|bce")
        if self.iou_variant not in ("soft", "printed"):
            raise ConfigError("iou_variant must be soft|printed")
        if self.precision not in ("single", "double"):
            raise ConfigError("precision must be single|double")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def _canonical(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _canonical(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_canonical(v) for v in obj]
    return obj


def config_digest(cfg: ModelConfig) -> str:
    """SHA-256 over the architecture-defining fields (the init seed is excluded)."""
    data = _canonical(cfg)
    data.pop("seed", None)
    blob = json.dumps(data, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _coerce(raw: str, target_type: Any, key: str):
    raw = raw.strip()
    try:
        if target_type is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        if target_type is str:
            return raw
        if str(target_type).startswith("tuple[int"):
            return tuple(int(v) for v in raw.split(","))
        if str(target_type).startswith("tuple[float"):
            return tuple(float(v) for v in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    raise ConfigError(f"unsupported type for {key}")


def _field_types(cls) -> dict[str, Any]:
    import typing
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def parse_config_text(text: str) -> tuple[dict, dict]:
    """Split ``key = value`` lines into model and training overrides.

    Keys may be bare (``lr = 1e-3``) or prefixed (``model.base_channels = 8``,
    ``train.epochs = 3``).  Unknown keys raise :class:`ConfigError`.
    """
    model_types = _field_types(ModelConfig)
    train_types = _field_types(TrainConfig)
    model_kw: dict = {}
    train_kw: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, bare = key.rpartition(".")
        if section == "model" or (not section and bare in model_types and bare not in train_types):
            if bare not in model_types:
                raise ConfigError(f"line {lineno}: unknown model key {bare!r}")
            model_kw[bare] = _coerce(value, model_types[bare], bare)
        elif section == "train" or (not section and bare in train_types):
            if bare not in train_types:
                raise ConfigError(f"line {lineno}: unknown train key {bare!r}")
            train_kw[bare] = _coerce(value, train_types[bare], bare)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    return model_kw, train_kw


def load_config(path: Optional[Path]) -> tuple[ModelConfig, TrainConfig]:
    model_kw, train_kw = ({}, {}) if path is None else parse_config_text(Path(path).read_text())
    return ModelConfig(**model_kw), TrainConfig(**train_kw)


def format_config(model: ModelConfig, train: Optional[TrainConfig] = None) -> str:
    lines = []
    for section, obj in (("model", model), ("train", train)):
        if obj is None:
            continue
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{section}.{f.name} = {v}")
    return "\n".join(lines) + "\n"
