"""Run configuration: a flat ``key = value`` file plus ``--set`` overrides."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Iterable, Mapping

from ..segnet import ConfigError

VARIANTS = ("ours", "no_dict", "no_split", "with_adv", "only_ssl", "ssl_adv")

# Row labels of the ablation table, in report order.
VARIANT_LABELS = {
    "ours": "Ours",
    "no_dict": "w/o Dictionary",
    "no_split": "w/o Class-wise Split",
    "with_adv": "with Adversarial",
    "only_ssl": "only SSL",
    "ssl_adv": "SSL with Adversarial",
}


@dataclass
class RunConfig:
    stage: int = 1
    variant: str = "ours"
    t_cos: float = 0.6
    dict_size: int = 512
    lambda_cos: float = 0.01
    lambda_adv: float = 0.001
    # pixel-summed losses need a far smaller step than per-pixel means
    lr: float = 1e-5
    weight_decay: float = 5e-4
    momentum: float = 0.9
    poly_power: float = 0.9
    max_iter: int = 5000
    eval_every: int = 250
    seed: int = 0
    multi_layer: bool = False
    enqueue_first: bool = True
    feature_dim: int = 32
    disc_lr: float = 1e-4
    disc_channels: str = "64,128,256,512,1"
    data: str = ""
    out: str = ""
    init_ckpt: str = ""
    pseudo_dir: str = ""
    resume: str = ""
    explicit: frozenset = field(default=frozenset(), compare=False, repr=False)

    @property
    def uses_cos(self) -> bool:
        return self.lambda_cos > 0 and self.variant not in ("only_ssl", "ssl_adv")

    @property
    def uses_dictionary(self) -> bool:
        return self.variant not in ("no_dict", "no_split")

    @property
    def uses_split(self) -> bool:
        return self.variant != "no_split"

    @property
    def uses_adv(self) -> bool:
        return self.variant in ("with_adv", "ssl_adv")

    def disc_channel_tuple(self) -> tuple[int, ...]:
        return tuple(int(c) for c in self.disc_channels.split(","))

    def validate(self) -> "RunConfig":
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if not -1.0 < self.t_cos < 1.0:
            raise ConfigError(f"t_cos must lie in (-1, 1), got {self.t_cos}")
        if self.dict_size < 1:
            raise ConfigError(f"dict_size must be >= 1, got {self.dict_size}")
        for name in ("lambda_cos", "lambda_adv", "lr", "weight_decay", "momentum", "disc_lr"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.max_iter < 1 or self.eval_every < 1:
            raise ConfigError("max_iter and eval_every must be >= 1")
        if self.variant == "no_dict" and "dict_size" in self.explicit:
            raise ConfigError("variant no_dict uses no dictionary; do not set dict_size")
        if self.variant in ("only_ssl", "ssl_adv") and self.stage != 2:
            raise ConfigError(f"variant {self.variant} trains on pseudo-labels and needs stage 2")
        if self.multi_layer and not self.uses_split:
            raise ConfigError("multi_layer is defined for the class-wise split only")
        return self

    def with_overrides(self, overrides: Mapping[str, str]) -> "RunConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "explicit"}
        for key, raw in overrides.items():
            values[key] = _coerce(key, raw)
        cfg = RunConfig(**values, explicit=self.explicit | frozenset(overrides))
        if cfg.variant in ("only_ssl", "ssl_adv"):
            cfg.lambda_cos = 0.0
        return cfg

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "explicit":
                continue
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw):
    if key not in _FIELD_TYPES or key == "explicit":
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELD_TYPES[key]
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_pairs(lines: Iterable[str], origin: str = "<config>") -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{origin}:{lineno}: expected key = value, got {line!r}")
        pairs[key.strip()] = value.strip()
    return pairs


def parse_set_args(items: Iterable[str]) -> dict[str, str]:
    return parse_pairs(items, origin="--set")


def load_config(path: str | None = None, overrides: Mapping[str, str] | None = None) -> RunConfig:
    pairs: dict[str, str] = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            pairs.update(parse_pairs(fh, origin=path))
    pairs.update(overrides or {})
    return RunConfig().with_overrides(pairs).validate()


def replace(cfg: RunConfig, **changes) -> RunConfig:
    """Programmatic override that also records the keys as explicitly set."""
    return cfg.with_overrides({k: v for k, v in changes.items()})


__all__ = [
    "ConfigError",
    "RunConfig",
    "VARIANTS",
    "VARIANT_LABELS",
    "load_config",
    "parse_pairs",
    "parse_set_args",
    "replace",
]
