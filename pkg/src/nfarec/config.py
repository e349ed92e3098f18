"""Run configuration: defaults, per-dataset presets, and the ``key = value`` file format.

Precedence when assembling a config is flags > file > preset > defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


# loss weights (beta1, beta2, delta, delta2) and min-interaction counts per dataset
PRESETS = {
    "yelp2023": {"beta1": 0.12, "beta2": 1.49, "delta": 1.2, "delta2": 1e-3, "min_interactions": 15},
    "movielens": {"beta1": 1.47, "beta2": 3.99, "delta": 1.2, "delta2": 0.5},
    "recipes": {"beta1": 0.12, "beta2": 3.81, "delta": 1.0, "delta2": 1e-5, "min_interactions": 10},
    "books": {"beta1": 0.25, "beta2": 3.53, "delta": 1.2, "delta2": 1e-5, "min_interactions": 25},
    "beauty": {"beta1": 0.62, "beta2": 3.74, "delta": 1.2, "delta2": 1e-3, "min_interactions": 5},
}


@dataclass
class Config:
    # data
    columns: str = "user,item,rating,timestamp"
    delimiter: str = ","
    rating_min: float = 1.0
    rating_max: float = 5.0
    threshold: float = 4.0
    min_interactions: int = 1
    split: str = "0.7:0.1:0.2"
    self_loops: bool = True
    lenient: bool = False
    # model
    d_model: int = 64
    seq_layers: int = 1
    hgc_layers: int = 1
    order: int = 2
    beta1: float = 1.0
    beta2: float = 3.0
    delta: float = 1.2
    delta2: float = 1e-3
    n_mci: int = 20
    max_seq_len: int = 50
    target_fraction: float = 0.2
    attention_only: bool = False
    pooling: str = "layers"
    pool_window: int = 3
    time_encoding: bool = False
    intensity_hidden: int = 0
    literal_hgc: bool = False
    no_unlabelled_loss: bool = False
    # ablations
    no_seq: bool = False
    no_gra1: bool = False
    no_gra2: bool = False
    no_masking: bool = False
    # training
    lr: float = 1e-3
    epochs: int = 50
    batch_users: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    threads: int = 0
    # evaluation
    include_seen: bool = False
    positive_only: bool = False
    preset: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("beta1", "beta2", "delta", "delta2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.n_mci < 1:
            raise ConfigError(f"n_mci must be >= 1, got {self.n_mci}")
        if self.order < 1:
            raise ConfigError(f"order must be >= 1, got {self.order}")
        if self.pooling not in ("layers", "window"):
            raise ConfigError(f"pooling must be 'layers' or 'window', got {self.pooling!r}")
        if self.preset and self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {', '.join(PRESETS)}")
        self.split_ratios  # noqa: B018 - parses

    @property
    def split_ratios(self) -> tuple:
        try:
            ratios = tuple(float(x) for x in self.split.split(":"))
        except ValueError:
            raise ConfigError(f"bad split {self.split!r}") from None
        if len(ratios) != 3:
            raise ConfigError(f"split needs three ratios, got {self.split!r}")
        return ratios

    @property
    def column_tuple(self) -> tuple:
        return tuple(c.strip() for c in self.columns.split(","))

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def serialize(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                text = "true" if v else "false"
            elif isinstance(v, float):
                text = repr(v)
            elif isinstance(v, str):
                text = v.encode("unicode_escape").decode("ascii")
            else:
                text = str(v)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str, base: "Config | None" = None) -> "Config":
        values = parse_pairs(text)
        if "preset" in values and values["preset"]:
            base = from_preset(values["preset"], base)
        return (base or cls()).replace(**values)

    @classmethod
    def load(cls, path, base: "Config | None" = None) -> "Config":
        return cls.parse(Path(path).read_text(encoding="utf-8"), base)


_TYPES = {f.name: f.type for f in fields(Config)}


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    if kind in ("bool", bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if kind in ("int", int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if kind in ("float", float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    return raw.encode("ascii", "backslashreplace").decode("unicode_escape")


def parse_pairs(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        out[key] = _coerce(key, raw)
    return out


def from_preset(name: str, base: Config | None = None) -> Config:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return (base or Config()).replace(preset=name, **PRESETS[name])
