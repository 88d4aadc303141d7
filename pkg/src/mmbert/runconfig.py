"""Flat ``key = value`` run-configuration files.

One assignment per line; ``#`` starts a comment. Values are coerced by
the declared field type of whichever config dataclass owns the key, so
``stage0 = true`` becomes a bool and ``modalities = text,speech`` a
tuple. A key owned by several groups (``vocab_size`` lives in both the
corpus and the model config) is applied to each of them.
"""

from __future__ import annotations

import dataclasses

from .corpus import CorpusConfig
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def parse_assignments(text: str) -> dict[str, str]:
    """Raw key→string map from config-file text."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if not key or not value:
            raise ConfigError(f"line {lineno}: empty key or value")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(raw: str, annotation: str, key: str):
    ann = annotation.replace(" ", "")
    optional = "|None" in ann or ann.startswith("Optional[")
    base = ann.replace("|None", "").replace("Optional[", "").rstrip("]")
    if optional and raw.lower() in ("none", "null"):
        return None
    try:
        if base == "int":
            return int(raw)
        if base == "float":
            return float(raw)
        if base == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if base.startswith("tuple[str"):
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        if base.startswith("tuple[int"):
            return tuple(int(p) for p in raw.split(",") if p.strip())
        if base == "str":
            return raw
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {base} for key {key!r}") from None
    raise ConfigError(f"unsupported config field type {annotation!r} for {key!r}")


def _field_types(cls) -> dict[str, str]:
    return {f.name: (f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type)))
            for f in dataclasses.fields(cls)}


def build_configs(assignments: dict[str, str],
                  ) -> tuple[CorpusConfig, ModelConfig, TrainConfig]:
    """Instantiate the three config groups from a flat key map."""
    groups = ((CorpusConfig, {}), (ModelConfig, {}), (TrainConfig, {}))
    types = [(_field_types(cls), kw) for cls, kw in groups]
    for key, raw in assignments.items():
        owners = [i for i, (t, _) in enumerate(types) if key in t]
        if not owners:
            raise ConfigError(f"unknown config key {key!r}")
        for i in owners:
            types[i][1][key] = _coerce(raw, types[i][0][key], key)
    return (CorpusConfig(**types[0][1]), ModelConfig(**types[1][1]),
            TrainConfig(**types[2][1]))


def load_run_config(path) -> tuple[CorpusConfig, ModelConfig, TrainConfig]:
    with open(path, "r", encoding="utf-8") as fh:
        return build_configs(parse_assignments(fh.read()))


def config_as_dict(corpus: CorpusConfig, model: ModelConfig,
                   train: TrainConfig) -> dict:
    """Flat JSON-friendly view, for embedding into checkpoints."""
    out: dict = {}
    for obj in (corpus, model, train):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
    return out


def configs_from_dict(flat: dict) -> tuple[CorpusConfig, ModelConfig, TrainConfig]:
    """Rebuild the three config groups from a ``config_as_dict`` view."""
    built = []
    for cls in (CorpusConfig, ModelConfig, TrainConfig):
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in flat:
                continue
            value = flat[f.name]
            if isinstance(value, list):
                value = tuple(value)
            kwargs[f.name] = value
        built.append(cls(**kwargs))
    return tuple(built)
