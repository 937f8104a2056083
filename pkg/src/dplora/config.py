"""Run configuration: INI file + flag overrides + defaults.

Grammar: standard INI sections ``[run] [data] [model] [federation] [privacy]``
holding ``key = value`` lines.  Keys are unique across sections, so the file
is effectively flat; each key has a command-line flag of the same name with
underscores turned into dashes (``learning_rate`` -> ``--learning-rate``).
Precedence is flags, then file, then defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError


def _opt(section: str, default: Any = None, kind: type | str = float, choices: tuple | None = None):
    return field(default=default, metadata={"section": section, "kind": kind, "choices": choices})


# Defaults applied after file and flags; sigma only when no target epsilon is given.
DEFAULT_SIGMA = 2.0


@dataclass(frozen=True)
class TrainConfig:
    # run
    seed: int = _opt("run", 0, int)
    out_dir: str | None = _opt("run", None, str)
    threads: int = _opt("run", 1, int)
    dtype: str = _opt("run", "float64", str, ("float64", "float32"))
    bytes_per_param: int = _opt("run", 8, int, (4, 8))
    baseline: bool = _opt("run", False, bool)
    # data
    n_samples: int = _opt("data", 2000, int)
    margin: float = _opt("data", 8.0)
    cluster_std: float = _opt("data", 1.0)
    partition: str = _opt("data", "even", str, ("even", "dirichlet"))
    dirichlet_alpha: float = _opt("data", 0.5)
    weights: tuple[float, ...] | None = _opt("data", None, "floats")
    # model
    layers: int = _opt("model", 2, int)
    width: int = _opt("model", 1024, int)
    rank: int = _opt("model", 512, int)
    classes: int = _opt("model", 3, int)
    lora_scale: float = _opt("model", 1.0)
    # federation
    nodes: int = _opt("federation", 5, int)
    rounds: int = _opt("federation", 50, int)
    batch: int = _opt("federation", 8, int)
    learning_rate: float = _opt("federation", 5e-4)
    local_steps: int = _opt("federation", 1, int)
    # privacy
    clip: float = _opt("privacy", 10.0)
    sigma: float | None = _opt("privacy", None)
    epsilon: float | None = _opt("privacy", None)
    delta: float = _opt("privacy", 1e-5)
    accountant: str = _opt("privacy", "moments", str, ("moments", "sequential"))
    calibration: str = _opt("privacy", "numeric", str, ("theorem", "proof", "numeric"))
    c1: float = _opt("privacy", 1.0)
    c2: float = _opt("privacy", 1.0)
    clip_mode: str = _opt("privacy", "per_matrix", str, ("per_matrix", "global"))
    noise_target: str = _opt("privacy", "gradient", str, ("gradient", "weights"))

    def __post_init__(self):
        _validate(self)

    @property
    def np_dtype(self):
        import numpy as np

        return np.dtype(self.dtype)


FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
SECTIONS = ("run", "data", "model", "federation", "privacy")


def _coerce(key: str, raw: Any) -> Any:
    meta = FIELDS[key].metadata
    kind = meta["kind"]
    if raw is None or (isinstance(raw, str) and raw.strip().lower() in ("", "none")):
        return None
    try:
        if kind == "floats":
            if isinstance(raw, str):
                value = tuple(float(v) for v in raw.replace(",", " ").split())
            else:
                value = tuple(float(v) for v in raw)
        elif kind is bool:
            if isinstance(raw, bool):
                value = raw
            elif str(raw).strip().lower() in ("1", "true", "yes", "on"):
                value = True
            elif str(raw).strip().lower() in ("0", "false", "no", "off"):
                value = False
            else:
                raise ValueError(raw)
        elif kind is int:
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            value = int(str(raw).strip()) if isinstance(raw, str) else int(raw)
        elif kind is float:
            value = float(raw)
        else:
            value = str(raw).strip()
    except (TypeError, ValueError):
        name = kind if isinstance(kind, str) else kind.__name__
        raise ConfigError(key, f"expected {name}, got {raw!r}") from None
    choices = meta["choices"]
    if choices is not None and value is not None and value not in choices:
        raise ConfigError(key, f"must be one of {', '.join(map(str, choices))}; got {value!r}")
    return value


def _validate(cfg: TrainConfig) -> None:
    positive_ints = ("threads", "n_samples", "layers", "width", "rank", "classes", "nodes", "rounds", "batch", "local_steps")
    for key in positive_ints:
        if getattr(cfg, key) < 1:
            raise ConfigError(key, f"must be a positive integer, got {getattr(cfg, key)}")
    if not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed", "must be a 64-bit unsigned integer")
    for key in ("cluster_std", "dirichlet_alpha", "lora_scale", "clip", "c1", "c2"):
        if not getattr(cfg, key) > 0:
            raise ConfigError(key, f"must be positive, got {getattr(cfg, key)}")
    if not cfg.margin >= 0:
        raise ConfigError("margin", "must be non-negative")
    if not cfg.learning_rate >= 0 or not math.isfinite(cfg.learning_rate):
        raise ConfigError("learning_rate", "must be finite and non-negative")
    if not 0 < cfg.delta < 1:
        raise ConfigError("delta", f"must lie in (0, 1), got {cfg.delta}")
    if cfg.sigma is not None and cfg.epsilon is not None:
        raise ConfigError("sigma", "set either sigma or a target epsilon, not both")
    if cfg.sigma is None and cfg.epsilon is None:
        raise ConfigError("sigma", "one of sigma or epsilon must be set")
    if cfg.sigma is not None and not (cfg.sigma >= 0 and math.isfinite(cfg.sigma)):
        raise ConfigError("sigma", f"must be finite and non-negative, got {cfg.sigma}")
    if cfg.epsilon is not None and not cfg.epsilon > 0:
        raise ConfigError("epsilon", f"must be positive, got {cfg.epsilon}")
    if cfg.rank > cfg.width:
        raise ConfigError("rank", f"must not exceed width {cfg.width}, got {cfg.rank}")
    if cfg.classes > cfg.width:
        raise ConfigError("classes", f"must not exceed width {cfg.width}")
    if cfg.nodes * cfg.batch > cfg.n_samples:
        raise ConfigError("n_samples", f"must be at least nodes * batch = {cfg.nodes * cfg.batch}")
    if cfg.sigma is not None and cfg.sigma > 0 and not math.isfinite(cfg.clip):
        raise ConfigError("clip", "noise needs a finite clipping bound")
    if cfg.weights is not None:
        if len(cfg.weights) != cfg.nodes:
            raise ConfigError("weights", f"needs {cfg.nodes} entries, got {len(cfg.weights)}")
        if any(w < 0 for w in cfg.weights) or abs(math.fsum(cfg.weights) - 1.0) > 1e-12:
            raise ConfigError("weights", "must be non-negative and sum to 1")


def parse_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> TrainConfig:
    """Resolve a config from an optional INI file and flag overrides.

    ``overrides`` maps keys to raw values; ``None`` values mean "flag not given".
    """
    values: dict[str, Any] = {}
    if path is not None:
        values.update(read_ini(Path(path).read_text()))
    for key, raw in (overrides or {}).items():
        if raw is None:
            continue
        if key not in FIELDS:
            raise ConfigError(key, "unknown key")
        values[key] = _coerce(key, raw)
    if values.get("sigma") is None and values.get("epsilon") is None:
        values["sigma"] = DEFAULT_SIGMA
    try:
        return TrainConfig(**values)
    except TypeError as exc:  # pragma: no cover - keys are pre-validated
        raise ConfigError("config", str(exc)) from None


def read_ini(text: str) -> dict[str, Any]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep keys case-sensitive
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("config", f"unreadable config file: {exc}") from None
    values: dict[str, Any] = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(section, f"unknown section (expected one of {', '.join(SECTIONS)})")
        for key, raw in parser.items(section):
            if key not in FIELDS:
                raise ConfigError(key, "unknown key")
            if FIELDS[key].metadata["section"] != section:
                raise ConfigError(key, f"belongs in section [{FIELDS[key].metadata['section']}]")
            values[key] = _coerce(key, raw)
    return values


def to_ini(cfg: TrainConfig) -> str:
    """Serialize every key so the file alone reproduces the run."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section in SECTIONS:
        parser.add_section(section)
    for name, f in FIELDS.items():
        value = getattr(cfg, name)
        if value is None:
            text = "none"
        elif isinstance(value, tuple):
            text = ", ".join(repr(v) for v in value)
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        parser.set(f.metadata["section"], name, text)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def flag_name(key: str) -> str:
    return "--" + key.replace("_", "-")
