"""Run configuration: one JSON document, validated to full depth before any work starts."""
from __future__ import annotations

import dataclasses
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import Stage1Config
from .errors import ConfigError
from .fusion import Stage2Config
from .phantom import PhantomConfig

THREADS_ENV = "ICH_THREADS"


@dataclass(frozen=True)
class SynthConfig:
    n_studies: int = 40
    fractions: tuple[float, ...] = (0.8, 0.2)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)

    def __post_init__(self):
        if self.n_studies < len(self.fractions):
            raise ConfigError(f"synth.n_studies must be >= number of splits, got {self.n_studies}")
        if any(f < 0 for f in self.fractions) or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"synth.fractions must be non-negative and sum to 1, got {self.fractions}")


@dataclass(frozen=True)
class RunConfig:
    seed: int | None = None
    deterministic: bool = True
    data: str | None = None  # training manifest; the CLI --data flag takes precedence
    val_data: str | None = None  # optional manifest for best-epoch selection in stage 1
    out_dir: str | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)

    def __post_init__(self):
        if self.deterministic and self.seed is None:
            raise ConfigError("seed is required when deterministic is true")
        if self.seed is not None and self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def check_paths(self) -> None:
        for name in ("data", "val_data"):
            p = getattr(self, name)
            if p is not None and not Path(p).exists():
                raise ConfigError(f"{name}: path {p} does not exist")


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        errors = []
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _coerce(arg, value, path)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[0] if len(errors) == 1 else f"{path}: no accepted type matches {value!r}")
    if dataclasses.is_dataclass(tp):
        return build(tp, value, path)
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise TypeError(f"{path}: unsupported config field type {tp!r}")


def build(cls, data, path: str = "", base=None):
    """Instantiate dataclass ``cls`` from parsed JSON, naming the offending field on any error.

    Missing fields keep the defaults of ``base`` when given, else the class defaults.
    """
    where = path or cls.__name__
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(path + '.' + u if path else u for u in unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        sub = f"{path}.{f.name}" if path else f.name
        value = data[f.name]
        if dataclasses.is_dataclass(hints[f.name]) and f.default_factory is not dataclasses.MISSING:
            # partial sections layer over the field's own default, not the bare class defaults
            kwargs[f.name] = build(hints[f.name], value, sub, base=f.default_factory())
        else:
            kwargs[f.name] = _coerce(hints[f.name], value, sub)
    try:
        return dataclasses.replace(base, **kwargs) if base is not None else cls(**kwargs)
    except ConfigError as exc:
        msg, leaf = str(exc), path.rsplit(".", 1)[-1]
        if not path:
            raise
        if msg.startswith(leaf + "."):
            raise ConfigError(path + msg[len(leaf) :]) from exc
        raise ConfigError(f"{path}: {msg}") from exc


def load_run_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return build(RunConfig, doc)


def dump_run_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n"


def worker_count(cfg: RunConfig, default: int = 1) -> int:
    """Threads allowed for per-study work: ICH_THREADS, forced to 1 in deterministic mode."""
    if cfg.deterministic:
        return 1
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return default
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {n}")
    return n
