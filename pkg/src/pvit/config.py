"""Run configuration: one JSON document mirroring the stage configs.

Precedence: built-in defaults < config file < command-line overrides
(`--set a.b.c=value`, values parsed as JSON with plain-string fallback).
Unknown keys and type mismatches are rejected with the offending dotted key;
the resolved document is echoed to `resolved.json` in the output directory.
"""

from __future__ import annotations

import dataclasses
import json
import os
import types
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union, get_args, get_origin, get_type_hints

from .augment import CropParams
from .distill import HeadConfig
from .errors import ConfigError
from .finetune import FinetuneConfig
from .pretrain import PretrainConfig
from .synth import SynthConfig
from .vit import ViTConfig


@dataclass(frozen=True)
class EvalConfig:
    mode: str = "finetuned-neck"
    batch_size: int = 32
    knn_k: int = 5
    knn_db_split: str = "gallery"
    knn_test_split: str = "query"


@dataclass(frozen=True)
class VizConfig:
    layer: int = -1
    head_reduce: str = "mean"
    clusters: int = 8
    top_n: int = 20
    use_head: bool = True


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = ""  # empty -> $PERSONVIT_OUT or ./runs
    workers: int = 1
    dtype: str = "float32"
    synth: SynthConfig = field(default_factory=SynthConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    viz: VizConfig = field(default_factory=VizConfig)


def dataclass_to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: dataclass_to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [dataclass_to_dict(v) for v in obj]
    return obj


def _coerce(value, tp, path: str):
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object, got {type(value).__name__}")
        return dict_to_dataclass(tp, value, path)
    origin = get_origin(tp)
    if origin in (Union, types.UnionType):
        non_none = [a for a in get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, non_none[0], path)
    if origin is tuple:
        args = get_args(tp)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported config field type {tp!r}")


def dict_to_dataclass(cls, data: dict, path: str = ""):
    hints = get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            dotted = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown key {dotted!r}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            dotted = f"{path}.{f.name}" if path else f.name
            kwargs[f.name] = _coerce(data[f.name], hints[f.name], dotted)
    return cls(**kwargs)


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _set_dotted(d: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    cur = d
    for p in parts[:-1]:
        nxt = cur.get(p)
        if not isinstance(nxt, dict):
            nxt = cur[p] = {}
        cur = nxt
    cur[parts[-1]] = value


def parse_overrides(pairs: list[str]) -> dict:
    """['a.b=1', 'c=x'] -> nested dict; values are JSON with string fallback."""
    out: dict = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} must look like key.path=value")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_dotted(out, key.strip(), value)
    return out


def parse_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    merged = dataclass_to_dict(RunConfig())
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        try:
            file_cfg = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed JSON in {path}: {e}") from e
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        merged = _deep_merge(merged, file_cfg)
    if overrides:
        merged = _deep_merge(merged, parse_overrides(list(overrides)))
    run = dict_to_dataclass(RunConfig, merged)
    # the top-level dtype mode governs both training stages
    run = dataclasses.replace(
        run,
        pretrain=dataclasses.replace(run.pretrain, dtype=run.dtype),
        finetune=dataclasses.replace(run.finetune, dtype=run.dtype),
    )
    return run


def resolve_out_dir(run: RunConfig, cli_out: str | None, command: str) -> Path:
    if cli_out:
        return Path(cli_out)
    root = run.out_dir or os.environ.get("PERSONVIT_OUT", "runs")
    return Path(root) / command


def write_resolved(run: RunConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved.json"
    path.write_text(json.dumps(dataclass_to_dict(run), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
