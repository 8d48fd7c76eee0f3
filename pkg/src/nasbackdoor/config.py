"""Experiment configuration as flat ``section.key=value`` text.

Lines starting with ``#`` are comments.  Every key has a default and unknown
keys are rejected.  ``dump`` writes the fully-defaulted configuration in the
same format, so the effective config of a run can be reloaded verbatim.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields

from .data import SyntheticSpec
from .evosearch import SearchConfig
from .netbuilder import SkeletonConfig
from .ntkscore import ScoreConfig
from .trainer import TrainConfig
from .triggergen import GeneratorConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    kind: str = "synthetic"
    train_path: str = ""
    test_path: str = ""
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    workers: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    skel: SkeletonConfig = field(default_factory=SkeletonConfig)
    gen: GeneratorConfig = field(default_factory=GeneratorConfig)
    score: ScoreConfig = field(default_factory=ScoreConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    backdoor: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = field(default_factory=TrainConfig.finetune_defaults)


def _is_dc(obj) -> bool:
    return dataclasses.is_dataclass(obj) and not isinstance(obj, type)


def flatten(cfg, prefix: str = "") -> dict[str, object]:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        key = prefix + f.name
        if _is_dc(v):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _format_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(text: str, current):
    text = text.strip()
    if isinstance(current, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, tuple):
        return tuple(int(x) for x in text.split(",") if x.strip())
    return text


def dumps(cfg: ExperimentConfig) -> str:
    return "".join(f"{k}={_format_value(v)}\n" for k, v in flatten(cfg).items())


def _set(cfg, dotted: str, raw: str) -> None:
    parts = dotted.split(".")
    obj = cfg
    for p in parts[:-1]:
        if not hasattr(obj, p) or not _is_dc(getattr(obj, p)):
            raise ConfigError(f"unknown config key {dotted!r}")
        obj = getattr(obj, p)
    name = parts[-1]
    if name not in {f.name for f in fields(obj)} or _is_dc(getattr(obj, name)):
        raise ConfigError(f"unknown config key {dotted!r}")
    try:
        setattr(obj, name, _parse_value(raw, getattr(obj, name)))
    except ValueError as exc:
        raise ConfigError(f"bad value for {dotted}: {exc}") from None


def _revalidate(obj) -> None:
    for f in fields(obj):
        v = getattr(obj, f.name)
        if _is_dc(v):
            _revalidate(v)
    post = getattr(obj, "__post_init__", None)
    if post is not None:
        try:
            post()
        except ValueError as exc:
            raise ConfigError(f"{type(obj).__name__}: {exc}") from None


def parse_lines(lines: typing.Iterable[str], cfg: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig() if cfg is None else cfg
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        _set(cfg, key.strip(), val)
    _revalidate(cfg)
    return cfg


def loads(text: str) -> ExperimentConfig:
    return parse_lines(text.splitlines())


def load(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_lines(fh)


def dump(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(cfg))
