"""Run configuration: a plain-text ``key = value`` file plus overrides.

Syntax: one ``key = value`` per line, ``#`` starts a comment, blank lines are
ignored.  Lists are comma separated (brackets optional); pairs inside a list
use ``a:b``; booleans are ``true``/``false``.  Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .model import NetworkConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        where = ""
        if source:
            where = f"{source}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)


@dataclass
class RunConfig:
    seed: int = 0
    run_dir: str = "runs/default"

    # network
    input_bands: int = 2
    num_classes: int = 4
    kernel_size: int = 3
    low_dilations: tuple[int, ...] = (1, 2, 3, 5, 7, 9)
    low_growth: int = 24
    low_merge: int = 36
    high_dilations: tuple[int, ...] = (1, 2, 3, 4)
    high_growth: int = 64
    high_merge: int = 128
    post_dilations: tuple[int, ...] = (1,)
    post_growth: int = 64
    post_merge: int = 36
    backbone_width: int = 64
    backbone_blocks: tuple[int, ...] = (3, 4, 6)
    binary_head: bool = True
    presence_head: bool = True

    # losses
    loss_pairing: str = "bce-presence"
    class_balancing: bool = True
    class_frequencies: tuple[float, ...] = ()

    # optimizer and schedule
    lr: float = 0.00012
    lr_milestones: tuple[int, ...] = (5, 15, 25, 65, 100)
    lr_factor: float = 0.5
    bias_lr_mult: float = 2.0
    weight_decay: float = 0.00005
    decoupled_decay: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    # data and training loop
    train_rasters: tuple[str, ...] = ()
    val_rasters: tuple[str, ...] = ()
    patch_size: int = 256
    patches_per_epoch: int = 5000
    batch_size: int = 4
    epochs: int = 120
    max_iterations: int = 0

    # synthetic scenes
    synth_dir: str = "data/synth"
    synth_count: int = 2
    synth_height: int = 1024
    synth_width: int = 1024
    synth_roads: tuple[int, ...] = (3, 3, 4)
    synth_width_ranges: tuple[tuple[float, float], ...] = ((11.0, 15.0), (7.0, 9.0), (3.0, 5.0))
    synth_noise: float = 0.05

    # inference and evaluation
    window: int = 256
    overlap: float = 0.6
    tta: bool = True
    checkpoint: str = ""
    scene: str = ""
    pred: str = ""
    ref: str = ""

    # diagnostics
    gradcheck_seeds: int = 20
    summary_input: int = 256

    def network(self) -> NetworkConfig:
        names = {f.name for f in dataclasses.fields(NetworkConfig)}
        return NetworkConfig(**{k: getattr(self, k) for k in names})

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        hints = typing.get_type_hints(RunConfig)
        return "".join(f"{f.name} = {format_value(getattr(self, f.name), hints[f.name])}\n"
                       for f in dataclasses.fields(self))


def _parse_scalar(text: str, typ):
    text = text.strip()
    if typ is bool:
        low = text.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"expected true/false, got {text!r}")
    if typ is int:
        return int(text)
    if typ is float:
        return float(text)
    if typ is str:
        return text
    raise TypeError(f"unsupported config type {typ}")


def parse_value(text: str, typ):
    origin = typing.get_origin(typ)
    if origin is tuple:
        inner = typing.get_args(typ)[0]
        body = text.strip()
        if body.startswith("[") and body.endswith("]"):
            body = body[1:-1]
        items = [t for t in (s.strip() for s in body.split(",")) if t]
        if typing.get_origin(inner) is tuple:
            sub = typing.get_args(inner)[0]
            return tuple(tuple(_parse_scalar(p, sub) for p in item.split(":")) for item in items)
        return tuple(_parse_scalar(item, inner) for item in items)
    return _parse_scalar(text, typ)


def format_value(value, typ) -> str:
    if typing.get_origin(typ) is tuple:
        parts = []
        for v in value:
            parts.append(":".join(repr(x) for x in v) if isinstance(v, tuple) else _fmt(v))
        return ", ".join(parts)
    return _fmt(value)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def apply_setting(cfg: RunConfig, key: str, text: str, line: int | None = None,
                  source: str | None = None) -> RunConfig:
    hints = typing.get_type_hints(RunConfig)
    if key not in hints:
        raise ConfigError(f"unknown key {key!r}", line, source)
    try:
        value = parse_value(text, hints[key])
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}", line, source) from None
    return dataclasses.replace(cfg, **{key: value})


def parse_config(text: str, base: RunConfig | None = None, source: str | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno, source)
        key, value = (s.strip() for s in line.split("=", 1))
        cfg = apply_setting(cfg, key, value, lineno, source)
    return cfg


def load_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        cfg = parse_config(p.read_text(), cfg, str(p))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, value = item.split("=", 1)
        cfg = apply_setting(cfg, key.strip(), value.strip(), source="--set")
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    return cfg
