"""INI experiment configuration.

Sections map onto the component config dataclasses; every key must name a
field, so typos fail loudly instead of silently running the default.

    [experiment]   seed, mode, checkpoint, streams, out, seeds, arms
    [stream]       StreamConfig
    [pretrain]     PretrainConfig
    [engine]       EngineConfig scalars
    [weights]      LossWeights
    [two_stage]    TwoStageConfig
    [confidence]   ConfidenceRule
    [weak_aug] / [strong_aug]   AugmentSpec
    [switches]     component switches applied to ``--mode full``
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ..engine import AugmentSpec, EngineConfig, LossWeights, PipelineMode, TwoStageConfig
from ..selection import ConfidenceRule
from ..streamgen import StreamConfig
from .pretrain import PretrainConfig


class ConfigError(ValueError):
    """Bad configuration; the CLI maps it to a usage error."""


DEFAULT_ARMS = (
    "noadapt", "single", "pervideo", "+aggregation", "+local_aug", "+two_stage", "full",
    "pl_weak", "pl_strong", "samp_uniform", "samp_weight", "samp_balanced",
    "thr10_on", "thr30_on", "thr10_off", "thr15_off", "thr30_off",
)


@dataclass
class ExperimentConfig:
    seed: int = 22
    mode: str = "full"
    checkpoint: str = ""  # empty: <out>/model.ckpt
    streams: str = ""     # empty: <out>/streams.txt
    out: str = "out"
    seeds: tuple[int, ...] = (22, 23, 24, 25, 26)
    arms: tuple[str, ...] = DEFAULT_ARMS
    stream: StreamConfig = field(default_factory=StreamConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)
    switches: dict = field(default_factory=dict)

    def pipeline_mode(self, kind: str | None = None) -> PipelineMode:
        kind = kind or self.mode
        return PipelineMode.preset(kind, **(self.switches if kind == "full" else {}))


_SECTIONS = ("experiment", "stream", "pretrain", "engine", "weights", "two_stage", "confidence",
             "weak_aug", "strong_aug", "switches")
_TOP_KEYS = ("seed", "mode", "checkpoint", "streams", "out", "seeds", "arms")
_SWITCH_TYPES = {"aggregation": bool, "local_aug": bool, "two_stage": bool, "pseudo_label": str, "sampling": str}


def _coerce(text: str, default, where: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(text)
            return configparser.ConfigParser.BOOLEAN_STATES[low]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            elem = type(default[0]) if default else str
            parts = [p.strip() for p in text.split(",") if p.strip()]
            return tuple(_coerce(p, elem(), where) for p in parts)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def _apply(obj, items, section: str, skip=()):
    """Return ``obj`` with fields from ``items`` replaced; unknown keys raise."""
    names = {f.name for f in fields(obj)} - set(skip)
    updates = {}
    for key, text in items:
        if key not in names:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        updates[key] = _coerce(text, getattr(obj, key), f"[{section}] {key}")
    try:
        return replace(obj, **updates)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Parse an INI file (optional) and apply CLI overrides (``None`` values ignored)."""
    cfg = ExperimentConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
        cp.optionxform = str
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        cfg = _from_parser(cp, cfg)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown override {key!r}")
        setattr(cfg, key, value)
    if cfg.mode not in ("single", "pervideo", "full"):
        raise ConfigError(f"unknown mode {cfg.mode!r}")
    try:
        cfg.pipeline_mode("full")
    except ValueError as exc:
        raise ConfigError(f"[switches] {exc}") from None
    return cfg


def _from_parser(cp: configparser.ConfigParser, cfg: ExperimentConfig) -> ExperimentConfig:
    eng = cfg.engine
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
    get = lambda s: list(cp.items(s)) if cp.has_section(s) else []

    for key, text in get("experiment"):
        if key not in _TOP_KEYS:
            raise ConfigError(f"[experiment] unknown key {key!r}")
        setattr(cfg, key, _coerce(text, getattr(cfg, key), f"[experiment] {key}"))
    cfg.stream = _apply(cfg.stream, get("stream"), "stream", skip=("seed",))
    cfg.pretrain = _apply(cfg.pretrain, get("pretrain"), "pretrain", skip=("seed",))
    eng = replace(
        _apply(eng, get("engine"), "engine",
               skip=("seed", "weights", "two_stage", "rule", "weak_aug", "strong_aug")),
        weights=_apply(LossWeights(), get("weights"), "weights"),
        two_stage=_apply(TwoStageConfig(), get("two_stage"), "two_stage"),
        rule=_apply(ConfidenceRule(), get("confidence"), "confidence"),
        weak_aug=_apply(AugmentSpec("weak"), get("weak_aug"), "weak_aug", skip=("kind",)),
        strong_aug=_apply(AugmentSpec("strong"), get("strong_aug"), "strong_aug", skip=("kind",)),
    )
    cfg.engine = eng
    for key, text in get("switches"):
        if key not in _SWITCH_TYPES:
            raise ConfigError(f"[switches] unknown key {key!r}")
        default = False if _SWITCH_TYPES[key] is bool else ""
        cfg.switches[key] = _coerce(text, default, f"[switches] {key}")
    return cfg


def seeded(cfg: ExperimentConfig, seed: int | None = None):
    """Component configs carrying the experiment seed."""
    seed = cfg.seed if seed is None else seed
    return (replace(cfg.stream, seed=seed), replace(cfg.pretrain, seed=seed), replace(cfg.engine, seed=seed))


def dump_config(cfg: ExperimentConfig) -> str:
    """INI text that reloads to an equal config (used for run records)."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str

    def fmt(v):
        if isinstance(v, tuple):
            return ", ".join(str(x) for x in v)
        return str(v)

    cp["experiment"] = {k: fmt(getattr(cfg, k)) for k in _TOP_KEYS}
    cp["stream"] = {f.name: fmt(getattr(cfg.stream, f.name)) for f in fields(cfg.stream) if f.name != "seed"}
    cp["pretrain"] = {f.name: fmt(getattr(cfg.pretrain, f.name)) for f in fields(cfg.pretrain) if f.name != "seed"}
    nested = ("seed", "weights", "two_stage", "rule", "weak_aug", "strong_aug")
    cp["engine"] = {f.name: fmt(getattr(cfg.engine, f.name)) for f in fields(cfg.engine) if f.name not in nested}
    for sec, obj in (("weights", cfg.engine.weights), ("two_stage", cfg.engine.two_stage),
                     ("confidence", cfg.engine.rule)):
        cp[sec] = {f.name: fmt(getattr(obj, f.name)) for f in fields(obj)}
    for sec, obj in (("weak_aug", cfg.engine.weak_aug), ("strong_aug", cfg.engine.strong_aug)):
        cp[sec] = {f.name: fmt(getattr(obj, f.name)) for f in fields(obj) if f.name != "kind"}
    cp["switches"] = {k: fmt(v) for k, v in cfg.switches.items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
