"""Run configuration: ``key = value`` files with dotted section keys.

Example::

    tree = aflw21
    train.base_lr = 0.01
    train.lr_drop_every = inf
    synth.yaw_range = [-60, 60]
    model.conditioning = false

Values are JSON literals; bare words are strings and ``inf`` is infinity.
Unknown keys are rejected. The top-level ``seed`` drives model init,
training order and the synthetic generator alike.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data.synth import SynthConfig
from .errors import ConfigurationError, DataError
from .evaluator import EvalProtocol
from .trainer import TrainConfig

EVAL_KEYS = ("normalizer", "failure_threshold", "tau", "pose_tolerance")


@dataclass
class ModelToggles:
    conditioning: bool = True
    more_filters: bool = False
    fine_stage: bool = False
    dtype: str = "float32"


@dataclass
class RunConfig:
    tree: str = "aflw21"
    image_size: int = 64
    seed: int = 0
    tta: bool = False
    model: ModelToggles = field(default_factory=ModelToggles)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalProtocol = field(default_factory=EvalProtocol)
    synth: SynthConfig = field(default_factory=SynthConfig)
    paths: dict = field(default_factory=dict)

    def model_overrides(self) -> dict:
        return {"conditioning": self.model.conditioning, "more_filters": self.model.more_filters,
                "fine_stage": self.model.fine_stage}

    def variant(self) -> str:
        """Short name of the ablation variant these toggles select."""
        parts = []
        if not self.model.conditioning:
            parts.append("no-conditioning")
        if self.train.plain_softmax:
            parts.append("plain-softmax")
        if self.train.mining:
            parts.append("mining")
        if self.model.more_filters:
            parts.append("more-filters")
        if self.model.fine_stage:
            parts.append("fine-stage")
        return "+".join(parts) or "baseline"


PATH_KEYS = ("manifest", "val_manifest", "checkpoint", "out")
_TOP = ("tree", "image_size", "seed", "tta")


def _parse_value(text: str):
    t = text.strip()
    if t in ("inf", "+inf"):
        return math.inf
    if t == "-inf":
        return -math.inf
    try:
        return json.loads(t)
    except json.JSONDecodeError:
        return t


def _format_value(v) -> str:
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, np.ndarray):
        v = v.tolist()
    if isinstance(v, tuple):
        v = list(v)
    if isinstance(v, str) and v == v.strip() and v and _parse_value(v) == v:
        return v
    return json.dumps(v)


def parse_pairs(text: str, source: str = "<config>") -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or key in out:
            raise ConfigurationError(f"{source}:{n}: empty or repeated key {key!r}")
        out[key] = _parse_value(value)
    return out


def _section_fields(obj) -> set:
    return {f.name for f in fields(obj)}


def apply_pairs(cfg: RunConfig, pairs: dict) -> RunConfig:
    """Return ``cfg`` with every dotted key in ``pairs`` applied."""
    top, sections = {}, {"model": {}, "train": {}, "eval": {}, "synth": {}, "paths": {}}
    for key, value in pairs.items():
        head, _, rest = key.partition(".")
        if not rest:
            if head not in _TOP:
                raise ConfigurationError(f"unknown config key {key!r}")
            top[head] = value
            continue
        if head not in sections or "." in rest:
            raise ConfigurationError(f"unknown config key {key!r}")
        allowed = {"model": _section_fields(cfg.model), "train": _section_fields(cfg.train) - {"seed"},
                   "eval": set(EVAL_KEYS), "synth": _section_fields(cfg.synth) - {"tree", "image_size", "seed"},
                   "paths": set(PATH_KEYS)}[head]
        if rest not in allowed:
            raise ConfigurationError(f"unknown config key {key!r}")
        sections[head][rest] = value
    try:
        new = replace(cfg, **top)
        new.model = replace(cfg.model, **sections["model"])
        new.train = replace(cfg.train, **sections["train"])
        new.eval = replace(cfg.eval, **sections["eval"])
        synth = {**cfg.synth.to_dict(), **sections["synth"], "tree": new.tree, "image_size": new.image_size}
        new.synth = SynthConfig.from_dict(synth)
        new.paths = {**cfg.paths, **sections["paths"]}
        new.train = replace(new.train, seed=new.seed)
    except TypeError as exc:
        raise ConfigurationError(f"bad config value: {exc}") from None
    _check_types(new)
    return new


def _check_types(cfg: RunConfig) -> None:
    if not isinstance(cfg.tree, str) or not isinstance(cfg.image_size, int) or not isinstance(cfg.seed, int):
        raise ConfigurationError("tree must be a name, image_size and seed integers")
    for name, val in asdict(cfg.model).items():
        if name != "dtype" and not isinstance(val, bool):
            raise ConfigurationError(f"model.{name} must be true or false")
    if cfg.model.dtype not in ("float32", "float64"):
        raise ConfigurationError("model.dtype must be float32 or float64")


def to_pairs(cfg: RunConfig) -> dict:
    pairs = {k: getattr(cfg, k) for k in _TOP}
    pairs.update({f"model.{k}": v for k, v in asdict(cfg.model).items()})
    pairs.update({f"train.{k}": v for k, v in asdict(cfg.train).items() if k != "seed"})
    pairs.update({f"eval.{k}": getattr(cfg.eval, k) for k in EVAL_KEYS})
    synth = cfg.synth.to_dict()
    pairs.update({f"synth.{k}": v for k, v in synth.items() if k not in ("tree", "image_size", "seed")})
    pairs.update({f"paths.{k}": v for k, v in sorted(cfg.paths.items())})
    return pairs


def dump_config(cfg: RunConfig) -> str:
    """Canonical text form: every key, sorted, one per line."""
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in sorted(to_pairs(cfg).items()))


def loads_config(text: str, source: str = "<config>") -> RunConfig:
    return apply_pairs(RunConfig(), parse_pairs(text, source))


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise DataError(f"config file {p} not found")
    return loads_config(p.read_text(), str(p))
