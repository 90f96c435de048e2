"""Run configuration: JSON files validated against a schema, plus CLI overrides."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from .errors import ConfigError
from .fedsim import SHIFT_KINDS, ShiftConfig
from .runtime import METHODS

_RANGE = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
_CORRUPTION = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "scale": _RANGE,
        "offset_std": {"type": "number", "minimum": 0},
        "noise": _RANGE,
    },
}
_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["seed", "population", "model", "pretrain", "atp", "eval"],
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "output": {"type": "string"},
        "population": {
            "type": "object",
            "additionalProperties": False,
            "required": ["n_sources", "n_targets", "shift"],
            "properties": {
                "n_sources": _POS_INT,
                "n_targets": _POS_INT,
                "pool_csv": {"type": "string"},
                "label_column": {"type": "string"},
                "shift": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind"],
                    "properties": {
                        "kind": {"enum": list(SHIFT_KINDS)},
                        "num_classes": _POS_INT,
                        "dim": _POS_INT,
                        "class_sep": {"type": "number", "exclusiveMinimum": 0},
                        "class_std": {"type": "number", "exclusiveMinimum": 0},
                        "major_classes": _POS_INT,
                        "major_count": _POS_INT,
                        "minor_classes": _NONNEG_INT,
                        "minor_count": _POS_INT,
                        "pool_per_class": _POS_INT,
                        "val_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                        "source_corruption": _CORRUPTION,
                        "target_corruption": _CORRUPTION,
                    },
                },
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "hidden": {"type": "array", "items": _POS_INT},
                "batchnorm": {"type": "boolean"},
            },
        },
        "pretrain": {
            "type": "object",
            "additionalProperties": False,
            "required": ["rounds", "cohort", "lr"],
            "properties": {
                "rounds": _NONNEG_INT,
                "cohort": _POS_INT,
                "lr": {"type": "number", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 2},
                "epochs": _POS_INT,
                "bn_momentum": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            },
        },
        "atp": {
            "type": "object",
            "additionalProperties": False,
            "required": ["rounds", "cohort", "eta"],
            "properties": {
                "rounds": _NONNEG_INT,
                "cohort": _POS_INT,
                "eta": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 2},
                "epochs": _POS_INT,
                "mask": {"enum": ["full", "params", "stats"]},
                "normalize": {"type": "boolean"},
                "grad_clip": {"type": ["number", "null"], "exclusiveMinimum": 0},
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "batch_size": {"type": "integer", "minimum": 2},
                "methods": {"type": "array", "items": {"enum": list(METHODS)}, "minItems": 1},
                "tent_lr": {"type": "array", "items": {"type": "number", "minimum": 0},
                            "minItems": 1},
            },
        },
    },
}


@dataclass
class ModelConfig:
    hidden: tuple = (64,)
    batchnorm: bool = True


@dataclass
class PretrainConfig:
    rounds: int = 60
    cohort: int = 40
    lr: float = 0.05
    batch_size: int = 20
    epochs: int = 1
    bn_momentum: float = 0.1


@dataclass
class ATPConfig:
    rounds: int = 100
    cohort: int = 20
    eta: float = 0.2
    batch_size: int = 20
    epochs: int = 1
    mask: str = "full"
    normalize: bool = True
    grad_clip: float = 1.0


@dataclass
class EvalConfig:
    batch_size: int = 20
    methods: tuple = ("none", "atp-batch", "atp-online")
    tent_lr: tuple = (1e-3, 1e-2, 1e-1)  # grid; best on source validation is used


@dataclass
class RunConfig:
    seed: int
    n_sources: int
    n_targets: int
    shift: ShiftConfig
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    atp: ATPConfig = field(default_factory=ATPConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    name: str = "run"
    output: str = "runs"
    pool_csv: str = None
    label_column: str = "label"

    def to_dict(self):
        pop = {"n_sources": self.n_sources, "n_targets": self.n_targets,
               "shift": self.shift.to_dict()}
        if self.pool_csv is not None:
            pop["pool_csv"] = self.pool_csv
            pop["label_column"] = self.label_column
        d = {"name": self.name, "seed": self.seed, "output": self.output, "population": pop,
             "model": asdict(self.model), "pretrain": asdict(self.pretrain),
             "atp": asdict(self.atp), "eval": asdict(self.eval)}
        return _listify(d)

    def hash(self):
        """Short digest of everything that affects results (output dir excluded)."""
        d = self.to_dict()
        d.pop("output")
        d.pop("name")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _listify(obj):
    if isinstance(obj, dict):
        return {k: _listify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_listify(v) for v in obj]
    return obj


def _field_path(err):
    return ".".join(str(p) for p in err.absolute_path) or "<root>"


def validate(raw):
    """Raise :class:`ConfigError` naming the first offending field."""
    v = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(v.iter_errors(raw), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        e = errors[0]
        raise ConfigError(f"config field {_field_path(e)}: {e.message}")


def from_dict(raw):
    validate(raw)
    pop = raw["population"]
    shift = dict(pop["shift"])
    for key in ("source_corruption", "target_corruption"):
        if key in shift:
            c = dict(shift[key])
            for k in ("scale", "noise"):
                if k in c:
                    c[k] = tuple(c[k])
            shift[key] = c
    model = dict(raw["model"])
    if "hidden" in model:
        model["hidden"] = tuple(model["hidden"])
    ev = dict(raw["eval"])
    for k in ("methods", "tent_lr"):
        if k in ev:
            ev[k] = tuple(ev[k])
    cfg = RunConfig(
        seed=raw["seed"], n_sources=pop["n_sources"], n_targets=pop["n_targets"],
        shift=ShiftConfig(**shift), model=ModelConfig(**model),
        pretrain=PretrainConfig(**raw["pretrain"]), atp=ATPConfig(**raw["atp"]),
        eval=EvalConfig(**ev), name=raw.get("name", "run"), output=raw.get("output", "runs"),
        pool_csv=pop.get("pool_csv"), label_column=pop.get("label_column", "label"))
    if cfg.pretrain.cohort > cfg.n_sources:
        raise ConfigError("config field pretrain.cohort: exceeds population.n_sources")
    if cfg.atp.cohort > cfg.n_sources:
        raise ConfigError("config field atp.cohort: exceeds population.n_sources")
    return cfg


def load(path):
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return from_dict(raw)


def override(cfg, **fields):
    """Copy of ``cfg`` with dotted-path overrides, e.g. ``{"atp.eta": 0.1}``."""
    raw = cfg.to_dict()
    for dotted, value in fields.items():
        if value is None:
            continue
        node = raw
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return from_dict(raw)


def reference_names():
    return sorted(p.name[:-5] for p in resources.files("atpfl.configs").iterdir()
                  if p.name.endswith(".json"))


def reference(name):
    """Load a shipped config by name (``hybrid``) or file name (``hybrid.json``)."""
    stem = name[:-5] if name.endswith(".json") else name
    res = resources.files("atpfl.configs").joinpath(stem + ".json")
    if not res.is_file():
        raise ConfigError(f"no reference config {name!r}; have {reference_names()}")
    return from_dict(json.loads(res.read_text()))


def resolve(path_or_name):
    """A file path if it exists, else a shipped reference config."""
    p = Path(path_or_name)
    if p.is_file():
        return load(p)
    return reference(p.name)
