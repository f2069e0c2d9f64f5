"""Experiment configuration: a JSON document with a closed set of keys.

Unknown keys anywhere are rejected so that a typo in, say, ``tau`` cannot
silently fall back to a default.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .data import OOD_KINDS, SyntheticSpec
from .nn import METHODS, ModelSpec
from .score import ScorerSpec
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OODSetConfig:
    kind: str
    size: int = 1000
    seed: int = 1
    shift: Optional[float] = None
    images: Optional[str] = None  # IDX path, only for kind == "idx"
    id: Optional[str] = None

    def __post_init__(self):
        if self.kind not in OOD_KINDS + ("idx",):
            raise ConfigError(f"unknown OOD kind {self.kind!r}")
        if self.kind == "idx" and not self.images:
            raise ConfigError("idx OOD sets need an 'images' path")

    @property
    def name(self) -> str:
        return self.id or (Path(self.images).stem if self.kind == "idx" else self.kind)


@dataclass(frozen=True)
class IdxData:
    train_images: str
    train_labels: str
    test_images: str
    test_labels: str


@dataclass(frozen=True)
class DataConfig:
    synthetic: Optional[SyntheticSpec] = None
    idx: Optional[IdxData] = None
    ood_sets: tuple = ()

    def __post_init__(self):
        if (self.synthetic is None) == (self.idx is None):
            raise ConfigError("data needs exactly one of 'synthetic' or 'idx'")
        if not self.ood_sets:
            raise ConfigError("data.ood_sets must list at least one OOD set")
        names = [o.name for o in self.ood_sets]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate OOD set names: {names}")
        if self.idx is not None and any(o.kind != "idx" for o in self.ood_sets):
            raise ConfigError("synthetic OOD generators need synthetic ID data")


@dataclass(frozen=True)
class Ablations:
    normalize_at_scoring: bool = False
    tau_sweep: tuple = ()
    p_norm_sweep: tuple = ()
    layer_sweep: tuple = ()
    dice_p_sweep: tuple = ()


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig
    model: dict = field(default_factory=dict)  # ModelSpec fields except 'method'
    train: TrainConfig = field(default_factory=TrainConfig)
    methods: tuple = ("baseline", "logitnorm", "t2fnorm")
    scorers: tuple = (ScorerSpec("msp"),)
    seeds: tuple = (0,)
    ablations: Ablations = field(default_factory=Ablations)
    output_dir: str = "runs"
    dice_samples: int = 2048

    def __post_init__(self):
        if not self.methods:
            raise ConfigError("at least one method is required")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("methods must be distinct")
        if not self.scorers:
            raise ConfigError("at least one scorer is required")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if "method" in self.model:
            raise ConfigError("set methods in 'methods', not in 'model'")
        try:
            self.model_spec("baseline")
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid model section: {exc}") from exc
        for a in self.ablations.layer_sweep:
            self.model_spec("t2fnorm", normalize_after_block=a)

    def model_spec(self, method: str, **override) -> ModelSpec:
        kw = dict(self.model)
        if self.data.synthetic is not None:
            s = self.data.synthetic
            kw.setdefault("input_shape", (s.channels, s.image_size, s.image_size))
            kw.setdefault("num_classes", s.num_classes)
        kw.update(override)
        return ModelSpec(method=method, **kw)

    def to_dict(self) -> dict:
        return _to_plain(self)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _to_plain(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    return obj


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}; allowed {sorted(allowed)}")
    try:
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in raw.items()})
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_MODEL_KEYS = {f.name for f in fields(ModelSpec)} - {"method"}


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    top = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}; allowed {sorted(top)}")
    if "data" not in raw:
        raise ConfigError("missing required key 'data'")

    d = dict(raw["data"]) if isinstance(raw["data"], dict) else raw["data"]
    if not isinstance(d, dict):
        raise ConfigError("data: expected an object")
    unknown = sorted(set(d) - {"synthetic", "idx", "ood_sets"})
    if unknown:
        raise ConfigError(f"data: unknown keys {unknown}")
    data = DataConfig(
        synthetic=_build(SyntheticSpec, d["synthetic"], "data.synthetic") if "synthetic" in d else None,
        idx=_build(IdxData, d["idx"], "data.idx") if "idx" in d else None,
        ood_sets=tuple(_build(OODSetConfig, o, f"data.ood_sets[{i}]") for i, o in enumerate(d.get("ood_sets", []))),
    )

    kw = {"data": data}
    if "model" in raw:
        model = raw["model"]
        if not isinstance(model, dict):
            raise ConfigError("model: expected an object")
        unknown = sorted(set(model) - _MODEL_KEYS)
        if unknown:
            raise ConfigError(f"model: unknown keys {unknown}; allowed {sorted(_MODEL_KEYS)}")
        kw["model"] = dict(model)
    if "train" in raw:
        kw["train"] = _build(TrainConfig, raw["train"], "train")
        if kw["train"].seed != TrainConfig.seed:
            raise ConfigError("train.seed is set per run from 'seeds'")
    if "scorers" in raw:
        kw["scorers"] = tuple(_build(ScorerSpec, s, f"scorers[{i}]") for i, s in enumerate(raw["scorers"]))
    if "ablations" in raw:
        kw["ablations"] = _build(Ablations, raw["ablations"], "ablations")
    for key in ("methods", "seeds"):
        if key in raw:
            kw[key] = tuple(raw[key])
    for key in ("output_dir", "dice_samples"):
        if key in raw:
            kw[key] = raw[key]
    return ExperimentConfig(**kw)


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return parse_config(raw)


def with_output_dir(cfg: ExperimentConfig, output_dir) -> ExperimentConfig:
    return replace(cfg, output_dir=str(output_dir))
