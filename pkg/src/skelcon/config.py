"""Run configuration: JSON schema, profiles, validation and stable hashing.

A config file is a JSON object. Only ``dataset`` is required; everything else
falls back to the selected ``profile``:

``standard``
    The published large-corpus settings (64 frames, 3x64/256/64 GCN,
    2048-wide single-layer 8-head refinement, queue 8192, 450 epochs).
``small_corpus``
    ``standard`` with queue 2048 and the small-corpus weight decays.
``tiny``
    A desk-scale profile that pretrains on one CPU core in minutes.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .augment import TRANSFORMS, AugmentPipeline, SpatialMaskParams, TemporalMaskParams
from .encoder import EncoderConfig
from .errors import ConfigError
from .formats import SkeletonDataset, load_dataset
from .synthetic import SyntheticParams, generate_synthetic

PROFILES = ("standard", "small_corpus", "tiny")


@dataclass(frozen=True)
class DatasetSpec:
    path: str | None = None
    synthetic: SyntheticParams | None = None
    test_subjects: tuple[int, ...] = (4,)
    graph: str = "ntu25"

    def validate(self, prefix: str):
        if (self.path is None) == (self.synthetic is None):
            raise ConfigError("exactly one of 'path' or 'synthetic' is required", prefix)
        if self.synthetic is not None:
            try:
                self.synthetic.validate()
            except ConfigError as exc:
                raise ConfigError(str(exc).split(": ", 1)[-1], f"{prefix}.synthetic.{exc.field}") from None

    def load(self) -> SkeletonDataset:
        """Read the dataset directory, or generate the synthetic set."""
        if self.synthetic is not None:
            return generate_synthetic(self.synthetic)
        return load_dataset(self.path, self.graph)

    def load_split(self) -> tuple[SkeletonDataset, SkeletonDataset]:
        """``(train, test)`` split by held-out subjects."""
        return self.load().split_by_subject(self.test_subjects)


@dataclass(frozen=True)
class ContrastConfig:
    tau: float = 0.2
    momentum: float = 0.999
    queue_size: int = 8192
    weights: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    dim: int = 128
    bn_groups: int = 4

    def validate(self):
        if not self.tau > 0:
            raise ConfigError("must be > 0", "contrast.tau")
        if not 0 <= self.momentum <= 1:
            raise ConfigError("must lie in [0, 1]", "contrast.momentum")
        if self.queue_size < 1:
            raise ConfigError("must be >= 1", "contrast.queue_size")
        if len(self.weights) != 4:
            raise ConfigError("need exactly four mixing weights", "contrast.weights")
        if self.dim < 1:
            raise ConfigError("must be >= 1", "contrast.dim")
        if self.bn_groups < 1:
            raise ConfigError("must be >= 1", "contrast.bn_groups")


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: tuple[int, ...] = (350,)
    lr_decay: float = 0.1
    epochs: int = 450
    batch_size: int = 64

    def validate(self, prefix: str):
        if not self.lr >= 0:
            raise ConfigError("must be >= 0", f"{prefix}.lr")
        if list(self.milestones) != sorted(self.milestones):
            raise ConfigError("must be sorted ascending", f"{prefix}.milestones")
        if self.epochs < 1:
            raise ConfigError("must be >= 1", f"{prefix}.epochs")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", f"{prefix}.batch_size")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("weight_decay >= 0 and momentum in [0, 1) required", prefix)

    def lr_at(self, epoch: int) -> float:
        """Step schedule: multiply by ``lr_decay`` at every milestone epoch reached (0-based)."""
        k = sum(1 for m in self.milestones if epoch >= m)
        return self.lr * self.lr_decay ** k if k else self.lr


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSpec
    profile: str = "standard"
    seed: int = 0
    frames: int = 64
    augment: AugmentPipeline = field(default_factory=AugmentPipeline)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    contrast: ContrastConfig = field(default_factory=ContrastConfig)
    pretrain: OptimizerConfig = field(default_factory=OptimizerConfig)
    probe: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(
        lr=2.0, weight_decay=0.0, milestones=(50, 70), epochs=80, batch_size=1024))
    finetune: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(
        lr=0.1, weight_decay=0.0, milestones=(50, 70), epochs=80, batch_size=32))
    semi_fraction: float = 0.1
    transfer_dataset: DatasetSpec | None = None
    checkpoint_every: int = 50
    output_dir: str = "runs/default"

    def validate(self) -> "RunConfig":
        if self.profile not in PROFILES:
            raise ConfigError(f"must be one of {PROFILES}", "profile")
        self.dataset.validate("dataset")
        if self.transfer_dataset is not None:
            self.transfer_dataset.validate("transfer_dataset")
        if self.frames < 1:
            raise ConfigError("must be >= 1", "frames")
        if self.encoder.num_frames != self.frames:
            raise ConfigError(f"must equal frames ({self.frames})", "encoder.num_frames")
        self.encoder.validate()
        names = [t for t, _ in self.augment.transforms]
        if "spatial_mask" in names:
            self.augment.spatial.validate(self.encoder.num_joints)
        if "temporal_mask" in names:
            self.augment.temporal.validate(self.frames)
        self.contrast.validate()
        for name in ("pretrain", "probe", "finetune"):
            getattr(self, name).validate(name)
        if not 0 < self.semi_fraction <= 1:
            raise ConfigError("must lie in (0, 1]", "semi_fraction")
        if self.checkpoint_every < 1:
            raise ConfigError("must be >= 1", "checkpoint_every")
        return self

    def to_dict(self) -> dict:
        return _to_jsonable(self)

    def config_hash(self) -> bytes:
        """SHA-256 over the canonical JSON form, excluding the output location."""
        d = self.to_dict()
        d.pop("output_dir", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_jsonable(x) for x in obj]
    return obj


def profile_defaults(profile: str) -> dict:
    if profile not in PROFILES:
        raise ConfigError(f"must be one of {PROFILES}", "profile")
    base = RunConfig(DatasetSpec(path=".")).to_dict()
    del base["dataset"]
    base["profile"] = profile
    if profile == "small_corpus":
        base["contrast"]["queue_size"] = 2048
        base["pretrain"]["weight_decay"] = 1e-3
        base["probe"].update(lr=0.002, weight_decay=1e-3, batch_size=16)
    elif profile == "tiny":
        base.update(frames=16, checkpoint_every=10)
        base["encoder"].update(num_frames=16, gcn_channels=[16, 16, 16], temporal_kernel=5,
                               heads=4, model_dim=64, ffn_dim=64)
        base["augment"]["temporal"] = {"s": 8, "r": 3}
        base["contrast"].update(queue_size=32, momentum=0.9, bn_groups=2)
        base["pretrain"].update(lr=0.05, weight_decay=1e-4, milestones=[25], epochs=30, batch_size=32)
        base["probe"].update(lr=0.5, milestones=[50, 70], epochs=80, batch_size=128)
        # short budget: with few labels a longer schedule lets scratch training catch up
        base["finetune"].update(lr=0.01, milestones=[8], epochs=10, batch_size=32)
    return base


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _build(cls, data: Any, prefix: str, nested: dict | None = None):
    if not isinstance(data, dict):
        raise ConfigError("must be a JSON object", prefix)
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError("unknown field", f"{prefix}.{key}" if prefix else key)
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else key
        builder = (nested or {}).get(key)
        if builder is not None and value is not None:
            kwargs[key] = builder(value, path)
        else:
            default = known[key].default
            if isinstance(default, bool) or default is None or default is dataclasses.MISSING:
                pass
            elif isinstance(default, (int, float)) and (
                    isinstance(value, bool) or not isinstance(value, (int, float))
                    or (isinstance(default, int) and not isinstance(value, int))):
                raise ConfigError(f"expected {type(default).__name__}, got {value!r}", path)
            elif isinstance(default, str) and not isinstance(value, str):
                raise ConfigError(f"expected a string, got {value!r}", path)
            kwargs[key] = tuple(value) if isinstance(value, list) else value
    missing = [f.name for f in known.values()
               if f.name not in kwargs and f.default is dataclasses.MISSING
               and f.default_factory is dataclasses.MISSING]
    if missing:
        raise ConfigError("required field is missing", f"{prefix}.{missing[0]}" if prefix else missing[0])
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc), prefix or None) from None


def _dataset(value, path):
    return _build(DatasetSpec, value, path, {"synthetic": lambda v, p: _build(SyntheticParams, v, p)})


def _augment(value, path):
    if not isinstance(value, dict):
        raise ConfigError("must be a JSON object", path)
    for key in value:
        if key not in ("transforms", "spatial", "temporal"):
            raise ConfigError("unknown field", f"{path}.{key}")
    transforms = value.get("transforms", [[t, 0.5] for t in TRANSFORMS])
    if not all(isinstance(t, (list, tuple)) and len(t) == 2 for t in transforms):
        raise ConfigError("expected a list of [name, probability] pairs", f"{path}.transforms")
    return AugmentPipeline(
        tuple((t, p) for t, p in transforms),
        _build(SpatialMaskParams, value.get("spatial", {}), f"{path}.spatial"),
        _build(TemporalMaskParams, value.get("temporal", {}), f"{path}.temporal"),
    )


def _optimizer(value, path):
    return _build(OptimizerConfig, value, path)


_NESTED = {
    "dataset": _dataset,
    "transfer_dataset": _dataset,
    "augment": _augment,
    "encoder": lambda v, p: _build(EncoderConfig, v, p),
    "contrast": lambda v, p: _build(ContrastConfig, v, p),
    "pretrain": _optimizer,
    "probe": _optimizer,
    "finetune": _optimizer,
}


def config_from_dict(data: dict) -> RunConfig:
    """Resolve profile defaults under ``data`` and validate the result."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    if "dataset" not in data:
        raise ConfigError("required field is missing", "dataset")
    profile = data.get("profile", "standard")
    merged = _deep_merge(profile_defaults(profile), data)
    return _build(RunConfig, merged, "", _NESTED).validate()


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    return config_from_dict(data)


def save_config(config: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def tiny_config(**overrides) -> RunConfig:
    """Desk-scale config on the default synthetic set; ``overrides`` merge like JSON keys."""
    data = {"profile": "tiny", "dataset": {"synthetic": {}}}
    return config_from_dict(_deep_merge(data, overrides))
