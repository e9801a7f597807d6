"""Experiment configuration: a TOML file with one section per module.

Sections and keys map one-to-one onto the config dataclasses; unknown keys
are rejected so typos fail loudly instead of silently using defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .backbone import BackboneConfig
from .data import ToyDataSpec
from .errors import ConfigError
from .fusion import AugmentConfig, FUSED, FUSION_NONE, FUSION_W2, FUSION_W3, RGB, THERMAL
from .gan import GanConfig
from .temporal import TemporalConfig
from .training import BINARY, MC, ScheduleConfig

TASKS = (BINARY, MC)
MODALITIES = (RGB, THERMAL, FUSED)
FUSION_MODES = (FUSION_NONE, FUSION_W2, FUSION_W3)
SCALES = ("toy", "full")


@dataclass
class ExperimentSpec:
    """Everything one run needs: data, model scale, protocol, and outputs."""

    manifest: Optional[str] = None
    task: str = BINARY
    modality: str = FUSED
    fusion_mode: str = FUSION_W2
    epochs: int = 200
    frames_per_video: int = 16  # m, uniform temporal sampling
    blur_k: int = 0
    seed: int = 0
    scale: str = "toy"

    backbone: BackboneConfig = None
    temporal_kwargs: dict = dataclasses.field(default_factory=dict)
    schedule: ScheduleConfig = None
    augment: AugmentConfig = None
    gan: GanConfig = None
    gan_steps: int = 200
    gan_batch_size: int = 4
    toy_data: ToyDataSpec = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.modality not in MODALITIES:
            raise ConfigError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.scale not in SCALES:
            raise ConfigError(f"scale must be one of {SCALES}, got {self.scale!r}")
        if self.epochs <= 0 or self.frames_per_video <= 0:
            raise ConfigError("epochs and frames_per_video must be positive")
        if self.backbone is None:
            self.backbone = BackboneConfig() if self.scale == "full" else BackboneConfig.toy()
        if self.schedule is None:
            self.schedule = ScheduleConfig(total_epochs=self.epochs)
        if self.augment is None:
            self.augment = AugmentConfig()
        if self.gan is None:
            self.gan = GanConfig() if self.scale == "full" else GanConfig.toy()
        if self.toy_data is None:
            self.toy_data = ToyDataSpec(seed=self.seed)

    @property
    def num_classes(self):
        return 2 if self.task == BINARY else 5

    def temporal(self):
        """Temporal config sized to this experiment's backbone and task."""
        kwargs = dict(
            num_frames=self.frames_per_video,
            channel_dim=self.backbone.out_dim,
            latent_count=max(1, self.frames_per_video // 2),
            num_classes=self.num_classes,
        )
        kwargs.update(self.temporal_kwargs)
        return TemporalConfig(**kwargs)


def _build(cls, table, section):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(table) - fields
    if unknown:
        raise ConfigError(f"[{section}] has unknown keys: {sorted(unknown)}")
    kwargs = dict(table)
    for key in ("stage_depths", "stage_dims", "labels"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def load_config(path):
    """Parse a TOML experiment file into an ExperimentSpec."""
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    known = {"experiment", "backbone", "temporal", "schedule", "augment",
             "gan", "toy_data"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")

    exp = dict(doc.get("experiment", {}))
    gan_steps = exp.pop("gan_steps", 200)
    gan_batch_size = exp.pop("gan_batch_size", 4)
    exp_fields = {f.name for f in dataclasses.fields(ExperimentSpec)}
    bad = set(exp) - exp_fields
    if bad:
        raise ConfigError(f"[experiment] has unknown keys: {sorted(bad)}")

    seed = exp.get("seed", 0)
    backbone = None
    if "backbone" in doc:
        backbone = _build(BackboneConfig, doc["backbone"], "backbone")
    schedule = None
    if "schedule" in doc:
        sched = dict(doc["schedule"])
        sched.setdefault("total_epochs", exp.get("epochs", 200))
        schedule = _build(ScheduleConfig, sched, "schedule")
    augment = None
    if "augment" in doc:
        augment = _build(AugmentConfig, doc["augment"], "augment")
    gan = None
    if "gan" in doc:
        gan = _build(GanConfig, doc["gan"], "gan")
    toy = None
    if "toy_data" in doc:
        td = dict(doc["toy_data"])
        td.setdefault("seed", seed)
        toy = _build(ToyDataSpec, td, "toy_data")

    temporal_kwargs = dict(doc.get("temporal", {}))
    allowed = {f.name for f in dataclasses.fields(TemporalConfig)}
    bad = set(temporal_kwargs) - allowed
    if bad:
        raise ConfigError(f"[temporal] has unknown keys: {sorted(bad)}")

    return ExperimentSpec(
        **exp,
        backbone=backbone,
        temporal_kwargs=temporal_kwargs,
        schedule=schedule,
        augment=augment,
        gan=gan,
        gan_steps=gan_steps,
        gan_batch_size=gan_batch_size,
        toy_data=toy,
    )
