"""Run configuration: one YAML file with a block per pipeline stage.

Keys are camelCase in the file (the external contract) and snake_case on the
dataclasses. Unknown keys are rejected so typos fail loudly, and a stable
hash of the full config is embedded in every artifact the pipeline writes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


def _snake(name: str) -> str:
    return re.sub(r"(?<!^)(?=[A-Z])", "_", name).lower()


def _from_dict(cls, data: dict, where: str):
    """Build a dataclass from a camelCase dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = _snake(key)
        if name not in fields:
            raise ConfigError(f"{where}: unknown key {key!r}")
        ftype = fields[name].type
        if dataclasses.is_dataclass(_RESOLVED.get(ftype)):
            value = _from_dict(_RESOLVED[ftype], value, f"{where}.{key}")
        elif isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[name] = value
    return cls(**kwargs)


@dataclass(frozen=True)
class PhantomConfig:
    volume_shape: tuple = (64, 64, 64)
    num_samples: int = 2000
    roi_count_weights: tuple = (0.35, 0.40, 0.25)  # P(0, 1, 2 ROIs)
    density_class_weights: tuple = (0.25, 0.25, 0.25, 0.25)
    roi_radius_range: tuple = (3, 6)
    mass_intensity_range: tuple = (0.75, 0.95)
    calc_intensity_range: tuple = (0.90, 1.00)
    mlo_angle_deg: float = 45.0
    wedge_intensity: float = 0.9
    wedge_width_frac: float = 0.35
    wedge_height_frac: float = 0.45
    tissue_max: float = 0.7  # MLO tissue range cap, keeps the wedge separable

    def validate(self):
        x, y, z = self.volume_shape
        if min(x, y, z) < 8:
            raise ConfigError(f"volume shape {self.volume_shape}: every dim must be >= 8")
        if not 30.0 <= self.mlo_angle_deg <= 60.0:
            raise ConfigError(f"mloAngleDeg {self.mlo_angle_deg} outside [30, 60]")
        if self.num_samples < 1:
            raise ConfigError("numSamples must be >= 1")
        if len(self.density_class_weights) != 4:
            raise ConfigError("densityClassWeights must have 4 entries")


@dataclass(frozen=True)
class PreprocessConfig:
    hough_edge_thresh: float = 0.3
    hough_min_votes_frac: float = 0.5
    affine_rotation_deg: float = 5.0
    affine_translate_px: float = 4.0
    affine_scale_range: tuple = (0.95, 1.05)
    affine_shear_deg: float = 2.0
    shared_affine: bool = False  # one draw for both views of a pair
    target_size: tuple = (128, 128)  # (H, W)


@dataclass(frozen=True)
class VisionConfig:
    patch_size: int = 8
    dim: int = 128
    depth: int = 4
    heads: int = 4
    image_size: tuple = (128, 128)
    mlp_ratio: int = 2

    def validate(self):
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def grid_shape(self) -> tuple:
        return (self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size)


@dataclass(frozen=True)
class TextConfig:
    dim: int = 128
    depth: int = 2
    heads: int = 4
    max_len: int = 64
    mlp_ratio: int = 2

    def validate(self):
        if self.dim % self.heads:
            raise ConfigError(f"text dim {self.dim} not divisible by heads {self.heads}")


@dataclass(frozen=True)
class EncoderConfig:
    vision: VisionConfig = field(default_factory=VisionConfig)
    text: TextConfig = field(default_factory=TextConfig)
    shared_vision_encoder: bool = True  # one encoder for both views

    def validate(self):
        self.vision.validate()
        self.text.validate()


@dataclass(frozen=True)
class Toggles:
    gla: bool = True          # local (patch-to-slice) alignment loss
    spn: bool = True          # same-position negatives from other samples
    saa: bool = True          # attention pooling (off: plain block means)
    ap_sampling: bool = True  # attend within the AP slice only (off: all patches)


@dataclass(frozen=True)
class AlignmentConfig:
    m: int = 256
    heads: int = 4
    toggles: Toggles = field(default_factory=Toggles)
    tau_init: float = 0.07
    literal_eq4: bool = False          # drop the positive from the denominator
    dot_product_attention: bool = False  # replace cosine scores in cross-attention

    def validate(self):
        root = round(self.m ** 0.5)
        if root * root != self.m:
            raise ConfigError(f"m={self.m} is not a perfect square")

    @property
    def grid_side(self) -> int:
        return round(self.m ** 0.5)


#: Recorded full-scale hyperparameters; never run at desk scale.
PAPER_PRESET = {"batchSize": 144, "steps": 40000, "lr": 4e-5, "weightDecay": 0.2}


@dataclass(frozen=True)
class TrainConfig:
    preset: str = "desk"
    batch_size: int = 16
    steps: int = 3000
    lr: float = 1e-3
    weight_decay: float = 1e-4
    momentum: float = 0.9
    balance_label: str = "birads"
    checkpoint_every: int = 500

    def validate(self):
        if self.preset not in ("desk", "paper"):
            raise ConfigError(f"unknown training preset {self.preset!r}")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batchSize must be >= 1 and steps >= 0")


@dataclass(frozen=True)
class EvalConfig:
    single_view: str = "cc"
    probe_steps: int = 800
    probe_batch_size: int = 16
    probe_lr: float = 5e-4
    probe_weight_decay: float = 1e-3
    fractions: tuple = (0.01, 0.1, 1.0)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/desk"
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    encoders: EncoderConfig = field(default_factory=EncoderConfig)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        self.phantom.validate()
        self.encoders.validate()
        self.alignment.validate()
        self.training.validate()
        gr, gc = self.encoders.vision.grid_shape
        side = self.alignment.grid_side
        if gr < side or gc < side:
            raise ConfigError(f"raw patch grid {gr}x{gc} smaller than super-patch grid {side}x{side}")
        return self


_RESOLVED = {
    "PhantomConfig": PhantomConfig,
    "PreprocessConfig": PreprocessConfig,
    "VisionConfig": VisionConfig,
    "TextConfig": TextConfig,
    "EncoderConfig": EncoderConfig,
    "Toggles": Toggles,
    "AlignmentConfig": AlignmentConfig,
    "TrainConfig": TrainConfig,
    "EvalConfig": EvalConfig,
}


def load_config(path) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if raw is None:
        raw = {}
    return _from_dict(RunConfig, raw, "config").validate()


def config_to_dict(cfg) -> dict:
    """Plain dict (snake_case keys) for hashing and checkpoint echo."""
    return dataclasses.asdict(cfg)


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def default_config(**overrides) -> RunConfig:
    cfg = RunConfig(**overrides)
    return cfg.validate()
