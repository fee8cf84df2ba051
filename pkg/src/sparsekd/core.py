"""Shared domain types, configuration, seeding, and run-state bookkeeping.

Conventions used throughout the package:

* Multi-label targets are binary numpy vectors of length ``num_aus``
  (one occurrence flag per action unit).
* Epochs are 1-indexed; ``RunState.batch_counter`` counts optimizer steps
  from 0 and never resets within a run.
* Key-frame positions are 0-indexed clip offsets in ``[0, clip_len)``.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import yaml

SEED_ENV_VAR = "SPARSEKD_SEED"


class ConfigError(ValueError):
    """Invalid configuration or hyperparameter value."""


def validate_label_vector(values: np.ndarray, num_aus: int) -> np.ndarray:
    """Check that ``values`` is a binary occurrence vector of length ``num_aus``."""
    arr = np.asarray(values)
    if arr.shape != (num_aus,):
        raise ValueError(f"label vector has shape {arr.shape}, expected ({num_aus},)")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("label vector entries must be 0 or 1")
    return arr.astype(np.int8)


@dataclass(frozen=True)
class FrameRecord:
    """One video frame: image array, optional occurrence label, source position."""

    image: np.ndarray  # H x W x C, float in [0, 1]
    label: Optional[np.ndarray]  # binary (U,) or None when withheld
    frame_index: int

    def __post_init__(self) -> None:
        if self.frame_index < 0:
            raise ValueError("frame_index must be non-negative")
        if not np.isfinite(self.image).all():
            raise ValueError("frame image contains non-finite values")


@dataclass(frozen=True)
class ClipSample:
    """An n-frame window with exactly one visible label at ``key_pos``.

    ``audit_labels`` optionally carries the full (n, U) ground truth for
    *auditing only* (pseudo-label accuracy); it is never a training target.
    """

    frames: tuple[FrameRecord, ...]
    key_pos: int
    clip_id: int
    audit_labels: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        n = len(self.frames)
        if not 0 <= self.key_pos < n:
            raise ValueError(f"key_pos {self.key_pos} outside [0, {n})")
        if self.frames[self.key_pos].label is None:
            raise ValueError("key frame must carry a label")
        for j, frame in enumerate(self.frames):
            if j != self.key_pos and frame.label is not None:
                raise ValueError(f"non-key frame {j} carries a visible label")
        if self.audit_labels is not None and self.audit_labels.shape[0] != n:
            raise ValueError("audit_labels row count must equal clip length")

    @property
    def clip_len(self) -> int:
        return len(self.frames)

    def key_label(self) -> np.ndarray:
        return self.frames[self.key_pos].label  # type: ignore[return-value]

    def images(self) -> np.ndarray:
        """Stacked (n, H, W, C) float32 image array."""
        return np.stack([f.image for f in self.frames]).astype(np.float32)


@dataclass(frozen=True)
class HyperParams:
    """All training scalars. Defaults follow the reference configuration."""

    lambda1: float = 0.5  # supervised spatial-pair loss weight
    lambda2: float = 0.5  # supervised temporal-pair loss weight
    lambda3: float = 0.2  # perturbation-classifier loss weight
    lambda4: float = 0.25  # pseudo-label loss weight
    alpha: float = 0.5  # distillation trade-off inside the pair losses
    temperature: float = 1.0  # soft-target temperature
    ramp_omega: float = 2.0
    ramp_mu: float = 0.0
    ramp_sigma: float = 5.0
    warmup_epochs: int = 5
    clip_len: int = 5
    z: int = 2  # networks per distillation pair (fixed)
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 8
    tpl_start_epoch: int = 3  # first epoch where the perturbation gate filters
    tpl_enabled: bool = True
    kl_direction: str = "ensemble_to_student"  # or "student_to_ensemble"
    use_unlabeled_clips: bool = False
    unlabeled_start_epoch: int = 10  # label-free clips join after this many epochs
    unlabeled_clips_per_epoch: int = 64

    def __post_init__(self) -> None:
        for name in ("lambda1", "lambda2", "lambda3", "lambda4", "alpha"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.warmup_epochs < 1:
            raise ConfigError("warmup_epochs must be a positive integer")
        if self.clip_len < 2:
            raise ConfigError("clip_len must be at least 2")
        if self.z != 2:
            raise ConfigError("z is fixed at 2 (one teacher, one student per pair)")
        if self.ramp_sigma == 0:
            raise ConfigError("ramp_sigma must be nonzero")
        if self.kl_direction not in ("ensemble_to_student", "student_to_ensemble"):
            raise ConfigError(f"unknown kl_direction {self.kl_direction!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture sizes for both branches and the token encoders."""

    num_aus: int = 5
    clip_len: int = 5
    image_size: int = 32
    image_channels: int = 1
    feature_width: int = 32  # token width W (per-AU and per-frame features)
    attn_channels: int = 4  # attention heads (channel dim of recorded matrices)
    head_dim: int = 8  # per-head width, the softmax scaling divisor
    encoder_layers: int = 2
    backbone_channels: tuple[int, ...] = (8, 16, 32)
    student_dropout: float = 0.25
    temporal_pool: str = "mean"  # or "key": pool encoder tokens for the AU head
    use_transformer: bool = True  # False swaps both token encoders for flat MLPs

    def __post_init__(self) -> None:
        if self.num_aus < 2:
            raise ConfigError("num_aus must be at least 2")
        if self.clip_len < 2:
            raise ConfigError("clip_len must be at least 2")
        if self.head_dim <= 0:
            raise ConfigError("head_dim must be positive")
        if self.feature_width != self.attn_channels * self.head_dim:
            raise ConfigError("feature_width must equal attn_channels * head_dim")
        if self.temporal_pool not in ("mean", "key"):
            raise ConfigError(f"unknown temporal_pool {self.temporal_pool!r}")
        if not 0 <= self.student_dropout <= 1:
            raise ConfigError("student_dropout must lie in [0, 1]")
        if isinstance(self.backbone_channels, list):
            object.__setattr__(self, "backbone_channels", tuple(self.backbone_channels))


@dataclass
class RunState:
    """Mutable bookkeeping owned by the trainer (single writer)."""

    epoch: int = 1
    batch_counter: int = 0
    rng_seed: int = 0
    pos_weights: Optional[np.ndarray] = None  # per-AU positive-class weights


def positive_class_weights(labels: Iterable[np.ndarray] | np.ndarray) -> np.ndarray:
    """Inverse class-frequency weights from the labeled subset.

    w_u = clamp(neg_count_u / max(pos_count_u, 1), 0.1, 10), so rare positives
    are up-weighted without letting the loss explode.
    """
    mat = np.asarray(list(labels) if not isinstance(labels, np.ndarray) else labels)
    if mat.size == 0:
        raise ConfigError("positive_class_weights needs a non-empty label collection")
    if mat.ndim == 1:
        mat = mat[None, :]
    pos = mat.sum(axis=0).astype(np.float64)
    neg = mat.shape[0] - pos
    w = neg / np.maximum(pos, 1.0)
    return np.clip(w, 0.1, 10.0)


def key_frame_position(batch_counter: int, clip_len: int) -> int:
    """The rotating key-frame position for a batch: batch_counter mod clip_len."""
    if clip_len <= 0:
        raise ConfigError("clip_len must be positive")
    if batch_counter < 0:
        raise ValueError("batch_counter must be non-negative")
    return batch_counter % clip_len


def resolve_seed(requested: Optional[int]) -> int:
    """Pick the run seed; the environment variable wins over any request."""
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env!r}") from exc
    return 0 if requested is None else int(requested)


def spawn_rngs(seed: int, count: int) -> list[np.random.Generator]:
    """Independent child generators derived from one master seed."""
    seq = np.random.SeedSequence(seed)
    return [np.random.Generator(np.random.PCG64(child)) for child in seq.spawn(count)]


# ---------------------------------------------------------------------------
# Config file round-trip (documented schema: two top-level maps, one key per
# dataclass field; see README).
# ---------------------------------------------------------------------------


def config_to_dict(hp: HyperParams, model_cfg: ModelConfig) -> dict:
    hyper = dataclasses.asdict(hp)
    model = dataclasses.asdict(model_cfg)
    model["backbone_channels"] = list(model["backbone_channels"])
    return {"hyper": hyper, "model": model}


def config_from_dict(data: dict) -> tuple[HyperParams, ModelConfig]:
    try:
        hyper = data["hyper"]
        model = data["model"]
    except (KeyError, TypeError) as exc:
        raise ConfigError("config must contain 'hyper' and 'model' sections") from exc
    hp_fields = {f.name for f in dataclasses.fields(HyperParams)}
    mc_fields = {f.name for f in dataclasses.fields(ModelConfig)}
    for key in hyper:
        if key not in hp_fields:
            raise ConfigError(f"unknown hyper key {key!r}")
    for key in model:
        if key not in mc_fields:
            raise ConfigError(f"unknown model key {key!r}")
    try:
        return HyperParams(**hyper), ModelConfig(**model)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def save_config(path: str | Path, hp: HyperParams, model_cfg: ModelConfig) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(hp, model_cfg), fh, sort_keys=True)


def load_config(path: str | Path) -> tuple[HyperParams, ModelConfig]:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return config_from_dict(data)
