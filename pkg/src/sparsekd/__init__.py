"""Semi-supervised multi-label video learning from single-label clips.

Two backbone branches feed an AU-token teacher (per-image) and a
frame-token teacher (per-clip). A rotating key-frame schedule alternates
distillation and pseudo-labeling across per-position student heads, and a
self-supervised order-perturbation classifier filters the pseudo labels.
"""

__version__ = "0.1.0"

from .core import (
    ClipSample,
    ConfigError,
    FrameRecord,
    HyperParams,
    ModelConfig,
    RunState,
    key_frame_position,
    positive_class_weights,
)
from .synthdata import LabeledCorpus, SynthConfig, generate_corpus, make_clips, sample_sparse_labels

__all__ = [
    "ClipSample",
    "ConfigError",
    "FrameRecord",
    "HyperParams",
    "LabeledCorpus",
    "ModelConfig",
    "RunState",
    "SynthConfig",
    "generate_corpus",
    "key_frame_position",
    "make_clips",
    "positive_class_weights",
    "sample_sparse_labels",
    "__version__",
]
