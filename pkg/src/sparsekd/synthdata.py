"""Procedural multi-label video corpus with known per-frame ground truth.

Each AU drives a fixed-location horizontal bar whose intensity follows a
trapezoidal profile over the activation event, so active windows vary
smoothly in time. A slow sinusoidal distractor blob gives every frame a
unique temporal signature, and occasional glitch frames (heavy noise bursts)
provide temporally-anomalous content for the perturbation filter to catch.
Labels stay piecewise-constant with events no shorter than ``smoothness``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import ClipSample, ConfigError, FrameRecord

CORPUS_FORMAT_VERSION = 1

BAR_AMPLITUDE = 0.8
BLOB_AMPLITUDE = 0.7
BLOB_SPEED = 2.5  # pixels per frame; constant so every window shows motion
FLICKER_PERIOD = 4  # frames per on/off cycle of temporal AUs


class GenerationError(ValueError):
    """Unsatisfiable corpus constraints (e.g. conflicting couplings)."""


@dataclass(frozen=True)
class SynthConfig:
    num_sequences: int = 40
    frames_per_sequence: int = 120
    num_aus: int = 5
    image_size: int = 32
    co_occurrence: tuple[tuple[int, int, float], ...] = ((0, 1, 0.9),)
    smoothness: int = 6  # minimum activation-event duration, frames
    noise_std: float = 0.05
    glitch_prob: float = 0.02  # per-frame chance of a noise-burst frame
    temporal_aus: int = 0  # trailing AUs rendered as flicker, visible only across frames
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_sequences < 1 or self.frames_per_sequence < 2:
            raise ConfigError("corpus needs at least one sequence of two frames")
        if self.num_aus < 2:
            raise ConfigError("num_aus must be at least 2")
        if self.smoothness < 2:
            raise ConfigError("smoothness must be at least 2 frames")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")
        if not 0 <= self.glitch_prob < 1:
            raise ConfigError("glitch_prob must lie in [0, 1)")
        if self.image_size // (self.num_aus + 1) < 2:
            raise ConfigError("image_size too small for one band per AU plus distractor")
        if not 0 <= self.temporal_aus <= self.num_aus:
            raise ConfigError("temporal_aus must lie in [0, num_aus]")
        for i, j, prob in self.co_occurrence:
            if not 0 <= prob <= 1:
                raise ConfigError(f"coupling probability {prob} outside [0, 1]")
            if i == j or not (0 <= i < self.num_aus and 0 <= j < self.num_aus):
                raise ConfigError(f"invalid coupling pair ({i}, {j})")
        if isinstance(self.co_occurrence, list):
            object.__setattr__(
                self, "co_occurrence", tuple(tuple(p) for p in self.co_occurrence)
            )


@dataclass
class SequenceData:
    """One generated sequence: frames, full ground truth, visibility mask."""

    images: np.ndarray  # (F, H, W, C) float32 in [0, 1]
    labels: np.ndarray  # (F, U) int8, ground truth for every frame
    visible: np.ndarray  # (F,) bool, trainer-visible label positions

    @property
    def num_frames(self) -> int:
        return self.images.shape[0]


@dataclass
class LabeledCorpus:
    sequences: list[SequenceData]
    label_ratio: float
    sample_mode: str  # "strided" or "contiguous"
    num_aus: int

    def visible_labels(self) -> np.ndarray:
        """All trainer-visible label vectors, concatenated across sequences."""
        rows = [seq.labels[seq.visible] for seq in self.sequences]
        return np.concatenate(rows, axis=0)

    def num_visible(self) -> int:
        return int(sum(seq.visible.sum() for seq in self.sequences))


# ---------------------------------------------------------------------------
# Latent activation signals
# ---------------------------------------------------------------------------


def _event_signal(num_frames: int, smoothness: int, rng: np.random.Generator) -> np.ndarray:
    """Alternating on/off runs, every run at least ``smoothness`` frames."""
    signal = np.zeros(num_frames, dtype=np.int8)
    state = int(rng.integers(0, 2))
    t = 0
    while t < num_frames:
        if state == 1:
            dur = int(rng.integers(smoothness, 2 * smoothness + 1))
        else:
            dur = int(rng.integers(smoothness, 4 * smoothness + 1))
        signal[t : t + dur] = state
        t += dur
        state = 1 - state
    return signal


def _follower_signal(
    leader: np.ndarray, prob: float, rng: np.random.Generator
) -> np.ndarray:
    """Copy each of the leader's activation events independently with ``prob``."""
    out = np.zeros_like(leader)
    t = 0
    n = len(leader)
    while t < n:
        if leader[t] == 1:
            end = t
            while end < n and leader[end] == 1:
                end += 1
            if rng.random() < prob:
                out[t:end] = 1
            t = end
        else:
            t += 1
    return out


def _resolve_couplings(
    cfg: SynthConfig,
) -> list[tuple[int, int, float]]:
    """Order coupling pairs so leaders are generated before their followers."""
    followers = [j for _, j, _ in cfg.co_occurrence]
    if len(followers) != len(set(followers)):
        raise GenerationError("an AU may follow at most one leader")
    pending = list(cfg.co_occurrence)
    follower_set = set(followers)
    resolved_aus = set(range(cfg.num_aus)) - follower_set
    ordered: list[tuple[int, int, float]] = []
    while pending:
        progress = False
        for pair in list(pending):
            if pair[0] in resolved_aus:
                ordered.append(pair)
                resolved_aus.add(pair[1])
                pending.remove(pair)
                progress = True
        if not progress:
            raise GenerationError("coupling pairs form a cycle")
    return ordered


def _activation_profile(duration: int) -> np.ndarray:
    """Trapezoidal intensity over one event: linear attack, hold, linear decay."""
    ramp = max(1, min(2, duration // 2))
    idx = np.arange(duration, dtype=np.float64)
    up = (idx + 1.0) / (ramp + 1.0)
    down = (duration - idx) / (ramp + 1.0)
    return np.minimum(1.0, np.minimum(up, down))


def _intensity_track(signal: np.ndarray) -> np.ndarray:
    """Per-frame render intensity for a binary event signal."""
    out = np.zeros(len(signal), dtype=np.float64)
    t = 0
    n = len(signal)
    while t < n:
        if signal[t] == 1:
            end = t
            while end < n and signal[end] == 1:
                end += 1
            out[t:end] = _activation_profile(end - t)
            t = end
        else:
            t += 1
    return out


def _render_sequence(
    labels: np.ndarray, cfg: SynthConfig, rng: np.random.Generator
) -> np.ndarray:
    num_frames, num_aus = labels.shape
    size = cfg.image_size
    band = size // (num_aus + 1)
    col_lo, col_hi = size // 8, size - size // 8
    images = np.zeros((num_frames, size, size, 1), dtype=np.float64)

    tracks = [_intensity_track(labels[:, u]) for u in range(num_aus)]
    flicker_from = num_aus - cfg.temporal_aus
    flicker_gate = (np.arange(num_frames) % FLICKER_PERIOD) < FLICKER_PERIOD // 2
    for u in range(num_aus):
        track = tracks[u]
        if u >= flicker_from:
            # temporal AU: active state renders only on the flicker on-phase,
            # so a single frame cannot distinguish active-off-phase from idle
            track = track * flicker_gate
        rows = slice(u * band, (u + 1) * band)
        images[:, rows, col_lo:col_hi, 0] += BAR_AMPLITUDE * track[:, None, None]

    # distractor blob: constant-speed bounce across the spare bottom band,
    # so every clip-length window carries usable motion for order checks
    blob_w = max(2, band)
    lo, hi = col_lo, col_hi - blob_w
    span = hi - lo
    offset = rng.uniform(0.0, 2.0 * span)
    direction = 1 if rng.random() < 0.5 else -1
    rows = slice(num_aus * band, num_aus * band + band)
    for t in range(num_frames):
        phase = (offset + direction * BLOB_SPEED * t) % (2.0 * span)
        x = lo + (phase if phase <= span else 2.0 * span - phase)
        xi = int(round(x))
        images[t, rows, xi : xi + blob_w, 0] += BLOB_AMPLITUDE

    if cfg.noise_std > 0:
        images += rng.normal(0.0, cfg.noise_std, size=images.shape)

    # glitch frames: full noise bursts (sensor dropouts); ground truth labels
    # are unchanged but the rendered content is gone
    if cfg.glitch_prob > 0:
        glitched = rng.random(num_frames) < cfg.glitch_prob
        for t in np.flatnonzero(glitched):
            images[t] = rng.uniform(0.0, 1.0, size=images[t].shape)

    return np.clip(images, 0.0, 1.0).astype(np.float32)


def generate_corpus(cfg: SynthConfig) -> LabeledCorpus:
    """Generate the full corpus; deterministic for a given config."""
    ordered_pairs = _resolve_couplings(cfg)
    follower_of = {j: (i, prob) for i, j, prob in ordered_pairs}
    seq_seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.num_sequences)
    sequences: list[SequenceData] = []
    for seq_seed in seq_seeds:
        rng = np.random.Generator(np.random.PCG64(seq_seed))
        labels = np.zeros((cfg.frames_per_sequence, cfg.num_aus), dtype=np.int8)
        for u in range(cfg.num_aus):
            if u not in follower_of:
                labels[:, u] = _event_signal(cfg.frames_per_sequence, cfg.smoothness, rng)
        for i, j, prob in ordered_pairs:
            labels[:, j] = _follower_signal(labels[:, i], prob, rng)
        images = _render_sequence(labels, cfg, rng)
        visible = np.ones(cfg.frames_per_sequence, dtype=bool)
        sequences.append(SequenceData(images=images, labels=labels, visible=visible))
    return LabeledCorpus(
        sequences=sequences, label_ratio=1.0, sample_mode="strided", num_aus=cfg.num_aus
    )


# ---------------------------------------------------------------------------
# Sparse label sampling and clip construction
# ---------------------------------------------------------------------------


def sample_sparse_labels(
    corpus: LabeledCorpus, label_ratio: float, mode: str = "strided"
) -> LabeledCorpus:
    """Restrict visible labels to a sparse subset of the ground truth.

    ``strided`` keeps every k-th frame with ``k = round(1 / label_ratio)``;
    ``contiguous`` keeps the leading ratio-fraction block of each sequence.
    """
    if not 0 < label_ratio <= 1:
        raise ConfigError("label_ratio must lie in (0, 1]")
    if mode not in ("strided", "contiguous"):
        raise ConfigError(f"unknown sample mode {mode!r}")
    sampled: list[SequenceData] = []
    for seq in corpus.sequences:
        num_frames = seq.num_frames
        visible = np.zeros(num_frames, dtype=bool)
        if mode == "strided":
            k = max(1, round(1.0 / label_ratio))
            visible[::k] = True
        else:
            count = max(1, round(label_ratio * num_frames))
            visible[:count] = True
        sampled.append(SequenceData(images=seq.images, labels=seq.labels, visible=visible))
    return LabeledCorpus(
        sequences=sampled,
        label_ratio=label_ratio,
        sample_mode=mode,
        num_aus=corpus.num_aus,
    )


def _reflect_index(i: int, num_frames: int) -> int:
    if i < 0:
        return -i
    if i >= num_frames:
        return 2 * (num_frames - 1) - i
    return i


def make_clips(corpus: LabeledCorpus, clip_len: int, key_pos: int) -> list[ClipSample]:
    """One clip per visible labeled frame, label visible only at ``key_pos``.

    Windows falling off a sequence boundary are reflect-padded, which keeps
    temporal smoothness and never fabricates discontinuities.
    """
    if not 0 <= key_pos < clip_len:
        raise ValueError(f"key_pos {key_pos} outside [0, {clip_len})")
    clips: list[ClipSample] = []
    clip_id = 0
    for seq in corpus.sequences:
        num_frames = seq.num_frames
        if clip_len > num_frames:
            raise ValueError(
                f"clip_len {clip_len} exceeds sequence length {num_frames}"
            )
        for t in np.flatnonzero(seq.visible):
            indices = [
                _reflect_index(int(t) - key_pos + j, num_frames) for j in range(clip_len)
            ]
            frames = tuple(
                FrameRecord(
                    image=seq.images[idx],
                    label=seq.labels[int(t)].copy() if j == key_pos else None,
                    frame_index=idx,
                )
                for j, idx in enumerate(indices)
            )
            clips.append(
                ClipSample(
                    frames=frames,
                    key_pos=key_pos,
                    clip_id=clip_id,
                    audit_labels=seq.labels[indices].copy(),
                )
            )
            clip_id += 1
    return clips


def sample_unlabeled_windows(
    corpus: LabeledCorpus, clip_len: int, count: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Random label-free windows (images, audit labels) for the optional
    unlabeled-clip training mode. Anchors avoid visible-label positions."""
    images: list[np.ndarray] = []
    audits: list[np.ndarray] = []
    num_seq = len(corpus.sequences)
    attempts = 0
    while len(images) < count and attempts < count * 20:
        attempts += 1
        seq = corpus.sequences[int(rng.integers(num_seq))]
        if seq.num_frames < clip_len:
            continue
        start = int(rng.integers(0, seq.num_frames - clip_len + 1))
        window = slice(start, start + clip_len)
        if seq.visible[window].any():
            continue
        images.append(seq.images[window])
        audits.append(seq.labels[window])
    if not images:
        return (
            np.zeros((0, clip_len) + corpus.sequences[0].images.shape[1:], dtype=np.float32),
            np.zeros((0, clip_len, corpus.num_aus), dtype=np.int8),
        )
    return np.stack(images), np.stack(audits)


# ---------------------------------------------------------------------------
# Coverage statistics
# ---------------------------------------------------------------------------


def count_unique_labels(labels: Iterable[np.ndarray] | np.ndarray) -> int:
    """Number of distinct AU combination vectors in the collection."""
    mat = np.asarray(list(labels) if not isinstance(labels, np.ndarray) else labels)
    if mat.size == 0:
        raise ValueError("count_unique_labels needs a non-empty collection")
    if mat.ndim == 1:
        mat = mat[None, :]
    return len({tuple(int(v) for v in row) for row in mat})


def coverage_rows(
    corpus: LabeledCorpus, ratios: Sequence[float], modes: Sequence[str]
) -> list[dict]:
    """Unique-label-combination counts per (ratio, mode) at equal budgets."""
    rows = []
    for ratio in ratios:
        for mode in modes:
            sampled = sample_sparse_labels(corpus, ratio, mode)
            rows.append(
                {
                    "ratio": ratio,
                    "mode": mode,
                    "visible_labels": sampled.num_visible(),
                    "unique_count": count_unique_labels(sampled.visible_labels()),
                }
            )
    return rows


# ---------------------------------------------------------------------------
# On-disk corpus format: per-sequence .npy image stacks + one label CSV
# ---------------------------------------------------------------------------


def save_corpus(corpus: LabeledCorpus, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": CORPUS_FORMAT_VERSION,
        "num_sequences": len(corpus.sequences),
        "num_aus": corpus.num_aus,
        "label_ratio": corpus.label_ratio,
        "sample_mode": corpus.sample_mode,
    }
    with open(out / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for s, seq in enumerate(corpus.sequences):
        np.save(out / f"seq_{s:04d}.npy", seq.images)
    with open(out / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["sequence", "frame", "visible"] + [f"au{u}" for u in range(corpus.num_aus)]
        )
        for s, seq in enumerate(corpus.sequences):
            for t in range(seq.num_frames):
                writer.writerow(
                    [s, t, int(seq.visible[t])] + [int(v) for v in seq.labels[t]]
                )


def load_corpus(corpus_dir: str | Path) -> LabeledCorpus:
    root = Path(corpus_dir)
    try:
        with open(root / "meta.json") as fh:
            meta = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"not a corpus directory: {root}") from exc
    if meta.get("format_version") != CORPUS_FORMAT_VERSION:
        raise ConfigError(f"unsupported corpus format {meta.get('format_version')}")
    num_aus = meta["num_aus"]
    per_seq_labels: dict[int, list[tuple[int, int, list[int]]]] = {}
    with open(root / "labels.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        assert header[:3] == ["sequence", "frame", "visible"]
        for row in reader:
            s, t, vis = int(row[0]), int(row[1]), int(row[2])
            per_seq_labels.setdefault(s, []).append((t, vis, [int(v) for v in row[3:]]))
    sequences = []
    for s in range(meta["num_sequences"]):
        images = np.load(root / f"seq_{s:04d}.npy")
        rows = sorted(per_seq_labels[s])
        labels = np.array([r[2] for r in rows], dtype=np.int8)
        visible = np.array([r[1] for r in rows], dtype=bool)
        if labels.shape != (images.shape[0], num_aus):
            raise ConfigError(f"label table inconsistent with images for sequence {s}")
        sequences.append(SequenceData(images=images, labels=labels, visible=visible))
    return LabeledCorpus(
        sequences=sequences,
        label_ratio=meta["label_ratio"],
        sample_mode=meta["sample_mode"],
        num_aus=num_aus,
    )


def corpus_hash(corpus_dir: str | Path) -> str:
    """SHA-256 over every corpus file, for run manifests."""
    root = Path(corpus_dir)
    digest = hashlib.sha256()
    for path in sorted(root.iterdir()):
        if path.is_file():
            digest.update(path.name.encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()
