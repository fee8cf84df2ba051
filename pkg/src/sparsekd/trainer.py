"""The rotating-key-frame training state machine.

Per batch: the spatial teacher sees the labeled key frame; the student head
at the scheduled position receives distillation, every other head
pseudo-labels its frame; the temporal teacher encodes the assembled student
features twice (ordered and timeline-shuffled) to train the perturbation
head whose verdict gates each clip's pseudo-label loss; one SGD step covers
the composed objective.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .core import (
    ClipSample,
    ConfigError,
    HyperParams,
    ModelConfig,
    RunState,
    key_frame_position,
    positive_class_weights,
    spawn_rngs,
)
from .losses import (
    LossBreakdown,
    composite_supervised,
    kl_distill,
    pseudo_bce_per_clip,
    ramp_weight,
    total_loss,
    weighted_bce,
)
from .models import DualBranchModel, save_checkpoint
from .synthdata import LabeledCorpus, SequenceData, make_clips, sample_unlabeled_windows

VERDICT_ACCEPTED = "accepted"
VERDICT_REJECTED = "rejected"
VERDICT_INACTIVE = "inactive"


@dataclass(frozen=True)
class PseudoLabelRecord:
    """One generated pseudo label with its gate verdict, for auditing."""

    clip_id: int
    position: int  # clip offset, never the key position
    y_hat: np.ndarray  # (U,) int8
    confidences: np.ndarray  # (U,) in (0, 1)
    tpl_verdict: str
    ground_truth: Optional[np.ndarray] = None  # audit only


@dataclass
class EpochStats:
    epoch: int
    train_macro_f1: float
    val_macro_f1: float
    pseudo_acceptance_rate: float
    pseudo_label_accuracy: float  # over labels actually used; nan if none
    used_pseudo_flags: int
    correct_pseudo_flags: int
    tpl_accuracy: float  # averaged over the epoch's training steps
    tpl_probe_accuracy: float  # end-of-epoch probe on held-out windows
    loss_means: dict[str, float] = field(default_factory=dict)


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)

    def final_val_f1(self) -> float:
        return self.epochs[-1].val_macro_f1 if self.epochs else float("nan")

    def overall_pseudo_accuracy(self) -> float:
        """Accuracy over every pseudo label that entered the training loss."""
        used = sum(ep.used_pseudo_flags for ep in self.epochs)
        correct = sum(ep.correct_pseudo_flags for ep in self.epochs)
        return correct / used if used else float("nan")


@dataclass
class StepOutput:
    breakdown: LossBreakdown
    pseudo_records: list[PseudoLabelRecord]
    semi_contributions: np.ndarray  # (b,) post-gate per-clip pseudo losses
    verdicts: list[str]
    selected_position: int
    tpl_correct: int
    tpl_total: int
    ensemble_predictions: np.ndarray  # (b, U) int8
    key_labels: np.ndarray  # (b, U) int8


def sample_nonidentity_permutation(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw over the n!-1 non-identity permutations."""
    if n < 2:
        raise ValueError("need at least two positions to permute")
    identity = np.arange(n)
    while True:
        perm = rng.permutation(n)
        if not np.array_equal(perm, identity):
            return perm


def shuffle_features(tokens: Tensor, rng: np.random.Generator) -> Tensor:
    """Reorder the n token rows by a random non-identity permutation."""
    perm = sample_nonidentity_permutation(tokens.shape[0], rng)
    return tokens[torch.from_numpy(perm)]


def generate_pseudo_labels(student_logits: np.ndarray | Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Per-AU hard pseudo labels and confidences from student logits.

    The label is the more probable of the two classes; the tie at
    probability 0.5 goes to the positive class.
    """
    logits = (
        student_logits.detach().cpu().numpy()
        if isinstance(student_logits, Tensor)
        else np.asarray(student_logits)
    )
    if not np.isfinite(logits).all():
        raise ValueError("student logits must be finite")
    confidences = 1.0 / (1.0 + np.exp(-logits))
    y_hat = (confidences >= 0.5).astype(np.int8)
    return y_hat, confidences


def tpl_gate(o_ssl_logit: float, epoch: int, hp: HyperParams) -> str:
    """Gate verdict for one clip's pseudo labels.

    Before the gate's start epoch the verdict is ``inactive``; afterwards a
    clip is accepted exactly when its ordered feature sequence is classified
    as unperturbed (class 0). A disabled gate accepts everything.
    """
    if not hp.tpl_enabled:
        return VERDICT_ACCEPTED
    if epoch < hp.tpl_start_epoch:
        return VERDICT_INACTIVE
    return VERDICT_ACCEPTED if 1.0 / (1.0 + math.exp(-o_ssl_logit)) < 0.5 else VERDICT_REJECTED


def build_optimizer(model: DualBranchModel, hp: HyperParams) -> torch.optim.Optimizer:
    return torch.optim.SGD(model.parameters(), lr=hp.lr, momentum=hp.momentum)


def _clip_batch_tensors(
    batch: Sequence[ClipSample],
) -> tuple[Tensor, Tensor]:
    """Stack a batch: clips (b, n, C, H, W) and key labels (b, U)."""
    images = np.stack([clip.images() for clip in batch])  # (b, n, H, W, C)
    clips = torch.from_numpy(images).permute(0, 1, 4, 2, 3).contiguous()
    labels = torch.from_numpy(np.stack([clip.key_label() for clip in batch]))
    return clips, labels


def training_step(
    model: DualBranchModel,
    batch: Sequence[ClipSample],
    hp: HyperParams,
    state: RunState,
    optimizer: torch.optim.Optimizer,
    shuffle_rng: np.random.Generator,
) -> StepOutput:
    """One optimizer step over a key-position-homogeneous batch."""
    n = hp.clip_len
    expected = key_frame_position(state.batch_counter, n)
    for clip in batch:
        if clip.key_pos != expected:
            raise RuntimeError(
                f"clip {clip.clip_id} has key_pos {clip.key_pos}, "
                f"schedule requires {expected} at step {state.batch_counter}"
            )
    if state.pos_weights is None:
        raise ConfigError("run state has no positive-class weights")

    b = len(batch)
    clips, y = _clip_batch_tensors(batch)
    weights = torch.from_numpy(state.pos_weights).to(clips.dtype)
    y = y.to(clips.dtype)

    o_a, _ = model.spatial_branch(clips[:, expected])
    feats = model.frame_features(clips)

    o_k: Tensor | None = None
    tokens: list[Tensor | None] = [None] * n
    pseudo_positions: list[int] = []
    pseudo_logits: list[Tensor] = []
    for q in range(n):
        logits_q, feat_q = model.student(q, feats[:, q], training=True)
        tokens[q] = feat_q
        if q == expected:
            o_k = logits_q
        else:
            pseudo_positions.append(q)
            pseudo_logits.append(logits_q)
    assert o_k is not None

    l_skd = kl_distill(o_a, o_k, hp.temperature, b, hp.kl_direction)
    l_s = composite_supervised(o_a, o_k, y, weights, hp.alpha, l_skd)

    ps_logits = torch.stack(pseudo_logits, dim=1)  # (b, n-1, U)
    y_hat, confidences = generate_pseudo_labels(ps_logits)
    l_semi_per_clip = pseudo_bce_per_clip(
        ps_logits, torch.from_numpy(y_hat).to(ps_logits.dtype), weights
    )

    token_seq = torch.stack(tokens, dim=1)  # (b, n, W)
    o_b, ssl_ordered, _ = model.temporal_branch(token_seq, expected)
    shuffled = torch.stack([shuffle_features(token_seq[i], shuffle_rng) for i in range(b)])
    _, ssl_shuffled, _ = model.temporal_branch(shuffled, expected)

    ssl_logits = torch.cat([ssl_ordered, ssl_shuffled])
    ssl_targets = torch.cat([torch.zeros(b), torch.ones(b)]).to(ssl_logits.dtype)
    l_ssl = F.binary_cross_entropy_with_logits(ssl_logits, ssl_targets)

    ssl_ordered_vals = ssl_ordered.detach()
    verdicts = [tpl_gate(float(ssl_ordered_vals[i]), state.epoch, hp) for i in range(b)]
    mask = torch.tensor([v == VERDICT_ACCEPTED for v in verdicts])

    l_tkd = kl_distill(o_b, o_a, hp.temperature, b, hp.kl_direction)
    l_t = composite_supervised(o_b, o_a, y, weights, hp.alpha, l_tkd)

    o_output = 0.5 * (o_a + o_b)
    l_bce_ensemble = weighted_bce(o_output, y, weights)

    total, breakdown = total_loss(
        l_s=l_s,
        l_bce_ensemble=l_bce_ensemble,
        l_t=l_t,
        l_ssl=l_ssl,
        l_semi_per_clip=l_semi_per_clip,
        tpl_mask=mask,
        epoch=state.epoch,
        hp=hp,
        l_skd=l_skd,
        l_tkd=l_tkd,
    )

    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    state.batch_counter += 1

    gate_active = hp.tpl_enabled and state.epoch < hp.tpl_start_epoch
    effective_mask = torch.zeros_like(mask) if gate_active else mask
    semi_contributions = (
        (l_semi_per_clip.detach() * effective_mask.to(l_semi_per_clip.dtype)).numpy()
    )

    records = []
    for i, clip in enumerate(batch):
        for slot, q in enumerate(pseudo_positions):
            truth = None if clip.audit_labels is None else clip.audit_labels[q].copy()
            records.append(
                PseudoLabelRecord(
                    clip_id=clip.clip_id,
                    position=q,
                    y_hat=y_hat[i, slot].copy(),
                    confidences=confidences[i, slot].copy(),
                    tpl_verdict=verdicts[i],
                    ground_truth=truth,
                )
            )

    with torch.no_grad():
        tpl_correct = int((ssl_ordered < 0).sum()) + int((ssl_shuffled >= 0).sum())
        preds = (torch.sigmoid(o_output) >= 0.5).to(torch.int8).numpy()

    return StepOutput(
        breakdown=breakdown,
        pseudo_records=records,
        semi_contributions=semi_contributions,
        verdicts=verdicts,
        selected_position=expected,
        tpl_correct=tpl_correct,
        tpl_total=2 * b,
        ensemble_predictions=preds,
        key_labels=np.stack([clip.key_label() for clip in batch]).astype(np.int8),
    )


def _unlabeled_step(
    model: DualBranchModel,
    windows: np.ndarray,
    hp: HyperParams,
    state: RunState,
    optimizer: torch.optim.Optimizer,
    shuffle_rng: np.random.Generator,
) -> None:
    """Pseudo-label plus perturbation losses on label-free windows.

    Does not advance the key-frame rotation counter.
    """
    b = windows.shape[0]
    if b == 0:
        return
    clips = torch.from_numpy(windows).permute(0, 1, 4, 2, 3).contiguous()
    weights = torch.from_numpy(state.pos_weights).to(clips.dtype)
    feats = model.frame_features(clips)
    logits = []
    tokens = []
    for q in range(hp.clip_len):
        logits_q, feat_q = model.student(q, feats[:, q], training=True)
        logits.append(logits_q)
        tokens.append(feat_q)
    all_logits = torch.stack(logits, dim=1)
    y_hat, _ = generate_pseudo_labels(all_logits)
    l_semi_per_clip = pseudo_bce_per_clip(
        all_logits, torch.from_numpy(y_hat).to(all_logits.dtype), weights
    )
    token_seq = torch.stack(tokens, dim=1)
    _, ssl_ordered, _ = model.temporal_branch(token_seq, 0)
    shuffled = torch.stack([shuffle_features(token_seq[i], shuffle_rng) for i in range(b)])
    _, ssl_shuffled, _ = model.temporal_branch(shuffled, 0)
    ssl_logits = torch.cat([ssl_ordered, ssl_shuffled])
    ssl_targets = torch.cat([torch.zeros(b), torch.ones(b)]).to(ssl_logits.dtype)
    l_ssl = F.binary_cross_entropy_with_logits(ssl_logits, ssl_targets)
    ssl_ordered_vals = ssl_ordered.detach()
    verdicts = [tpl_gate(float(ssl_ordered_vals[i]), state.epoch, hp) for i in range(b)]
    mask = torch.tensor([v == VERDICT_ACCEPTED for v in verdicts]).to(l_semi_per_clip.dtype)
    l_semi = (l_semi_per_clip * mask).sum() / b
    w = ramp_weight(state.epoch - 1, hp.ramp_omega, hp.ramp_mu, hp.ramp_sigma, hp.warmup_epochs)
    loss = w * (hp.lambda3 * l_ssl + hp.lambda4 * l_semi)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()


# ---------------------------------------------------------------------------
# Full training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: DualBranchModel
    state: RunState
    report: TrainReport
    checkpoint_path: Optional[Path]
    val_macro_f1: float


def split_sequences(
    num_sequences: int, rng: np.random.Generator, val_fraction: float = 0.2
) -> tuple[list[int], list[int]]:
    """Sequence-level train/validation split (no frame-level leakage)."""
    order = rng.permutation(num_sequences)
    val_count = int(round(val_fraction * num_sequences)) if num_sequences > 1 else 0
    val = sorted(int(i) for i in order[:val_count])
    train = sorted(int(i) for i in order[val_count:])
    return train, val


def _val_clips(sequences: list[SequenceData], num_aus: int, clip_len: int) -> list[ClipSample]:
    """Non-overlapping evaluation windows over held-out sequences."""
    if not sequences:
        return []
    eval_sequences = []
    for seq in sequences:
        visible = np.zeros(seq.num_frames, dtype=bool)
        visible[::clip_len] = True
        eval_sequences.append(SequenceData(images=seq.images, labels=seq.labels, visible=visible))
    corpus = LabeledCorpus(
        sequences=eval_sequences, label_ratio=1.0, sample_mode="strided", num_aus=num_aus
    )
    return make_clips(corpus, clip_len, key_pos=0)


def _macro_f1(predictions: np.ndarray, truth: np.ndarray) -> float:
    from .evaluation import f1_scores

    if len(predictions) == 0:
        return float("nan")
    return f1_scores(predictions, truth).macro_f1


class _MetricsWriter:
    """Per-step loss log with stable formatting (replays are byte-identical)."""

    def __init__(self, path: Path):
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(("step", "epoch") + LossBreakdown.CSV_FIELDS)

    def write(self, step: int, epoch: int, breakdown: LossBreakdown) -> None:
        self._writer.writerow([step, epoch] + breakdown.as_csv_row())

    def close(self) -> None:
        self._fh.close()


def _write_epoch_csv(path: Path, report: TrainReport) -> None:
    loss_fields = list(LossBreakdown.CSV_FIELDS)
    header = [
        "epoch",
        "train_macro_f1",
        "val_macro_f1",
        "pseudo_acceptance_rate",
        "pseudo_label_accuracy",
        "used_pseudo_flags",
        "correct_pseudo_flags",
        "tpl_accuracy",
        "tpl_probe_accuracy",
    ] + [f"mean_{name}" for name in loss_fields]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for ep in report.epochs:
            row = [
                ep.epoch,
                f"{ep.train_macro_f1:.10g}",
                f"{ep.val_macro_f1:.10g}",
                f"{ep.pseudo_acceptance_rate:.10g}",
                f"{ep.pseudo_label_accuracy:.10g}",
                ep.used_pseudo_flags,
                ep.correct_pseudo_flags,
                f"{ep.tpl_accuracy:.10g}",
                f"{ep.tpl_probe_accuracy:.10g}",
            ] + [f"{ep.loss_means.get(name, float('nan')):.10g}" for name in loss_fields]
            writer.writerow(row)


def train(
    corpus: LabeledCorpus,
    hp: HyperParams,
    model_cfg: ModelConfig,
    seed: int,
    run_dir: Optional[str | Path] = None,
    checkpoint_every: int = 0,
) -> TrainResult:
    """Full training loop with per-epoch validation on a held-out split.

    ``checkpoint_every > 0`` writes ``epoch_<E>.ckpt`` snapshots into
    ``run_dir`` at that period; the final checkpoint is always written when
    ``run_dir`` is given.
    """
    if hp.clip_len != model_cfg.clip_len:
        raise ConfigError("hyper and model clip_len must agree")
    if model_cfg.num_aus != corpus.num_aus:
        raise ConfigError("model num_aus must match the corpus")

    split_rng, torch_rng, order_rng, shuffle_rng, infer_rng, unlabeled_rng, probe_rng = (
        spawn_rngs(seed, 7)
    )
    torch.manual_seed(int(torch_rng.integers(2**31)))

    train_idx, val_idx = split_sequences(len(corpus.sequences), split_rng)
    train_seqs = [corpus.sequences[i] for i in train_idx]
    val_seqs = [corpus.sequences[i] for i in val_idx]

    anchors = [
        (s, int(t)) for s, seq in enumerate(train_seqs) for t in np.flatnonzero(seq.visible)
    ]
    if not anchors:
        raise ConfigError("no labeled frames in the training split")

    visible_labels = np.concatenate([seq.labels[seq.visible] for seq in train_seqs])
    state = RunState(
        epoch=1,
        batch_counter=0,
        rng_seed=seed,
        pos_weights=positive_class_weights(visible_labels),
    )

    model = DualBranchModel(model_cfg)
    optimizer = build_optimizer(model, hp)
    val_clips = _val_clips(val_seqs, corpus.num_aus, hp.clip_len)
    val_truth = (
        np.stack([c.key_label() for c in val_clips]).astype(np.int8) if val_clips else None
    )
    probe = _probe_windows(val_seqs if val_seqs else train_seqs, hp.clip_len)

    run_path: Optional[Path] = None
    metrics: Optional[_MetricsWriter] = None
    events_fh = None
    if run_dir is not None:
        run_path = Path(run_dir)
        run_path.mkdir(parents=True, exist_ok=True)
        metrics = _MetricsWriter(run_path / "metrics.csv")
        events_fh = open(run_path / "events.jsonl", "w")
        json.dump(
            {"event": "train_start", "epochs": hp.epochs, "steps_per_epoch": math.ceil(len(anchors) / hp.batch_size), "seed": seed},
            events_fh,
        )
        events_fh.write("\n")

    report = TrainReport()
    try:
        _run_epochs(
            model, optimizer, hp, state, report, train_seqs, anchors, corpus,
            val_clips, val_truth, probe, order_rng, shuffle_rng, infer_rng,
            unlabeled_rng, probe_rng, metrics, events_fh, run_path, checkpoint_every,
        )
    except KeyboardInterrupt:
        # clean checkpoint-and-exit on Ctrl-C
        if run_path is not None:
            save_checkpoint(run_path / "interrupted.ckpt", model, state, hp)
            _write_epoch_csv(run_path / "epochs.csv", report)
            if metrics is not None:
                metrics.close()
            if events_fh is not None:
                events_fh.close()
        raise

    checkpoint_path: Optional[Path] = None
    if run_path is not None:
        checkpoint_path = run_path / f"epoch_{hp.epochs}.ckpt"
        save_checkpoint(checkpoint_path, model, state, hp)
        _write_epoch_csv(run_path / "epochs.csv", report)
        if events_fh is not None:
            json.dump({"event": "train_end", "checkpoint": checkpoint_path.name}, events_fh)
            events_fh.write("\n")
            events_fh.close()
        if metrics is not None:
            metrics.close()

    return TrainResult(
        model=model,
        state=state,
        report=report,
        checkpoint_path=checkpoint_path,
        val_macro_f1=report.final_val_f1(),
    )


def _run_epochs(
    model: DualBranchModel,
    optimizer: torch.optim.Optimizer,
    hp: HyperParams,
    state: RunState,
    report: TrainReport,
    train_seqs: list[SequenceData],
    anchors: list[tuple[int, int]],
    corpus: LabeledCorpus,
    val_clips: list[ClipSample],
    val_truth: Optional[np.ndarray],
    probe: np.ndarray,
    order_rng: np.random.Generator,
    shuffle_rng: np.random.Generator,
    infer_rng: np.random.Generator,
    unlabeled_rng: np.random.Generator,
    probe_rng: np.random.Generator,
    metrics: Optional["_MetricsWriter"],
    events_fh,
    run_path: Optional[Path],
    checkpoint_every: int,
) -> None:
    step = 0
    n = hp.clip_len
    for epoch in range(1, hp.epochs + 1):
        state.epoch = epoch
        order = order_rng.permutation(len(anchors))
        sums: dict[str, float] = {}
        batches = 0
        tpl_correct = tpl_total = 0
        used_flags = 0
        correct_flags = 0
        accepted = rejected = 0
        train_preds: list[np.ndarray] = []
        train_truth: list[np.ndarray] = []

        for start in range(0, len(order), hp.batch_size):
            chunk = order[start : start + hp.batch_size]
            key_pos = key_frame_position(state.batch_counter, n)
            batch_corpus = LabeledCorpus(
                sequences=[
                    _anchor_sequence(train_seqs[anchors[i][0]], anchors[i][1])
                    for i in chunk
                ],
                label_ratio=corpus.label_ratio,
                sample_mode=corpus.sample_mode,
                num_aus=corpus.num_aus,
            )
            batch = make_clips(batch_corpus, n, key_pos)
            out = training_step(model, batch, hp, state, optimizer, shuffle_rng)

            for name in LossBreakdown.CSV_FIELDS:
                sums[name] = sums.get(name, 0.0) + getattr(out.breakdown, name)
            batches += 1
            tpl_correct += out.tpl_correct
            tpl_total += out.tpl_total
            train_preds.append(out.ensemble_predictions)
            train_truth.append(out.key_labels)
            for verdict in out.verdicts:
                if verdict == VERDICT_ACCEPTED:
                    accepted += 1
                elif verdict == VERDICT_REJECTED:
                    rejected += 1
            for rec in out.pseudo_records:
                if rec.tpl_verdict == VERDICT_ACCEPTED and rec.ground_truth is not None:
                    used_flags += rec.y_hat.size
                    correct_flags += int((rec.y_hat == rec.ground_truth).sum())
            if metrics is not None:
                metrics.write(step, epoch, out.breakdown)
            step += 1

        if hp.use_unlabeled_clips and epoch > hp.unlabeled_start_epoch:
            train_only = LabeledCorpus(
                sequences=train_seqs,
                label_ratio=corpus.label_ratio,
                sample_mode=corpus.sample_mode,
                num_aus=corpus.num_aus,
            )
            windows, _ = sample_unlabeled_windows(
                train_only, n, hp.unlabeled_clips_per_epoch, unlabeled_rng
            )
            for start in range(0, windows.shape[0], hp.batch_size):
                _unlabeled_step(
                    model,
                    windows[start : start + hp.batch_size],
                    hp,
                    state,
                    optimizer,
                    shuffle_rng,
                )

        val_f1 = float("nan")
        if val_clips:
            val_pred, _ = infer(model, val_clips, seed=int(infer_rng.integers(2**31)))
            val_f1 = _macro_f1(val_pred, val_truth)
        stats = EpochStats(
            epoch=epoch,
            train_macro_f1=_macro_f1(np.concatenate(train_preds), np.concatenate(train_truth)),
            val_macro_f1=val_f1,
            pseudo_acceptance_rate=(
                accepted / (accepted + rejected) if accepted + rejected else 1.0
            ),
            pseudo_label_accuracy=(correct_flags / used_flags if used_flags else float("nan")),
            used_pseudo_flags=used_flags,
            correct_pseudo_flags=correct_flags,
            tpl_accuracy=tpl_correct / tpl_total if tpl_total else float("nan"),
            tpl_probe_accuracy=tpl_probe_accuracy(model, probe, probe_rng),
            loss_means={name: sums[name] / batches for name in sums},
        )
        report.epochs.append(stats)
        if events_fh is not None:
            json.dump(
                {
                    "event": "epoch_end",
                    "epoch": epoch,
                    "val_macro_f1": None if math.isnan(val_f1) else round(val_f1, 10),
                    "tpl_accuracy": round(stats.tpl_accuracy, 10),
                },
                events_fh,
            )
            events_fh.write("\n")
        if run_path is not None and checkpoint_every and epoch % checkpoint_every == 0:
            save_checkpoint(run_path / f"epoch_{epoch}.ckpt", model, state, hp)


def _anchor_sequence(seq: SequenceData, t: int) -> SequenceData:
    """A one-anchor view of a sequence so make_clips re-cuts its window."""
    visible = np.zeros(seq.num_frames, dtype=bool)
    visible[t] = True
    return SequenceData(images=seq.images, labels=seq.labels, visible=visible)


def _probe_windows(sequences: list[SequenceData], clip_len: int, limit: int = 64) -> np.ndarray:
    """Fixed stride-n windows used to probe perturbation-classifier accuracy."""
    windows = []
    for seq in sequences:
        for start in range(0, seq.num_frames - clip_len + 1, clip_len):
            windows.append(seq.images[start : start + clip_len])
            if len(windows) >= limit:
                return np.stack(windows)
    return np.stack(windows) if windows else np.zeros((0,))


def tpl_probe_accuracy(
    model: DualBranchModel, windows: np.ndarray, rng: np.random.Generator
) -> float:
    """Classifier accuracy over ordered (class 0) and shuffled (class 1)
    versions of the given windows, at the model's current state."""
    if windows.size == 0:
        return float("nan")
    clips = torch.from_numpy(windows).permute(0, 1, 4, 2, 3).contiguous()
    n = clips.shape[1]
    with torch.no_grad():
        feats = model.frame_features(clips)
        tokens = torch.stack(
            [model.student(q, feats[:, q], training=False)[1] for q in range(n)], dim=1
        )
        _, ordered, _ = model.temporal_branch(tokens, 0)
        shuffled_tokens = torch.stack(
            [shuffle_features(tokens[i], rng) for i in range(tokens.shape[0])]
        )
        _, shuffled, _ = model.temporal_branch(shuffled_tokens, 0)
        correct = int((ordered < 0).sum()) + int((shuffled >= 0).sum())
    return correct / (2 * tokens.shape[0])


def infer(
    model: DualBranchModel,
    clips: Sequence[ClipSample],
    seed: int = 0,
    batch_size: int = 64,
) -> tuple[np.ndarray, np.ndarray]:
    """Inductive inference: per batch a seeded-random key position picks the
    image-branch frame; the prediction thresholds the two-teacher ensemble."""
    n = model.cfg.clip_len
    for clip in clips:
        if clip.clip_len != n:
            raise ValueError(f"clip {clip.clip_id} has {clip.clip_len} frames, model needs {n}")
    rng = np.random.Generator(np.random.PCG64(seed))
    preds: list[np.ndarray] = []
    probs: list[np.ndarray] = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(clips), batch_size):
            batch = clips[start : start + batch_size]
            images = np.stack([c.images() for c in batch])
            tensor = torch.from_numpy(images).permute(0, 1, 4, 2, 3).contiguous()
            key_pos = int(rng.integers(n))
            o_a, _ = model.spatial_branch(tensor[:, key_pos])
            feats = model.frame_features(tensor)
            tokens = [
                model.student(q, feats[:, q], training=False)[1] for q in range(n)
            ]
            o_b, _, _ = model.temporal_branch(torch.stack(tokens, dim=1), key_pos)
            p = torch.sigmoid(0.5 * (o_a + o_b)).numpy()
            probs.append(p)
            preds.append((p >= 0.5).astype(np.int8))
    model.train()
    if not preds:
        u = model.cfg.num_aus
        return np.zeros((0, u), dtype=np.int8), np.zeros((0, u))
    return np.concatenate(preds), np.concatenate(probs)
