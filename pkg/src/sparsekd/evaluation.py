"""Metrics and experiment reports: per-AU/macro F1, label-budget sweeps,
and the component-ablation table."""

from __future__ import annotations

import csv
import dataclasses
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .core import HyperParams, ModelConfig
from .synthdata import LabeledCorpus, sample_sparse_labels

TrainEvalFn = Callable[[LabeledCorpus, HyperParams, ModelConfig, int], float]

ABLATION_VARIANTS = ("full", "ksm_tpl", "sil_tpl", "sil_ksm", "baseline")


@dataclass(frozen=True)
class F1Report:
    per_au_f1: np.ndarray  # (U,) in [0, 1]
    macro_f1: float
    support: np.ndarray  # (U,) true-positive-class counts

    def __post_init__(self) -> None:
        assert abs(self.macro_f1 - float(np.mean(self.per_au_f1))) < 1e-12


def f1_scores(predictions: np.ndarray, ground_truth: np.ndarray) -> F1Report:
    """Per-AU F1 = 2PR/(P+R); an AU with no predicted and no true positives
    scores 0 by convention (penalizes trivial all-negative predictors)."""
    pred = np.asarray(predictions)
    truth = np.asarray(ground_truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if not (np.isin(pred, (0, 1)).all() and np.isin(truth, (0, 1)).all()):
        raise ValueError("predictions and ground truth must be binary")
    tp = ((pred == 1) & (truth == 1)).sum(axis=0).astype(np.float64)
    fp = ((pred == 1) & (truth == 0)).sum(axis=0).astype(np.float64)
    fn = ((pred == 0) & (truth == 1)).sum(axis=0).astype(np.float64)
    denom = 2 * tp + fp + fn
    per_au = np.where(denom > 0, 2 * tp / np.maximum(denom, 1.0), 0.0)
    return F1Report(
        per_au_f1=per_au,
        macro_f1=float(per_au.mean()),
        support=truth.sum(axis=0).astype(np.int64),
    )


def apply_ablation(
    hp: HyperParams, model_cfg: ModelConfig, variant: str
) -> tuple[HyperParams, ModelConfig]:
    """Hyperparameter/architecture overrides for each ablation variant.

    - ksm_tpl: token encoders replaced by flat MLPs (correlation modeling off)
    - sil_tpl: both distillation pair losses removed (lambda1 = lambda2 = 0)
    - sil_ksm: perturbation filter off; pseudo labels used unguarded
    - baseline: every semi/self-supervised term off, pure supervised ensemble
    """
    if variant == "full":
        return hp, model_cfg
    if variant == "ksm_tpl":
        return hp, dataclasses.replace(model_cfg, use_transformer=False)
    if variant == "sil_tpl":
        return dataclasses.replace(hp, lambda1=0.0, lambda2=0.0), model_cfg
    if variant == "sil_ksm":
        return dataclasses.replace(hp, lambda3=0.0, tpl_enabled=False), model_cfg
    if variant == "baseline":
        return (
            dataclasses.replace(
                hp, lambda1=0.0, lambda2=0.0, lambda3=0.0, lambda4=0.0, alpha=0.0,
                tpl_enabled=False,
            ),
            model_cfg,
        )
    raise ValueError(f"unknown ablation variant {variant!r}")


def _default_train_eval(
    corpus: LabeledCorpus, hp: HyperParams, model_cfg: ModelConfig, seed: int
) -> float:
    from .trainer import train

    return train(corpus, hp, model_cfg, seed=seed).val_macro_f1


def label_budget_sweep(
    corpus: LabeledCorpus,
    ratios: Sequence[float],
    modes: Sequence[str],
    hp: HyperParams,
    model_cfg: ModelConfig,
    seed: int = 0,
    train_eval: Optional[TrainEvalFn] = None,
    out_csv: Optional[str | Path] = None,
) -> list[dict]:
    """Held-out macro F1 per (label ratio, sampling mode) cell."""
    run = train_eval or _default_train_eval
    rows = []
    for ratio in ratios:
        for mode in modes:
            sampled = sample_sparse_labels(corpus, ratio, mode)
            macro = run(sampled, hp, model_cfg, seed)
            rows.append({"ratio": ratio, "mode": mode, "macro_f1": macro})
    if out_csv is not None:
        _write_rows(out_csv, rows, ["ratio", "mode", "macro_f1"])
    return rows


def ablation_table(
    corpus: LabeledCorpus,
    hp: HyperParams,
    model_cfg: ModelConfig,
    ratio: float = 0.05,
    mode: str = "strided",
    seeds: Sequence[int] = (0, 1, 2),
    variants: Sequence[str] = ABLATION_VARIANTS,
    train_eval: Optional[TrainEvalFn] = None,
    out_csv: Optional[str | Path] = None,
) -> dict[str, float]:
    """Median held-out macro F1 per component variant at a fixed budget."""
    run = train_eval or _default_train_eval
    sampled = sample_sparse_labels(corpus, ratio, mode)
    table: dict[str, float] = {}
    rows = []
    for variant in variants:
        hp_v, mc_v = apply_ablation(hp, model_cfg, variant)
        scores = [run(sampled, hp_v, mc_v, seed) for seed in seeds]
        table[variant] = float(statistics.median(scores))
        rows.append(
            {
                "variant": variant,
                "ratio": ratio,
                "median_macro_f1": table[variant],
                "scores": ";".join(f"{s:.10g}" for s in scores),
            }
        )
    if out_csv is not None:
        _write_rows(out_csv, rows, ["variant", "ratio", "median_macro_f1", "scores"])
    return table


def _write_rows(path: str | Path, rows: list[dict], header: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        for row in rows:
            writer.writerow(
                {
                    k: (f"{v:.10g}" if isinstance(v, float) else v)
                    for k, v in row.items()
                }
            )
