"""Single entry point wiring data generation, training, evaluation,
ablations, budget sweeps, and coverage statistics into reproducible runs.

Every flag mirrors a config-file key (``--hyper-*`` / ``--model-*``), and
flags win over file values. A ``manifest.json`` snapshot written before any
training step is sufficient to replay the run bit-exactly.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import subprocess
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from .core import (
    ConfigError,
    HyperParams,
    ModelConfig,
    config_from_dict,
    config_to_dict,
    load_config,
    resolve_seed,
)
from .evaluation import ablation_table, f1_scores, label_budget_sweep
from .synthdata import (
    GenerationError,
    LabeledCorpus,
    SynthConfig,
    corpus_hash,
    coverage_rows,
    generate_corpus,
    load_corpus,
    make_clips,
    sample_sparse_labels,
    save_corpus,
)

MANIFEST_VERSION = 1

ABLATE_CHOICES = {
    "none": "full",
    "no-sil": "ksm_tpl",
    "no-ksm": "sil_tpl",
    "no-tpl": "sil_ksm",
    "baseline": "baseline",
}


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _parse_float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",")]


def _parse_str_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _parse_couplings(text: str) -> tuple[tuple[int, int, float], ...]:
    pairs = []
    for item in _parse_str_list(text):
        i, j, prob = item.split(":")
        pairs.append((int(i), int(j), float(prob)))
    return tuple(pairs)


_FIELD_PARSERS = {
    bool: _parse_bool,
    int: int,
    float: float,
    str: str,
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One optional flag per HyperParams/ModelConfig field (--hyper-*, --model-*)."""
    for prefix, cls in (("hyper", HyperParams), ("model", ModelConfig)):
        group = parser.add_argument_group(f"{prefix} overrides")
        for fld in dataclasses.fields(cls):
            flag = f"--{prefix}-{fld.name.replace('_', '-')}"
            dest = f"{prefix}__{fld.name}"
            if fld.name == "backbone_channels":
                parser_fn = _parse_int_tuple
            else:
                parser_fn = _FIELD_PARSERS.get(fld.type if isinstance(fld.type, type) else type(fld.default), str)
                if isinstance(fld.default, bool):
                    parser_fn = _parse_bool
                elif isinstance(fld.default, int):
                    parser_fn = int
                elif isinstance(fld.default, float):
                    parser_fn = float
            group.add_argument(
                flag, dest=dest, type=parser_fn, default=None,
                help=f"{cls.__name__}.{fld.name} (default {fld.default!r})",
            )


def _collect_overrides(args: argparse.Namespace, prefix: str) -> dict:
    out = {}
    for key, value in vars(args).items():
        if value is not None and key.startswith(f"{prefix}__"):
            out[key.split("__", 1)[1]] = value
    return out


def _code_version() -> str:
    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if described.returncode == 0:
            return described.stdout.strip()
    except (OSError, subprocess.TimeoutExpired):
        pass
    return f"sparsekd-{__version__}"


def _resolve_train_config(args: argparse.Namespace) -> tuple[HyperParams, ModelConfig, dict]:
    """defaults -> config file -> per-field flags -> convenience flags."""
    if args.config:
        hp, mc = load_config(args.config)
    else:
        hp, mc = HyperParams(), ModelConfig()
    hyper_over = _collect_overrides(args, "hyper")
    model_over = _collect_overrides(args, "model")
    if args.epochs is not None:
        hyper_over["epochs"] = args.epochs
    if args.batch_size is not None:
        hyper_over["batch_size"] = args.batch_size
    if args.lr is not None:
        hyper_over["lr"] = args.lr
    if args.clip_len is not None:
        hyper_over["clip_len"] = args.clip_len
        model_over["clip_len"] = args.clip_len
    if args.kl_direction is not None:
        hyper_over["kl_direction"] = args.kl_direction
    hp = dataclasses.replace(hp, **hyper_over)
    mc = dataclasses.replace(mc, **model_over)
    extras = {"hyper_overrides": hyper_over, "model_overrides": model_over}
    return hp, mc, extras


def _fit_model_to_corpus(mc: ModelConfig, corpus: LabeledCorpus, clip_len: int) -> ModelConfig:
    sample = corpus.sequences[0].images
    return dataclasses.replace(
        mc,
        num_aus=corpus.num_aus,
        clip_len=clip_len,
        image_size=sample.shape[1],
        image_channels=sample.shape[-1],
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = SynthConfig(
        num_sequences=args.num_sequences,
        frames_per_sequence=args.frames,
        num_aus=args.num_aus,
        image_size=args.image_size,
        co_occurrence=args.coupling,
        smoothness=args.smoothness,
        noise_std=args.noise_std,
        glitch_prob=args.glitch_prob,
        seed=resolve_seed(args.seed),
    )
    corpus = generate_corpus(cfg)
    save_corpus(corpus, args.out)
    with open(Path(args.out) / "synth_config.json", "w") as fh:
        json.dump(dataclasses.asdict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(corpus.sequences)} sequences to {args.out}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    from .trainer import train

    if args.from_manifest:
        with open(args.from_manifest) as fh:
            manifest = json.load(fh)
        hp, mc = config_from_dict(manifest["config"])
        seed = manifest["seed"]
        corpus_path = args.corpus or manifest["corpus"]
        label_ratio = manifest["label_ratio"]
        sample_mode = manifest["sample_mode"]
        ablate = manifest["ablate"]
        expected_hash = manifest["corpus_hash"]
    else:
        if not args.corpus:
            raise ConfigError("--corpus is required (or use --from-manifest)")
        hp, mc, _ = _resolve_train_config(args)
        seed = resolve_seed(args.seed)
        corpus_path = args.corpus
        label_ratio = args.label_ratio
        sample_mode = args.sample_mode
        ablate = args.ablate
        expected_hash = None

    actual_hash = corpus_hash(corpus_path)
    if expected_hash is not None and actual_hash != expected_hash:
        print(f"error: corpus hash mismatch for {corpus_path}", file=sys.stderr)
        return 1

    corpus = load_corpus(corpus_path)
    if label_ratio is not None and label_ratio < 1.0:
        corpus = sample_sparse_labels(corpus, label_ratio, sample_mode)
    mc = _fit_model_to_corpus(mc, corpus, hp.clip_len)

    from .evaluation import apply_ablation

    variant = ABLATE_CHOICES[ablate]
    hp_run, mc_run = apply_ablation(hp, mc, variant)

    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "seed": seed,
        "config": config_to_dict(hp_run, mc_run),
        "corpus": str(corpus_path),
        "corpus_hash": actual_hash,
        "label_ratio": label_ratio,
        "sample_mode": sample_mode,
        "ablate": ablate,
        "out_dir": str(run_dir),
        "code_version": _code_version(),
    }
    with open(run_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")

    result = train(
        corpus, hp_run, mc_run, seed=seed, run_dir=run_dir,
        checkpoint_every=args.checkpoint_every,
    )
    final = result.report.epochs[-1]
    print(
        f"trained {hp_run.epochs} epochs: val macro F1 {final.val_macro_f1:.4f}, "
        f"tpl accuracy {final.tpl_accuracy:.4f}, checkpoint {result.checkpoint_path}"
    )
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    from .models import load_checkpoint
    from .trainer import infer

    model, _, hp = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    full = LabeledCorpus(
        sequences=[
            dataclasses.replace(seq, visible=np.ones(seq.num_frames, dtype=bool))
            for seq in corpus.sequences
        ],
        label_ratio=1.0,
        sample_mode="strided",
        num_aus=corpus.num_aus,
    )
    stride_visible = []
    for seq in full.sequences:
        vis = np.zeros(seq.num_frames, dtype=bool)
        vis[:: model.cfg.clip_len] = True
        stride_visible.append(dataclasses.replace(seq, visible=vis))
    full = dataclasses.replace(full, sequences=stride_visible)
    clips = make_clips(full, model.cfg.clip_len, key_pos=0)
    preds, _ = infer(model, clips, seed=resolve_seed(args.seed))
    truth = np.stack([c.key_label() for c in clips]).astype(np.int8)
    report = f1_scores(preds, truth)
    print(f"macro F1: {report.macro_f1:.4f}")
    for u, score in enumerate(report.per_au_f1):
        print(f"  au{u}: {score:.4f} (support {report.support[u]})")
    if args.out:
        import csv as _csv

        with open(args.out, "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["au", "f1", "support"])
            for u, score in enumerate(report.per_au_f1):
                writer.writerow([u, f"{score:.10g}", int(report.support[u])])
            writer.writerow(["macro", f"{report.macro_f1:.10g}", int(report.support.sum())])
    return 0


def _cmd_ablate(args: argparse.Namespace) -> int:
    corpus = load_corpus(args.corpus)
    hp, mc, _ = _resolve_train_config(args)
    mc = _fit_model_to_corpus(mc, corpus, hp.clip_len)
    table = ablation_table(
        corpus, hp, mc, ratio=args.ratio, seeds=args.seeds, out_csv=args.out
    )
    for variant, score in table.items():
        print(f"{variant}: {score:.4f}")
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    corpus = load_corpus(args.corpus)
    hp, mc, _ = _resolve_train_config(args)
    mc = _fit_model_to_corpus(mc, corpus, hp.clip_len)
    rows = label_budget_sweep(
        corpus, args.ratios, args.modes, hp, mc,
        seed=resolve_seed(args.seed), out_csv=args.out,
    )
    for row in rows:
        print(f"ratio {row['ratio']:g} mode {row['mode']}: macro F1 {row['macro_f1']:.4f}")
    if args.plot:
        _plot_sweep(rows, args.plot)
    return 0


def _cmd_coverage(args: argparse.Namespace) -> int:
    corpus = load_corpus(args.corpus)
    rows = coverage_rows(corpus, args.ratios, args.modes)
    if args.out:
        import csv as _csv

        with open(args.out, "w", newline="") as fh:
            writer = _csv.DictWriter(
                fh, fieldnames=["ratio", "mode", "visible_labels", "unique_count"]
            )
            writer.writeheader()
            for row in rows:
                writer.writerow(row)
    for row in rows:
        print(
            f"ratio {row['ratio']:g} mode {row['mode']}: "
            f"{row['unique_count']} unique of {row['visible_labels']} labels"
        )
    if args.plot:
        _plot_coverage(rows, args.plot)
    return 0


def _plot_sweep(rows: list[dict], path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    modes = sorted({row["mode"] for row in rows})
    for mode in modes:
        pts = sorted((r["ratio"], r["macro_f1"]) for r in rows if r["mode"] == mode)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=mode)
    ax.set_xlabel("label ratio")
    ax.set_ylabel("macro F1")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)


def _plot_coverage(rows: list[dict], path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    modes = sorted({row["mode"] for row in rows})
    for mode in modes:
        pts = sorted((r["ratio"], r["unique_count"]) for r in rows if r["mode"] == mode)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=mode)
    ax.set_xlabel("label ratio")
    ax.set_ylabel("unique AU combinations")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsekd",
        description="Semi-supervised multi-label video learning from single-label clips",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic corpus directory")
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--num-sequences", type=int, default=40)
    gen.add_argument("--frames", type=int, default=120)
    gen.add_argument("--num-aus", type=int, default=5)
    gen.add_argument("--image-size", type=int, default=32)
    gen.add_argument("--noise-std", type=float, default=0.05)
    gen.add_argument("--glitch-prob", type=float, default=0.02)
    gen.add_argument("--smoothness", type=int, default=6)
    gen.add_argument(
        "--coupling", type=_parse_couplings, default=((0, 1, 0.9),),
        help="comma-separated leader:follower:probability triples",
    )
    gen.set_defaults(func=_cmd_gen_data)

    tr = sub.add_parser("train", help="train a model and write a run directory")
    tr.add_argument("--corpus")
    tr.add_argument("--out", required=True, help="run directory")
    tr.add_argument("--label-ratio", type=float, default=1.0)
    tr.add_argument("--sample-mode", choices=["strided", "contiguous"], default="strided")
    tr.add_argument("--clip-len", type=int, default=None)
    tr.add_argument("--epochs", type=int, default=None)
    tr.add_argument("--batch-size", type=int, default=None)
    tr.add_argument("--lr", type=float, default=None)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--ablate", choices=sorted(ABLATE_CHOICES), default="none")
    tr.add_argument(
        "--kl-direction", choices=["ensemble_to_student", "student_to_ensemble"],
        default=None,
    )
    tr.add_argument("--config", help="YAML config file (hyper/model sections)")
    tr.add_argument("--from-manifest", help="replay a previous run's manifest.json")
    tr.add_argument("--checkpoint-every", type=int, default=0)
    _add_config_flags(tr)
    tr.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out", help="per-AU F1 CSV")
    ev.set_defaults(func=_cmd_eval)

    ab = sub.add_parser("ablate", help="component ablation table")
    ab.add_argument("--corpus", required=True)
    ab.add_argument("--ratio", type=float, default=0.05)
    ab.add_argument("--seeds", type=lambda s: [int(v) for v in s.split(",")], default=[0, 1, 2])
    ab.add_argument("--epochs", type=int, default=None)
    ab.add_argument("--batch-size", type=int, default=None)
    ab.add_argument("--lr", type=float, default=None)
    ab.add_argument("--clip-len", type=int, default=None)
    ab.add_argument("--kl-direction", default=None)
    ab.add_argument("--config")
    ab.add_argument("--out", help="CSV output path")
    _add_config_flags(ab)
    ab.set_defaults(func=_cmd_ablate)

    sw = sub.add_parser("sweep", help="label-budget sweep")
    sw.add_argument("--corpus", required=True)
    sw.add_argument("--ratios", type=_parse_float_list, required=True)
    sw.add_argument("--modes", type=_parse_str_list, default=["strided"])
    sw.add_argument("--seed", type=int, default=0)
    sw.add_argument("--epochs", type=int, default=None)
    sw.add_argument("--batch-size", type=int, default=None)
    sw.add_argument("--lr", type=float, default=None)
    sw.add_argument("--clip-len", type=int, default=None)
    sw.add_argument("--kl-direction", default=None)
    sw.add_argument("--config")
    sw.add_argument("--out", help="CSV output path")
    sw.add_argument("--plot", help="optional PNG path for the F1 curve")
    _add_config_flags(sw)
    sw.set_defaults(func=_cmd_sweep)

    cov = sub.add_parser("coverage", help="unique-label coverage statistics")
    cov.add_argument("--corpus", required=True)
    cov.add_argument("--ratios", type=_parse_float_list, required=True)
    cov.add_argument("--modes", type=_parse_str_list, default=["strided", "contiguous"])
    cov.add_argument("--out", help="CSV output path")
    cov.add_argument("--plot", help="optional PNG path for the coverage curve")
    cov.set_defaults(func=_cmd_coverage)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    torch.set_num_threads(1)  # bit-identical replays regardless of host cores
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except (GenerationError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted; latest checkpoint preserved", file=sys.stderr)
        return 130


if __name__ == "__main__":
    raise SystemExit(main())
