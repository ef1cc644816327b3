"""
Command-line interface.

    gen-corpus   write a deterministic synthetic corpus
    train        fit a model (resumable, --override section.key=value)
    synthesize   feature file(s) -> WAV + mel cache + attention alignment
    evaluate     decode a split, transcribe and score B1 B2 B3 B4 M R C
    sweep        ablation runs (EC on/off, feature source, sampling floor)

Exit codes: 0 success, 1 runtime/data failure, 2 configuration error.
"""

import argparse
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from caption_metrics import METRIC_COLUMNS, MetricReport
from config import load_run_config
from corpus import generate_synthetic_corpus, load_manifest
from errors import ConfigurationError, SASError
from evaluation import (TranscriberManager, evaluate, format_report_table, write_evaluation,
                        write_transcripts)
from synthesis import synthesize_batch
from trainer import fit, load_model
from utils import console_progress, write_json


SWEEPS = {
    "ec": [("SAS w/o EC", ["trainer.lambda_ec=0"]), ("SAS", [])],
    "features": [("Baseline grid", ["trainer.feature_mode=baseline-grid"]), ("Bottom-up", [])],
    "eps": [(f"eps_min={eps}", [f"trainer.eps_min={eps}"]) for eps in (100.0, 99.0, 97.5, 95.0, 92.5, 90.0)],
    "table2": [
        ("Baseline", ["trainer.feature_mode=baseline-grid", "trainer.lambda_ec=0"]),
        ("SAS w/o EC", ["trainer.lambda_ec=0"]),
        ("SAS", []),
    ],
}


def cmd_gen_corpus(args: argparse.Namespace) -> int:
    config = load_run_config(args.config, args.override or ())
    corpus_cfg = config.corpus
    manifest = generate_synthetic_corpus(
        out_dir=Path(args.out or config.paths.data_dir),
        seed=corpus_cfg.seed if args.seed is None else args.seed,
        vocab_size=corpus_cfg.vocab_size if args.vocab_size is None else args.vocab_size,
        n_images=corpus_cfg.n_images if args.images is None else args.images,
        captions_per_image=(corpus_cfg.captions_per_image if args.captions_per_image is None
                            else args.captions_per_image),
        split_fractions=corpus_cfg.split_fractions if args.split_fractions is None else args.split_fractions,
        frames_per_token=corpus_cfg.frames_per_token if args.frames_per_token is None else args.frames_per_token,
        noise_std=corpus_cfg.noise_std if args.noise_std is None else args.noise_std,
        feature_dim=corpus_cfg.feature_dim if args.feature_dim is None else args.feature_dim,
        audio_config=config.audio,
        progress_callback=None if args.quiet else console_progress,
    )
    print(manifest.root / "manifest.json")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = load_run_config(args.config, args.override or ())
    manifest = load_manifest(Path(args.data or config.paths.data_dir))
    result = fit(manifest, config, Path(args.out or config.paths.out_dir),
                 resume=Path(args.resume) if args.resume else None,
                 progress_callback=None if args.quiet else console_progress,
                 show_progress=not args.quiet)
    print(result["final_checkpoint"])
    return 0


def cmd_synthesize(args: argparse.Namespace) -> int:
    model, _ = load_model(Path(args.checkpoint), args.device)
    features = Path(args.features)
    if not features.exists():
        raise ConfigurationError(f"features not found: {features}")
    result = synthesize_batch(model, features, Path(args.out),
                              progress_callback=None if args.quiet else console_progress)
    if result["success_count"] == 0 and result["failure_count"] == 0:
        print(f"❌ {result['error']}", file=sys.stderr)
        return 1
    return 0 if result["failure_count"] == 0 else 1


def _evaluate_checkpoint(checkpoint: Path, data: Path, split: str, transcriber_name: str,
                         device: Optional[str], quiet: bool) -> Dict:
    model, _ = load_model(checkpoint, device)
    manifest = load_manifest(data)
    manager = TranscriberManager(bank=manifest.load_bank())
    transcriber = manager.create(transcriber_name)
    return evaluate(model, manifest, split, transcriber,
                    progress_callback=None if quiet else console_progress)


def cmd_evaluate(args: argparse.Namespace) -> int:
    result = _evaluate_checkpoint(Path(args.checkpoint), Path(args.data), args.split,
                                  args.transcriber, args.device, args.quiet)
    out_dir = Path(args.out)
    write_evaluation(result, out_dir / "evaluation.json")
    write_transcripts(result, out_dir / "transcripts.txt")
    print(MetricReport.header())
    print(result["report"].as_row())
    return 0 if result["failure_count"] == 0 else 1


def _mean_report(reports: Sequence[MetricReport]) -> MetricReport:
    return MetricReport(**{name: sum(getattr(r, name) for r in reports) / len(reports)
                           for name in METRIC_COLUMNS})


def cmd_sweep(args: argparse.Namespace) -> int:
    base_overrides = list(args.override or ())
    load_run_config(args.config, base_overrides)  # fail fast on a bad base config
    data = Path(args.data)
    out_dir = Path(args.out)
    rows: List[Dict] = []
    failures = 0

    for label, variant in SWEEPS[args.kind]:
        reports = []
        for seed in args.seeds:
            run_name = f"{args.kind}_{len(rows):02d}_seed{seed}"
            config = load_run_config(args.config, base_overrides + variant + [f"trainer.seed={seed}"])
            console_progress(f"🚀 {label} (seed {seed}) -> {out_dir / run_name}")
            trained = fit(load_manifest(data), config, out_dir / run_name,
                          progress_callback=None if args.quiet else console_progress,
                          show_progress=not args.quiet)
            result = _evaluate_checkpoint(Path(trained["final_checkpoint"]), data, args.split,
                                          args.transcriber, None, args.quiet)
            write_evaluation(result, out_dir / run_name / "evaluation.json")
            failures += result["failure_count"]
            reports.append(result["report"])
        rows.append({"label": label, "overrides": variant, "seeds": list(args.seeds),
                     "report": _mean_report(reports),
                     "per_seed": [r.as_dict() for r in reports]})

    write_json(out_dir / "sweep.json", [
        {**{k: v for k, v in row.items() if k != "report"}, "report": row["report"].as_dict()} for row in rows])
    print(format_report_table(rows))
    return 0 if failures == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sas", description="Image-to-speech toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, with_config: bool = True) -> None:
        if with_config:
            p.add_argument("--config", type=Path, default=None, help="TOML run config")
            p.add_argument("--override", action="append", metavar="SECTION.KEY=VALUE",
                           help="override a config value (repeatable)")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")

    p = sub.add_parser("gen-corpus", help="generate the synthetic corpus")
    common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--images", type=int)
    p.add_argument("--captions-per-image", type=int)
    p.add_argument("--split-fractions", type=float, nargs=3, metavar=("TRAIN", "DEV", "TEST"))
    p.add_argument("--frames-per-token", type=int)
    p.add_argument("--noise-std", type=float)
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--data", type=Path, help="corpus directory or manifest.json")
    p.add_argument("--out", type=Path, help="run directory")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", help="synthesize speech from feature files")
    common(p, with_config=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--features", type=Path, required=True, help=".sasrf file or directory")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--device", default=None)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", help="score a checkpoint on a corpus split")
    common(p, with_config=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--transcriber", default="auto", choices=["auto", "template", "oracle", "empty"])
    p.add_argument("--device", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="run an ablation sweep")
    common(p)
    p.add_argument("--kind", choices=sorted(SWEEPS), required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--seeds", type=int, nargs="+", default=[1])
    p.add_argument("--transcriber", default="auto", choices=["auto", "template", "oracle", "empty"])
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as e:
        print(f"❌ Configuration error: {e}", file=sys.stderr)
        return 2
    except SASError as e:
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"❌ I/O error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
