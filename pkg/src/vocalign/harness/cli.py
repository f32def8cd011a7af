"""Command-line entry point: ``vocalign <subcommand> ...``.

Failures exit nonzero and print one JSON line ``{"error": ..., "message": ...}`` on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..adaptation import AdaptConfig, run_adaptation, write_metrics_csv
from ..checkpoint import load_checkpoint, save_checkpoint
from ..vocab_align import load_concepts
from .data import SyntheticDatasetSpec, default_spec, generate_synthetic_domains, load_spec, load_split, save_domains
from .experiments import (
    PretrainConfig,
    desk_config,
    evaluate,
    ladder_csv,
    pretrain_source,
    run_ablation_ladder,
    run_topk_sweep,
    sweep_csv,
)

SPLIT_ALIASES = {"val": "target_val", "train": "target_train"}


def _load_splits(data_dir):
    return {name: load_split(data_dir, name) for name in ("source", "source_val", "target_train", "target_val")}


def _adapt_config(path) -> AdaptConfig:
    """Desk preset, with any keys from ``path`` layered on top."""
    if path is None:
        return desk_config()
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    desk = desk_config().to_dict()
    unknown = sorted(set(raw) - set(desk))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    return AdaptConfig.from_dict({**desk, **raw})


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def cmd_gen_data(args) -> None:
    spec = SyntheticDatasetSpec.from_json(args.spec) if args.spec else default_spec()
    save_domains(generate_synthetic_domains(spec, args.seed), spec, args.out, args.seed)


def cmd_pretrain(args) -> None:
    config = PretrainConfig.from_json(args.config) if args.config else PretrainConfig()
    spec = load_spec(args.data)
    ckpt, history = pretrain_source(load_split(args.data, "source"), spec.source_vocab(), config)
    ckpt.meta["epoch_loss"] = history
    save_checkpoint(ckpt, args.out)


def cmd_adapt(args) -> None:
    config = _adapt_config(args.config)
    spec = load_spec(args.data)
    concepts = args.concepts or config.concepts_path
    cm = load_concepts(concepts) if concepts else None
    target = load_split(args.data, "target_train")
    adapted, history = run_adaptation(load_checkpoint(args.checkpoint), list(target.images),
                                      spec.target_vocab(), cm, config)
    save_checkpoint(adapted, args.out)
    if args.metrics:
        write_metrics_csv(history, args.metrics)


def cmd_eval(args) -> None:
    split = SPLIT_ALIASES.get(args.split, args.split)
    spec = load_spec(args.data)
    vocab = spec.source_vocab() if split.startswith("source") else spec.target_vocab()
    ckpt = load_checkpoint(args.checkpoint)
    use = args.use if (ckpt.teacher_adapters is not None or args.use == "student") else "student"
    report = evaluate(ckpt, load_split(args.data, split), vocab, use=use)
    report.config = {"checkpoint": str(args.checkpoint), "split": split, "adapters": use,
                     "classes": list(vocab.classes)}
    report.seed = ckpt.meta.get("adapt_config", {}).get("seed")
    text = json.dumps(report.to_dict(), indent=2) + "\n"
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_ablate(args) -> None:
    spec = load_spec(args.data)
    rows = run_ablation_ladder(load_checkpoint(args.checkpoint), _load_splits(args.data), spec,
                               _adapt_config(args.config))
    Path(args.out).write_text(ladder_csv(rows, spec.num_classes), encoding="utf-8")


def cmd_sweep_topk(args) -> None:
    spec = load_spec(args.data)
    rows = run_topk_sweep(load_checkpoint(args.checkpoint), _load_splits(args.data), spec,
                          _adapt_config(args.config), _ints(args.ks), _floats(args.random_fractions))
    Path(args.out).write_text(sweep_csv(rows), encoding="utf-8")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vocalign", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="render the synthetic source/target domains")
    s.add_argument("--spec", help="dataset spec JSON (default: built-in desk spec)")
    s.add_argument("--seed", type=int, default=17)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("pretrain", help="train the base model on labeled source images")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("adapt", help="source-free adaptation on unlabeled target images")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--concepts")
    s.add_argument("--out", required=True)
    s.add_argument("--metrics", help="per-iteration CSV")
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("eval", help="mIoU report for one split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="val")
    s.add_argument("--use", choices=("student", "teacher"), default="student")
    s.add_argument("--report")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="run the six-row ablation ladder")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("sweep-topk", help="full method across K values and random fractions")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--ks", required=True)
    s.add_argument("--random-fractions", default="0")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep_topk)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - reported as a single machine-readable line
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                     "command": args.command}) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
