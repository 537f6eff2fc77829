"""Command-line entry point: ``tocextract {synth,train,evaluate,predict,inspect,ablate}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .core import DataError
from .data import SyntheticSpec, load_corpus, load_document, synthesize_corpus
from .encoder import FUSIONS, MODALITIES
from .treeops import steps_to_json

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("tocextract")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_mask(text: str) -> tuple[str, ...]:
    if text in ("", "none"):
        return ()
    if text == "all":
        return MODALITIES
    parts = tuple(p.strip() for p in text.split(",") if p.strip())
    bad = [p for p in parts if p not in MODALITIES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown modality {bad[0]!r} "
                                         f"(choose from {', '.join(MODALITIES)}, all, none)")
    return parts


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value training config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config entry (repeatable), e.g. model.d=64")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--mask", type=_parse_mask,
                   help="modalities to drop: comma list of vision,text,layout, or all/none")
    p.add_argument("--fusion", choices=FUSIONS)
    p.add_argument("--decoding", choices=("tree", "depth"),
                   help="tree decoder or the depth-class baseline")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tocextract", description="Table-of-contents extraction from paged "
                     "documents with a multimodal tree decoder.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a seeded synthetic corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-docs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--start-index", type=int, default=0)
    p.add_argument("--split-prob", type=float)
    p.add_argument("--depth", type=int, nargs=2, metavar=("MIN", "MAX"))

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", type=Path, required=True, help="training corpus directory")
    p.add_argument("--eval-data", type=Path, help="held-out corpus for model selection")
    p.add_argument("--out", type=Path, required=True, help="output directory for checkpoints")
    _add_model_flags(p)

    p = sub.add_parser("evaluate", help="score a checkpoint on an annotated corpus")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, help="directory for report.json and plots")
    p.add_argument("--plots", action="store_true", help="write score histograms")

    p = sub.add_parser("predict", help="extract the ToC of one document")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--doc", type=Path, required=True, help="document directory")
    p.add_argument("--out", type=Path, help="write the prediction as JSON here")
    p.add_argument("--trace", type=Path, help="write the attention trace as JSON lines here")

    p = sub.add_parser("inspect", help="show per-step decoder attention for one document")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--doc", type=Path, required=True)
    p.add_argument("--trace", type=Path, help="write the attention trace as JSON lines here")
    p.add_argument("--heatmap", type=Path, help="write an attention heatmap image here")

    p = sub.add_parser("ablate", help="train every modality-mask / fusion / decoding variant")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--eval-data", type=Path, required=True)
    p.add_argument("--groups", default="mask,fusion,decoding")
    p.add_argument("--out", type=Path, help="write the comparison table here")
    _add_model_flags(p)
    return parser


def _training_config(args):
    from .training import TrainingConfig, apply_overrides, load_config
    try:
        config = load_config(args.config) if args.config else TrainingConfig()
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from exc
    except (KeyError, ValueError) as exc:
        raise UsageError(f"{args.config}: {exc}") from exc
    pairs = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    try:
        config = apply_overrides(config, pairs)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    top = {k: v for k, v in (("seed", args.seed), ("epochs", args.epochs)) if v is not None}
    model = {k: v for k, v in (("mask", args.mask), ("fusion", args.fusion),
                               ("decoding", args.decoding)) if v is not None}
    return dataclasses.replace(config, model=dataclasses.replace(config.model, **model), **top)


def _write_trace(trace, path: Path) -> None:
    with open(path, "w") as fh:
        for rec in trace.to_records():
            fh.write(json.dumps(rec) + "\n")


def cmd_synth(args) -> int:
    kw = {"seed": args.seed, "n_docs": args.n_docs, "start_index": args.start_index}
    if args.split_prob is not None:
        kw["split_prob"] = args.split_prob
    if args.depth:
        kw["depth_range"] = tuple(args.depth)
    try:
        spec = SyntheticSpec(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    records = synthesize_corpus(spec, args.out)
    print(f"wrote {len(records)} documents to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import dump_config, train
    config = _training_config(args)
    train_records = load_corpus(args.data)
    eval_records = load_corpus(args.eval_data) if args.eval_data else None
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.txt").write_text(dump_config(config))

    def progress(row):
        shown = {k: round(v, 4) if isinstance(v, float) else v for k, v in row.items()}
        print(json.dumps(shown), flush=True)

    result = train(config, train_records, eval_records, out_dir=args.out, progress=progress)
    (args.out / "history.json").write_text(json.dumps(result.history, indent=1))
    print(f"best epoch {result.best_epoch}; checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .training import evaluate, load_checkpoint
    model, _, _ = load_checkpoint(args.checkpoint)
    records = load_corpus(args.data)
    report = evaluate(model, records)
    print(report.to_table())
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "report.json").write_text(report.to_json())
        if args.plots:
            from .plots import score_histogram
            score_histogram(report, args.out / "scores.png")
    return EXIT_OK


def _predict_one(args, trace: bool):
    from .training import load_checkpoint, predict
    model, _, _ = load_checkpoint(args.checkpoint)
    doc = load_document(args.doc, images=model.uses_vision)
    return doc, predict(model, doc, trace=trace)


def cmd_predict(args) -> int:
    doc, pred = _predict_one(args, trace=args.trace is not None)
    out = {"doc_id": pred.doc_id,
           "headings": [{"doc_order": doc.entities[i].doc_order,
                         "content": doc.entities[i].content} for i in pred.heading_rows],
           "steps": steps_to_json(pred.steps),
           "toc": pred.tree.to_dict()}
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(out, indent=1) + "\n")
    if args.trace and pred.trace is not None:
        _write_trace(pred.trace, args.trace)
    print(pred.tree.outline() or "(no headings detected)")
    return EXIT_OK


def cmd_inspect(args) -> int:
    doc, pred = _predict_one(args, trace=True)
    labels = [doc.entities[i].content for i in pred.heading_rows]
    for rec, step in zip(pred.trace.to_records(), pred.steps):
        ref = "<root>" if step.reference == 0 else labels[step.reference - 1]
        energies = " ".join(f"{e:+.2f}" for e in rec["energies"])
        print(f"[{step.current:>3}] {labels[step.current - 1][:40]:<40} "
              f"-> {step.relation.value:<8} of {ref[:30]!r}   energies: {energies}")
    if args.trace:
        _write_trace(pred.trace, args.trace)
    if args.heatmap:
        from .plots import attention_heatmap
        attention_heatmap(pred.trace, labels, args.heatmap, title=pred.doc_id)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import format_table, run_ablation
    config = _training_config(args)
    groups = [g.strip() for g in args.groups.split(",") if g.strip()]
    bad = set(groups) - {"mask", "fusion", "decoding"}
    if bad:
        raise UsageError(f"unknown ablation group(s): {', '.join(sorted(bad))}")
    rows = run_ablation(config, load_corpus(args.data), load_corpus(args.eval_data), groups,
                        progress=lambda r: print(f"{r.group}/{r.name}: TEDS {r.teds:.4f}",
                                                 flush=True))
    table = format_table(rows)
    print(table)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(table + "\n")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "evaluate": cmd_evaluate,
            "predict": cmd_predict, "inspect": cmd_inspect, "ablate": cmd_ablate}


def main(argv: Optional[Sequence[str]] = None) -> int:
    from .training import TrainingDiverged
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"tocextract: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"tocextract: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        where = f" (last good checkpoint: {exc.checkpoint})" if exc.checkpoint else ""
        print(f"tocextract: training diverged: {exc}{where}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
