"""Command-line interface: validate, split, features, run, eval, plots."""

import argparse
import json
import sys
from pathlib import Path

from .corpus import (CorpusError, LabelMapping, extract_instance_labels,
                     gold_labels_for_corpus, load_collection, make_splits,
                     write_split_manifest)
from .evaluate import EvalError, agreement, delta_bc, micro_f1, purity
from .features import FeatureError, char_ngram_features
from .pipeline import (ConfigError, PipelineError, StageError, load_config,
                       load_report, emit_plots, run_pipeline, validate_config)
from .predictions import PredictionError, PredictionSet

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_STAGE = 3


def cmd_validate(args) -> int:
    corpus = load_collection(args.manifest)
    mapping = LabelMapping.from_json(args.mapping) if args.mapping else None
    genres = set()
    for tb in corpus:
        genres.update(tb.metadata_genres)
        line = (f"{tb.tb_id}\t{tb.language}\t{tb.n_sentences} sentences\t"
                f"genres: {', '.join(g.value for g in tb.metadata_genres)}")
        if mapping is not None:
            extracted = extract_instance_labels(tb, mapping)
            line += (f"\tlabeled: {len(extracted.labels)}"
                     f"\tunmapped: {len(extracted.unmapped)}")
        print(line)
    print(f"{len(corpus)} treebanks, {corpus.total_sentences} sentences, "
          f"{len(genres)} genres")
    return EXIT_OK


def cmd_split(args) -> int:
    corpus = load_collection(args.manifest)
    split = make_splits(corpus, train_frac=args.train_frac,
                        probe_frac=args.probe_frac, seed=args.seed)
    write_split_manifest(split, args.out)
    for name, refs in split.named_sets().items():
        print(f"{name}: {len(refs)}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_features(args) -> int:
    corpus = load_collection(args.manifest)
    refs = corpus.all_refs(None if args.split == "all" else args.split)
    texts = [corpus.sentence(r).text for r in refs]
    vocab, matrix = char_ngram_features(texts, n_min=args.n_min,
                                        n_max=args.n_max, min_df=args.min_df,
                                        max_df_frac=args.max_df_frac)
    out = Path(args.out)
    lines = [f"{ngram}\t{int(df)}" for ngram, df in zip(vocab.entries, vocab.df)]
    out.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    print(f"{len(texts)} documents, {len(vocab.entries)} n-grams, "
          f"{matrix.rows.nnz} nonzeros")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    config_path = Path(args.config)
    raw = load_config(config_path)
    if args.outdir is not None:
        raw["outdir"] = args.outdir
    if args.workers is not None:
        raw["workers"] = args.workers
    if args.cache_dir is not None:
        raw["cache_dir"] = args.cache_dir
    config = validate_config(raw, base_dir=config_path.parent)
    report = run_pipeline(config)
    for m in config.methods:
        agg = report.methods[m]["metrics"]["aggregate"]
        parts = []
        for name in ("delta_bc", "purity", "agreement", "micro_f1"):
            a = agg[name]
            if a["mean"] is None:
                parts.append(f"{name}=n/a")
            else:
                parts.append(f"{name}={a['mean']:.2f}±{a['sd']:.2f}")
        print(f"{m}: " + "  ".join(parts))
    print(f"report: {report.rundir / 'report.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    corpus = load_collection(args.manifest)
    preds = PredictionSet.from_tsv(Path(args.predictions).read_text("utf-8"))
    refs = preds.refs
    try:
        dbc = delta_bc(preds, corpus, refs)
    except EvalError as exc:
        if "no pairs" not in str(exc):
            raise
        dbc = None
    out = {"method": preds.method, "seed": preds.seed, "sentences": len(refs),
           "delta_bc": dbc,
           "purity": purity(preds, corpus, refs),
           "agreement": agreement(preds, corpus, refs),
           "micro_f1": None}
    if args.mapping:
        gold = gold_labels_for_corpus(corpus, LabelMapping.from_json(args.mapping))
        out["micro_f1"] = micro_f1(preds, gold, refs)
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_plots(args) -> int:
    report = load_report(args.report)
    for path in sorted(emit_plots(report)):
        print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="udgenre",
        description="Weakly supervised sentence-level genre labeling for "
                    "CoNLL-U treebank collections.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="parse a collection and print a census")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mapping", help="instance label mapping JSON")
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("split", help="write the probe/dev/test split manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=41)
    p.add_argument("--train-frac", type=float, default=0.10)
    p.add_argument("--probe-frac", type=float, default=0.70)
    p.set_defaults(fn=cmd_split)

    p = sub.add_parser("features",
                       help="build a character n-gram vocabulary TSV")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["train", "dev", "test", "all"],
                   default="all")
    p.add_argument("--n-min", type=int, default=3)
    p.add_argument("--n-max", type=int, default=6)
    p.add_argument("--min-df", type=int, default=2)
    p.add_argument("--max-df-frac", type=float, default=0.30)
    p.set_defaults(fn=cmd_features)

    p = sub.add_parser("run", help="execute a full experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--outdir", help="override the config output directory")
    p.add_argument("--workers", type=int,
                   help="override the config worker count")
    p.add_argument("--cache-dir", help="override the artifact cache directory")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("eval", help="score an existing prediction file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--mapping", help="instance label mapping JSON")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("plots", help="emit plot CSVs from a saved report")
    p.add_argument("--report", required=True)
    p.set_defaults(fn=cmd_plots)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (ConfigError, PipelineError, CorpusError, FeatureError,
            PredictionError, EvalError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    raise SystemExit(main())
