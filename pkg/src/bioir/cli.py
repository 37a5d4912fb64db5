"""Command-line entry point.

One subcommand per pipeline operation plus `pipeline` to run the whole staged
graph from a flat key=value config. Exit codes: 0 success, 2 configuration
error, 3 data error, 4 stage failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import ConfigError, DataError, StageError
from .corpus import (
    UnitKind,
    compute_stats,
    load_corpus,
    load_segments,
    save_segments,
    segment_corpus,
)
from .embedding import HashingEmbedder, provider_from_spec
from .fixture import make_synthetic_fixture
from .fusion_eval import (
    RunList,
    aggregate_documents,
    evaluate_run,
    hybrid_fuse,
    read_qrels,
    read_trec_run,
    write_trec_run,
)
from .lexical import DEFAULT_B, DEFAULT_K1, InvertedIndex, build_index, search_bm25
from .pipeline import (
    PipelineConfig,
    extract_templates_from_questions,
    build_pool,
    load_queries,
    load_questions,
    run_pipeline,
)
from .polydpr import (
    DEFAULT_K,
    DenseIndex,
    RetrieverModel,
    TrainConfig,
    build_dense_index,
    grad_check,
    search_dense,
    train,
)
from .pretrain import (
    DEFAULT_ETM_KEYWORDS,
    DEFAULT_RSM_WORDS,
    TrainingPair,
    build_etm_pairs,
    build_ict_pairs,
    build_rsm_pairs,
    load_pairs,
    save_pairs,
)
from .templates import (
    DEFAULT_CLUSTER_THRESHOLD,
    DEFAULT_DF_THRESHOLD,
    DEFAULT_POOL_SIZE,
    DenseTemplateScorer,
    EntityLexicon,
    LexicalTemplateScorer,
    build_tempqg_pairs,
    fill_template,
    load_pool,
    load_templates,
    save_pool,
    save_templates,
    select_templates,
)
from .corpus import write_jsonl

log = logging.getLogger("bioir")


def _abbreviations(path: str | None):
    if path is None:
        return None
    with open(path, "r", encoding="utf-8") as fh:
        return frozenset(line.strip().lower() for line in fh if line.strip())


def cmd_segment(args) -> None:
    docs = load_corpus(args.corpus)
    segments = segment_corpus(
        docs,
        UnitKind.parse(args.unit),
        token_budget=args.token_budget,
        include_title=args.include_title,
        abbreviations=_abbreviations(args.abbreviations),
    )
    save_segments(args.out, segments)
    print(f"wrote {len(segments)} segments to {args.out}")


def cmd_stats(args) -> None:
    if bool(args.corpus) == bool(args.segments):
        raise ConfigError("pass exactly one of --corpus or --segments")
    units = load_corpus(args.corpus) if args.corpus else load_segments(args.segments)
    stats = compute_stats(units)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(stats.to_json())
        fh.write("\n")
    print(
        f"{stats.num_docs} units, {len(stats.doc_freq)} distinct terms, "
        f"mean length {stats.avg_doc_len:.2f} tokens"
    )


def cmd_build_bm25(args) -> None:
    index = build_index(load_segments(args.segments), k1=args.k1, b=args.b)
    index.save(args.out)
    print(f"indexed {index.num_segments} segments ({len(index.postings)} terms)")


def cmd_search_bm25(args) -> None:
    index = InvertedIndex.load(args.index)
    runs = []
    for qid, text in load_queries(args.queries):
        runs.append(RunList(qid, search_bm25(index, text, args.top_k), method=args.tag))
    write_trec_run(args.out, runs)
    print(f"wrote runs for {len(runs)} queries to {args.out}")


def cmd_gen_pretrain(args) -> None:
    docs = load_corpus(args.corpus)
    if args.task == "ict":
        pairs, skipped = build_ict_pairs(docs, seed=args.seed)
    else:
        stats = compute_stats(docs)
        if args.task == "etm":
            pairs, skipped = build_etm_pairs(docs, stats, m=args.m or DEFAULT_ETM_KEYWORDS)
        else:
            pairs, skipped = build_rsm_pairs(
                docs, stats,
                m=args.m or DEFAULT_RSM_WORDS,
                etm_m=args.etm_m,
            )
    save_pairs(args.out, pairs)
    print(f"{args.task}: {len(pairs)} pairs, {skipped} skipped")


def cmd_extract_templates(args) -> None:
    questions = load_questions(args.questions)
    lexicon = EntityLexicon.load(args.lexicon)
    templates = extract_templates_from_questions(questions, lexicon, args.df_threshold)
    save_templates(args.out, templates)
    n_blanked = sum(1 for t in templates if t.blank_count)
    print(f"extracted {len(templates)} templates ({n_blanked} with blanks)")


def cmd_cluster_templates(args) -> None:
    templates = load_templates(args.templates)
    pool = build_pool(templates, args.threshold, args.representative == "second")
    save_pool(args.out, pool)
    print(f"{len(templates)} templates -> {len(pool)} clusters")


def _make_engine(args):
    if args.engine == "lexical":
        return LexicalTemplateScorer()
    model = RetrieverModel.load(args.model)
    provider = provider_from_spec(model.provenance.get("embedder", {}), args.vectors)
    return DenseTemplateScorer(provider, model.codes, model.projection)


def cmd_gen_questions(args) -> None:
    segments = load_segments(args.segments)
    pool = load_pool(args.pool)
    lexicon = EntityLexicon.load(args.lexicon)
    engine = _make_engine(args)
    rows = []
    for seg in segments:
        for tpl in select_templates(seg.text, pool, engine, args.n_templates):
            question = fill_template(tpl, seg.text, lexicon)
            if question is not None:
                rows.append(
                    {"question": question, "segment_id": seg.segment_id, "doc_id": seg.doc_id}
                )
    write_jsonl(args.out, rows)
    print(f"generated {len(rows)} questions over {len(segments)} segments")


def cmd_build_tempqg(args) -> None:
    pairs = build_tempqg_pairs(
        load_segments(args.segments),
        load_pool(args.pool),
        _make_engine(args),
        EntityLexicon.load(args.lexicon),
        n_templates=args.n_templates,
    )
    save_pairs(args.out, pairs)
    print(f"wrote {len(pairs)} question/context pairs")


def _training_provider(args):
    if args.embedder == "hashing":
        return HashingEmbedder(dim=args.dim, seed=args.embed_seed, n_hash=args.n_hash)
    if not args.vectors:
        raise ConfigError("--embedder file requires --vectors")
    return provider_from_spec({"kind": "file", "path": args.vectors})


def cmd_train(args) -> None:
    provider = _training_provider(args)
    model = RetrieverModel.initialize(
        args.k, provider.dimension, args.seed, provenance={"embedder": provider.spec()}
    )
    pairs = load_pairs(args.pairs)
    pre = load_pairs(args.pretrain_pairs) if args.pretrain_pairs else None
    config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        seed=args.seed,
        schedule=args.schedule,
    )
    trained = train(pairs, provider, model, config, pretrain_pairs=pre)
    trained.save(args.out)
    losses = trained.provenance.get("epoch_losses", [])
    tail = f", final loss {losses[-1]:.4f}" if losses else ""
    print(f"trained on {len(pairs)} pairs ({args.epochs} epochs{tail}); model -> {args.out}")


def _random_pairs(rng: np.random.Generator, batch_size: int) -> list[TrainingPair]:
    def text(lo, hi):
        n = int(rng.integers(lo, hi + 1))
        return " ".join(f"tok{int(rng.integers(0, 50))}" for _ in range(n))

    return [
        TrainingPair(text(3, 6), text(5, 12), "Supervised", f"g{i}")
        for i in range(batch_size)
    ]


def cmd_grad_check(args) -> None:
    rng = np.random.default_rng(args.seed)
    provider = HashingEmbedder(dim=args.dim, seed=args.embed_seed, n_hash=args.n_hash)
    worst = 0.0
    for b in range(args.batches):
        model = RetrieverModel.initialize(args.k, args.dim, int(rng.integers(0, 2**31)))
        batch = _random_pairs(rng, args.batch_size)
        errors = grad_check(model, provider, batch, epsilon=args.epsilon)
        worst = max(worst, *errors.values())
        log.info(
            "batch %d: codes %.3e, projection %.3e", b, errors["codes"], errors["projection"]
        )
    verdict = "PASS" if worst < args.tolerance else "FAIL"
    print(
        f"max relative gradient error {worst:.3e} over {args.batches} batches "
        f"(tolerance {args.tolerance:g}): {verdict}"
    )
    if verdict == "FAIL":
        raise StageError("grad-check", f"gradient error {worst:.3e} >= {args.tolerance:g}")


def _search_provider(model: RetrieverModel, vectors: str | None):
    base = provider_from_spec(model.provenance.get("embedder", {}), vectors)
    return base, model.query_provider(base)


def cmd_build_dense(args) -> None:
    model = RetrieverModel.load(args.model)
    base, _ = _search_provider(model, args.vectors)
    index = build_dense_index(load_segments(args.segments), base, model.codes)
    index.save(args.out)
    print(f"indexed {len(index.entries)} segments (K={index.k}, d={index.d})")


def cmd_search_dense(args) -> None:
    model = RetrieverModel.load(args.model)
    _, wrapped = _search_provider(model, args.vectors)
    index = DenseIndex.load(args.index)
    runs = []
    for qid, text in load_queries(args.queries):
        runs.append(RunList(qid, search_dense(index, text, wrapped, args.top_k), method=args.tag))
    write_trec_run(args.out, runs)
    print(f"wrote runs for {len(runs)} queries to {args.out}")


def cmd_hybrid(args) -> None:
    bm25_runs = read_trec_run(args.bm25_run)
    dense_runs = read_trec_run(args.dense_run)
    fused = []
    for qid in sorted(set(bm25_runs) | set(dense_runs)):
        left = bm25_runs.get(qid, RunList(qid, [], method="bm25"))
        right = dense_runs.get(qid, RunList(qid, [], method="dense"))
        fused.append(hybrid_fuse(left, right))
    write_trec_run(args.out, fused)
    print(f"fused {len(fused)} queries to {args.out}")


def cmd_aggregate(args) -> None:
    seg_to_doc = {s.segment_id: s.doc_id for s in load_segments(args.segments)}
    runs = read_trec_run(args.run)
    aggregated = [
        aggregate_documents(runs[qid], seg_to_doc, top_n=args.top_n) for qid in sorted(runs)
    ]
    write_trec_run(args.out, aggregated)
    print(f"aggregated {len(aggregated)} queries to document level")


def cmd_eval(args) -> None:
    report = evaluate_run(read_trec_run(args.run), read_qrels(args.qrels), cutoff=args.cutoff)
    if args.out:
        report.save(args.out)
    skipped = f" ({len(report.skipped_queries)} skipped)" if report.skipped_queries else ""
    print(
        f"MAP@{report.cutoff} {report.map:.4f}  recall@{report.cutoff} {report.recall:.4f}  "
        f"over {report.num_queries} queries{skipped}"
    )


def cmd_fixture(args) -> None:
    paths = make_synthetic_fixture(
        args.out_dir, seed=args.seed, n_docs=args.n_docs, vocab_size=args.vocab_size
    )
    print(f"fixture written under {args.out_dir}")
    for name in ("corpus", "queries", "qrels", "train_questions", "lexicon"):
        print(f"  {name}: {getattr(paths, name)}")


def cmd_pipeline(args) -> None:
    config = PipelineConfig.from_file(args.config, overrides=args.set)
    if args.seed is not None:
        config.seed = args.seed
    report, outcomes = run_pipeline(config)
    for outcome in outcomes:
        print(f"stage {outcome.name}: {'cached' if outcome.cached else 'ran'}")
    print(
        f"MAP@{report.cutoff} {report.map:.4f}  recall@{report.cutoff} {report.recall:.4f}  "
        f"over {report.num_queries} queries"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bioir",
        description="Desk-scale biomedical retrieval workbench",
    )
    parser.add_argument("--config", help="pipeline config file (used by the pipeline command)")
    parser.add_argument("--seed", type=int, default=None, help="seed for seeded commands")
    parser.add_argument("--verbose", action="store_true", help="chatty logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="cut a corpus into index units")
    p.add_argument("--corpus", required=True)
    p.add_argument("--unit", default="two_sent",
                   choices=[k.value for k in UnitKind])
    p.add_argument("--token-budget", type=int, default=None)
    p.add_argument("--include-title", action="store_true")
    p.add_argument("--abbreviations", default=None,
                   help="file of sentence-split guard tokens, one per line")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_segment)

    p = sub.add_parser("stats", help="term statistics over documents or segments")
    p.add_argument("--corpus")
    p.add_argument("--segments")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("build-bm25", help="build the lexical index")
    p.add_argument("--segments", required=True)
    p.add_argument("--k1", type=float, default=DEFAULT_K1)
    p.add_argument("--b", type=float, default=DEFAULT_B)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_build_bm25)

    p = sub.add_parser("search-bm25", help="run queries against the lexical index")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--top-k", type=int, default=100)
    p.add_argument("--tag", default="bm25", help="run tag written to the output file")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_search_bm25)

    p = sub.add_parser("gen-pretrain", help="generate self-supervised training pairs")
    p.add_argument("--task", required=True, choices=["etm", "rsm", "ict"])
    p.add_argument("--corpus", required=True)
    p.add_argument("--m", type=int, default=None,
                   help="keyword/word count (task default when omitted)")
    p.add_argument("--etm-m", type=int, default=DEFAULT_ETM_KEYWORDS,
                   help="expanded-title keyword count used by the rsm positive side")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_pretrain)

    p = sub.add_parser("extract-templates", help="blank rare entities out of questions")
    p.add_argument("--questions", required=True)
    p.add_argument("--lexicon", required=True)
    p.add_argument("--df-threshold", type=int, default=DEFAULT_DF_THRESHOLD)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_extract_templates)

    p = sub.add_parser("cluster-templates", help="cluster templates and pick representatives")
    p.add_argument("--templates", required=True)
    p.add_argument("--threshold", type=float, default=DEFAULT_CLUSTER_THRESHOLD)
    p.add_argument("--representative", choices=["smallest", "second"], default="smallest")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_cluster_templates)

    def engine_args(p):
        p.add_argument("--engine", choices=["lexical", "dense"], default="lexical")
        p.add_argument("--model", help="model file (dense engine)")
        p.add_argument("--vectors", help="vector file when the model used a file provider")
        p.add_argument("--n-templates", type=int, default=DEFAULT_POOL_SIZE)

    p = sub.add_parser("gen-questions", help="fill templates against segments")
    p.add_argument("--segments", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--lexicon", required=True)
    engine_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_questions)

    p = sub.add_parser("build-tempqg", help="generate question/context training pairs")
    p.add_argument("--segments", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--lexicon", required=True)
    engine_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_build_tempqg)

    p = sub.add_parser("train", help="train codes and query projection with SGD")
    p.add_argument("--pairs", required=True)
    p.add_argument("--pretrain-pairs", default=None)
    p.add_argument("--schedule", choices=["sequential", "multitask"], default="sequential")
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--embedder", choices=["hashing", "file"], default="hashing")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--embed-seed", type=int, default=13)
    p.add_argument("--n-hash", type=int, default=8)
    p.add_argument("--vectors", default=None)
    p.add_argument("--epochs", type=int, default=120)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--learning-rate", type=float, default=2.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("grad-check", help="analytic vs central-difference gradients")
    p.add_argument("--batches", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--k", type=int, default=6)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--embed-seed", type=int, default=13)
    p.add_argument("--n-hash", type=int, default=8)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("build-dense", help="encode segments into the dense index")
    p.add_argument("--segments", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--vectors", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_build_dense)

    p = sub.add_parser("search-dense", help="run queries against the dense index")
    p.add_argument("--index", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--vectors", default=None)
    p.add_argument("--top-k", type=int, default=100)
    p.add_argument("--tag", default="dense", help="run tag written to the output file")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_search_dense)

    p = sub.add_parser("hybrid", help="fuse lexical and dense runs")
    p.add_argument("--bm25-run", required=True)
    p.add_argument("--dense-run", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_hybrid)

    p = sub.add_parser("aggregate", help="roll segment runs up to documents")
    p.add_argument("--run", required=True)
    p.add_argument("--segments", required=True)
    p.add_argument("--top-n", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_aggregate)

    p = sub.add_parser("eval", help="MAP and recall against qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--cutoff", type=int, default=10)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("fixture", help="write the synthetic evaluation fixture")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-docs", type=int, default=200)
    p.add_argument("--vocab-size", type=int, default=120)
    p.set_defaults(fn=cmd_fixture)

    p = sub.add_parser("pipeline", help="run the staged pipeline from a config file")
    p.add_argument("--config", default=argparse.SUPPRESS,
                   help="pipeline config file (same as the global flag)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.set_defaults(fn=cmd_pipeline)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.seed is None and args.command in ("fixture", "gen-pretrain", "grad-check", "train"):
        args.seed = 1 if args.command == "fixture" else 0
    if args.command == "pipeline" and not args.config:
        print("config error: pipeline requires --config", file=sys.stderr)
        return 2
    try:
        args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except StageError as exc:
        print(f"{exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
