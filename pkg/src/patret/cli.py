"""Operator CLI: ingest -> enrich -> train-demo -> build-index -> evaluate -> serve.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
Every subcommand accepts --json for machine-readable output, and all
randomness flows from explicit --seed flags, so identical invocations
produce identical artifacts.
"""

from __future__ import annotations

import argparse
import json
import os
import socket
import sys
from datetime import date

import numpy as np

from . import __version__
from .config import ConfigError, EngineConfig, load_config
from .enrichment import (
    DEFAULT_TEMPLATES,
    EnrichmentCache,
    HashingTextEmbedder,
    MockModelClient,
    OpenAICompatClient,
    embed_texts,
    enrich_record,
)
from .features import class_prototype_features
from .index import (
    PirvFormatError,
    build_index,
    dump_index,
    load_embeddings,
    load_index,
    query_topk,
    save_embeddings,
)
from .losses import ProjectorWeights, TrainerConfig, train_projector, write_trace_csv
from .metrics import EvalConfig, evaluate
from .records import (
    MetadataError,
    generate_synthetic_corpus,
    ingest_metadata,
    write_metadata,
)


class CliUsageError(ValueError):
    """Operator input problem; maps to exit code 2."""


def _emit(args, human: str, payload: dict) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(human)


def cmd_ingest(args) -> int:
    corpus = ingest_metadata(args.metadata, head_fraction=args.head_fraction)
    dist = corpus.distribution
    if args.out:
        write_metadata(corpus, args.out)
    human = (
        f"{len(corpus)} records, {len(dist.counts)} classes "
        f"({len(dist.head_classes)} head / {len(dist.tail_classes)} tail, "
        f"head fraction {args.head_fraction:g})"
    )
    _emit(
        args,
        human,
        {
            "records": len(corpus),
            "classes": len(dist.counts),
            "head_classes": len(dist.head_classes),
            "tail_classes": len(dist.tail_classes),
            "head_fraction": args.head_fraction,
            "out": args.out,
        },
    )
    return 0


def cmd_synth(args) -> int:
    counts = [int(c) for c in args.counts.split(",") if c.strip()]
    corpus = generate_synthetic_corpus(
        seed=args.seed,
        n_classes=len(counts),
        records_per_class=counts,
        date_range=(date.fromisoformat(args.start), date.fromisoformat(args.end)),
        head_fraction=args.head_fraction,
        query_fraction=args.query_fraction,
    )
    write_metadata(corpus, args.out)
    _emit(
        args,
        f"wrote {len(corpus)} synthetic records over {len(counts)} classes to {args.out}",
        {"records": len(corpus), "classes": len(counts), "out": args.out},
    )
    return 0


def cmd_enrich(args) -> int:
    corpus = ingest_metadata(args.corpus)
    if args.client == "mock":
        client = MockModelClient(seed=args.seed)
    else:
        if not os.environ.get(args.api_key_env, ""):
            raise CliUsageError(
                f"missing credentials: set {args.api_key_env} for --client live"
            )
        client = OpenAICompatClient(
            base_url=args.base_url, model=args.model, api_key_env=args.api_key_env
        )
    cache = EnrichmentCache(args.out)
    fresh = 0
    cached = 0
    for rec in corpus.records:
        enriched = enrich_record(
            rec, client, DEFAULT_TEMPLATES, count_target=args.count_target, cache=cache
        )
        if enriched.provenance == "cached":
            cached += 1
        else:
            fresh += 1
    _emit(
        args,
        f"enriched {fresh} records ({cached} already cached) -> {args.out}",
        {"fresh": fresh, "cached": cached, "out": str(args.out)},
    )
    return 0


def _load_engine_config(path) -> EngineConfig:
    return load_config(path) if path else EngineConfig()


def _features_for(args, corpus, trainer_cfg):
    """Feature matrices for every record, aligned to corpus order."""
    ids = [r.record_id for r in corpus.records]
    if args.image_feats:
        matrix, metadata = load_embeddings(args.image_feats)
        rows = {m[0]: i for i, m in enumerate(metadata)}
        missing = [r for r in ids if r not in rows]
        if missing:
            raise CliUsageError(f"--image-feats lacks rows for {len(missing)} records")
        image_raw = matrix[[rows[r] for r in ids]]
    else:
        image_raw = None

    text_pool = None
    if args.text_feats:
        matrix, metadata = load_embeddings(args.text_feats)
        rows = {m[0]: i for i, m in enumerate(metadata)}
        missing = [r for r in ids if r not in rows]
        if missing:
            raise CliUsageError(f"--text-feats lacks rows for {len(missing)} records")
        text_feats = matrix[[rows[r] for r in ids]]
    elif args.enrichment:
        embedder = HashingTextEmbedder(dim=args.d_text, seed=trainer_cfg.seed)
        texts_by_record = EnrichmentCache(args.enrichment).texts_by_record()
        missing = [r for r in ids if not texts_by_record.get(r)]
        if missing:
            raise CliUsageError(f"enrichment cache lacks texts for {len(missing)} records")
        text_pool = [
            embed_texts(texts_by_record[r], embedder) for r in ids
        ]
        text_feats = np.stack([pool[0] for pool in text_pool])
    else:
        text_feats = None

    if image_raw is None or text_feats is None:
        simulated = class_prototype_features(
            [r.class_id for r in corpus.records],
            d_in=args.d_in,
            d_text=args.d_text,
            image_noise=args.image_noise,
            text_noise=args.text_noise,
            seed=trainer_cfg.seed,
        )
        if image_raw is None:
            image_raw = simulated.image_raw
        if text_feats is None:
            text_feats = simulated.text_feats
    return image_raw, text_feats, text_pool


def cmd_train_demo(args) -> int:
    engine = _load_engine_config(args.config)
    trainer_cfg: TrainerConfig = engine.trainer
    if args.steps is not None:
        trainer_cfg.steps = args.steps
    if args.seed is not None:
        trainer_cfg.seed = args.seed
    if args.learning_rate is not None:
        trainer_cfg.learning_rate = args.learning_rate

    corpus = ingest_metadata(args.corpus)
    image_raw, text_feats, text_pool = _features_for(args, corpus, trainer_cfg)
    train_rows = [i for i, r in enumerate(corpus.records) if r.split == "train"]
    if not train_rows:
        raise CliUsageError("corpus has no train records")
    dist = corpus.distribution
    class_ids = [corpus.records[i].class_id for i in train_rows]
    category_ids = [dist.category_of(c) for c in class_ids]

    result = train_projector(
        image_raw[train_rows],
        text_feats[train_rows],
        class_ids,
        category_ids,
        trainer_cfg,
        text_pool=[text_pool[i] for i in train_rows] if text_pool else None,
    )
    result.weights.save(args.out_weights)
    write_trace_csv(result.trace, args.out_trace)

    def export(rows, path):
        projected = result.weights.apply(image_raw[rows])
        metadata = [
            (
                corpus.records[i].record_id,
                corpus.records[i].grant_date,
                corpus.records[i].class_id,
                corpus.records[i].patent_id,
            )
            for i in rows
        ]
        save_embeddings(path, projected.astype(np.float32), metadata)

    if args.out_embeddings:
        export(train_rows, args.out_embeddings)
    if args.out_query_embeddings:
        query_rows = [i for i, r in enumerate(corpus.records) if r.split == "query"]
        if not query_rows:
            raise CliUsageError("corpus has no query records to export")
        export(query_rows, args.out_query_embeddings)

    initial = result.trace[0].combined if result.trace else float("nan")
    final = result.trace[-1].combined if result.trace else float("nan")
    _emit(
        args,
        f"trained {trainer_cfg.steps} steps: combined loss {initial:.4f} -> {final:.4f}",
        {
            "steps": trainer_cfg.steps,
            "initial_combined": initial,
            "final_combined": final,
            "weights": str(args.out_weights),
            "trace": str(args.out_trace),
        },
    )
    return 0


def cmd_build_index(args) -> int:
    matrix, metadata = load_embeddings(args.embeddings)
    if args.projector:
        weights = ProjectorWeights.load(args.projector)
        matrix = weights.apply(matrix)
    index = build_index(matrix, metadata)
    dump_index(index, args.out)
    _emit(
        args,
        f"indexed {len(index)} vectors (dim {index.dim}) -> {args.out}",
        {"count": len(index), "dim": index.dim, "out": str(args.out)},
    )
    return 0


def cmd_query(args) -> int:
    index = load_index(args.index)
    if (args.record_id is None) == (args.vector is None):
        raise CliUsageError("provide exactly one of --record-id or --vector")
    if args.record_id:
        row = index.row_of(args.record_id)
        if row is None:
            raise CliUsageError(f"record {args.record_id!r} is not in the index")
        vec = index.vectors64[row]
        cutoff = (
            date.fromisoformat(args.cutoff) if args.cutoff else index.grant_dates[row]
        )
    else:
        vec = np.array([float(x) for x in args.vector.split(",")])
        if not args.cutoff:
            raise CliUsageError("--cutoff is required with --vector")
        cutoff = date.fromisoformat(args.cutoff)
    result = query_topk(
        index,
        vec,
        cutoff_date=cutoff,
        k=args.k,
        exclude_patent=args.exclude_patent,
        exclude_record=args.record_id,
    )
    if args.json:
        print(
            json.dumps(
                {
                    "cutoff_date": cutoff.isoformat(),
                    "hits": [
                        {
                            "record_id": h.record_id,
                            "score": h.score,
                            "class_id": h.class_id,
                            "patent_id": h.patent_id,
                            "grant_date": h.grant_date.isoformat(),
                        }
                        for h in result.hits
                    ],
                },
                indent=2,
            )
        )
    else:
        print(f"top {len(result.hits)} hits before {cutoff.isoformat()}:")
        for h in result.hits:
            print(
                f"  {h.record_id}  score={h.score:+.4f}  class={h.class_id}  "
                f"patent={h.patent_id}  granted={h.grant_date.isoformat()}"
            )
    return 0


def cmd_evaluate(args) -> int:
    engine = _load_engine_config(args.config)
    metric_cfg: EvalConfig = engine.metrics
    if args.k:
        metric_cfg.k_list = tuple(int(x) for x in args.k.split(","))
    if args.depth is not None:
        metric_cfg.depth = args.depth
    if args.mode:
        metric_cfg.relevance_mode = args.mode
    if args.exclude_same_patent:
        metric_cfg.exclude_same_patent = True

    index = load_index(args.index)
    corpus = ingest_metadata(args.corpus)
    queries = corpus.split_records("query")
    if not queries:
        raise CliUsageError("corpus has no query-split records")
    if args.query_embeddings:
        matrix, metadata = load_embeddings(args.query_embeddings)
        rows = {m[0]: i for i, m in enumerate(metadata)}
        missing = [q.record_id for q in queries if q.record_id not in rows]
        if missing:
            raise CliUsageError(
                f"--query-embeddings lacks rows for {len(missing)} query records"
            )
        vectors = matrix[[rows[q.record_id] for q in queries]]
    else:
        vectors = []
        for q in queries:
            row = index.row_of(q.record_id)
            if row is None:
                raise CliUsageError(
                    f"query record {q.record_id!r} has no vector (pass --query-embeddings)"
                )
            vectors.append(index.vectors64[row])
        vectors = np.stack(vectors)

    report = evaluate(index, queries, vectors, corpus.distribution, metric_cfg)
    body = report.to_json_dict()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(body, fh, indent=2, sort_keys=True)
            fh.write("\n")
    if args.per_class_csv:
        report.write_per_class_csv(args.per_class_csv)
    if args.json:
        print(json.dumps(body, indent=2, sort_keys=True))
    else:
        for bucket in ("head", "tail", "all"):
            vals = body["buckets"][bucket]
            mp = "n/a" if vals["map"] is None else f"{vals['map']:.4f}"
            print(
                f"{bucket:>4}: mAP={mp}  queries={vals['query_count']} "
                f"(+{vals['zero_eligible_count']} zero-eligible)"
            )
    return 0


def cmd_serve(args) -> int:
    engine = load_config(args.config)
    if engine.service is None:
        raise CliUsageError("config has no [service] section")
    service_cfg = engine.service
    if args.port is not None:
        service_cfg.port = args.port

    probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        probe.bind((service_cfg.host, service_cfg.port))
    except OSError as exc:
        raise CliUsageError(
            f"cannot bind {service_cfg.host}:{service_cfg.port}: {exc}"
        ) from exc
    finally:
        probe.close()

    import uvicorn

    from .service import create_app_from_config

    app = create_app_from_config(service_cfg)
    print(f"serving on http://{service_cfg.host}:{service_cfg.port}")
    uvicorn.run(app, host=service_cfg.host, port=service_cfg.port, log_level="warning")
    return 0


def cmd_study_report(args) -> int:
    from .service import load_sessions, study_report

    report = study_report(load_sessions(args.log))
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        print(f"participants: {report['participants']}")
        for metric in ("satisfaction", "duration_seconds"):
            m = report[metric]
            print(
                f"{metric}: A={m['mean_A']:.3f} B={m['mean_B']:.3f} "
                f"t({m['df']})={m['t']:.2f} p={m['p_two_tailed']:.4g}"
            )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patret", description="patent-image retrieval engine"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a metadata JSONL file and report the class split")
    p.add_argument("--metadata", required=True)
    p.add_argument("--out", help="write validated records back as canonical JSONL")
    p.add_argument("--head-fraction", type=float, default=0.4)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a deterministic synthetic corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--counts", required=True, help="records per class, e.g. 50,50,5,5")
    p.add_argument("--start", default="2016-01-01")
    p.add_argument("--end", default="2019-12-31")
    p.add_argument("--query-fraction", type=float, default=0.0)
    p.add_argument("--head-fraction", type=float, default=0.4)
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("enrich", help="generate description sets for every record")
    p.add_argument("--corpus", required=True)
    p.add_argument("--client", choices=("mock", "live"), default="mock")
    p.add_argument("--out", required=True, help="enrichment cache JSONL")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count-target", type=int, default=20)
    p.add_argument("--base-url", default="https://api.openai.com/v1")
    p.add_argument("--model", default="gpt-4")
    p.add_argument("--api-key-env", default="PATRET_API_KEY")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_enrich)

    p = sub.add_parser("train-demo", help="train the projector on a corpus (desk scale)")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config", help="TOML engine config with a [trainer] section")
    p.add_argument("--image-feats", help="PIRV of raw image features (else simulated)")
    p.add_argument("--text-feats", help="PIRV of text features (else simulated/enrichment)")
    p.add_argument("--enrichment", help="enrichment cache; texts are hash-embedded per iteration")
    p.add_argument("--d-in", type=int, default=32)
    p.add_argument("--d-text", type=int, default=16)
    p.add_argument("--image-noise", type=float, default=0.25)
    p.add_argument("--text-noise", type=float, default=0.25)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--out-weights", required=True)
    p.add_argument("--out-trace", required=True)
    p.add_argument("--out-embeddings", help="PIRV of projected train-split embeddings")
    p.add_argument("--out-query-embeddings", help="PIRV of projected query-split embeddings")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_train_demo)

    p = sub.add_parser("build-index", help="build a searchable index from an embeddings PIRV")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--projector", help="apply trained projector weights before indexing")
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("query", help="run one prior-art query against an index")
    p.add_argument("--index", required=True)
    p.add_argument("--record-id")
    p.add_argument("--vector", help="comma-separated floats")
    p.add_argument("--cutoff", help="ISO date; defaults to the record's grant date")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--exclude-patent")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("evaluate", help="score query-split records against an index")
    p.add_argument("--index", required=True)
    p.add_argument("--corpus", required=True, help="JSONL with train and query splits")
    p.add_argument("--query-embeddings", help="PIRV of query vectors keyed by record_id")
    p.add_argument("--config", help="TOML engine config with a [metrics] section")
    p.add_argument("--k", help="comma-separated K values, e.g. 5,10")
    p.add_argument("--depth", type=int)
    p.add_argument("--mode", choices=("same_class", "same_patent"))
    p.add_argument("--exclude-same-patent", action="store_true")
    p.add_argument("--out", help="write the report JSON here")
    p.add_argument("--per-class-csv", help="write the per-class AP table here")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("serve", help="start the HTTP retrieval/study service")
    p.add_argument("--config", required=True)
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("study-report", help="offline study report from a session JSONL log")
    p.add_argument("--log", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_study_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliUsageError, ConfigError, MetadataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return 2
    except PirvFormatError as exc:
        print(f"error: bad index/embedding file ({exc.code}): {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 1


if __name__ == "__main__":
    sys.exit(main())
