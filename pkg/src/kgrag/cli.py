"""Command-line entry point.  Results go to stdout as JSON, diagnostics to stderr.

Exit status: 0 on success, 2 on usage errors, 1 on runtime errors (the
message names the failing stage).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from .audit import audit_report, read_answers
from .config import (
    WEIGHT_PRESETS,
    ConfigError,
    EngineConfig,
    Resources,
    bundled_path,
    load_config,
    load_resources,
    make_engine,
    open_store,
)
from .dynamics import load_events, load_probes, measure_costs, run_bench
from .engine import context_for
from .errors import KGRAGError, StageError
from .ingest import HTTPExtractor, MockExtractor, ingest_document
from .kg_store import KnowledgeGraph, dump_store, load_store, read_triples
from .linkpred import CandidateEdge, KGEmbeddingModel, admit, propose, train
from .retrieval import Weights

log = logging.getLogger("kgrag")


class UsageError(Exception):
    pass


def _emit(payload: Any) -> None:
    json.dump(payload, sys.stdout, sort_keys=True, ensure_ascii=False, indent=2)
    sys.stdout.write("\n")


def _write_json(path: str | None, payload: Any) -> None:
    if path:
        Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False) + "\n", "utf-8")


def _read_jsonl(path: str) -> list[dict[str, Any]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc.msg}") from None
    return out


# -- commands -------------------------------------------------------------------------


def cmd_ingest(args: argparse.Namespace, cfg: EngineConfig, res: Resources) -> dict[str, Any]:
    kg = KnowledgeGraph(res.ontology) if args.fresh else open_store(cfg, res.ontology)
    if args.backend == "http":
        if not args.backend_url:
            raise UsageError("--backend http needs --backend-url")
        backend = HTTPExtractor(args.backend_url)
    else:
        backend = MockExtractor.bundled() if args.backend == "mock" else None
    summaries = []
    for doc in args.doc:
        p = Path(doc)
        summaries.append(
            ingest_document(
                kg, args.uri_prefix + p.name, p.read_text("utf-8"),
                rules=res.rules, aliases=res.aliases, source_family=args.family,
                revision_date=args.revision_date, backend=backend,
                min_confidence=args.min_confidence,
            ).to_dict()
        )
    dump_store(kg, args.out)
    return {"documents": summaries, "out": args.out, "revision": kg.revision, "triple_count": len(kg)}


def cmd_build_kg(args: argparse.Namespace, cfg: EngineConfig, res: Resources) -> dict[str, Any]:
    kg = load_store(args.input, res.ontology)
    n = dump_store(kg, args.out)
    return {"in": args.input, "out": args.out, "triple_count": n, "live": kg.live_count()}


def cmd_dump(args: argparse.Namespace, cfg: EngineConfig, res: Resources) -> dict[str, Any]:
    kg = open_store(cfg, res.ontology)
    n = dump_store(kg, args.out)
    return {"out": args.out, "triple_count": n, "revision": kg.revision}


def cmd_linkpred(args: argparse.Namespace, cfg: EngineConfig, res: Resources) -> dict[str, Any]:
    kg = open_store(cfg, res.ontology)
    tau = args.tau if args.tau is not None else cfg.tau
    if args.action == "train":
        model = train(kg, dim=args.dim, epochs=args.epochs, learning_rate=args.lr,
                      margin=args.margin, seed=args.seed)
        model.save(args.out)
        return {"out": args.out, "run_id": model.run_id, "entities": len(model.entities),
                "relations": len(model.relations), "final_loss": model.loss_trace[-1]}
    model = KGEmbeddingModel.load(args.model)
    if args.action == "propose":
        cands = propose(model, kg, tau, args.max_candidates)
        with open(args.out, "w", encoding="utf-8") as fh:
            for c in cands:
                fh.write(json.dumps(c.to_dict(), sort_keys=True) + "\n")
        return {"out": args.out, "candidates": len(cands), "tau": tau}
    cands = [CandidateEdge.from_dict(d) for d in _read_jsonl(args.candidates)]
    report = admit(kg, cands, tau, model)
    dump_store(kg, args.out)
    return {"out": args.out, **report.to_dict()}


def _weights(args: argparse.Namespace, cfg: EngineConfig) -> Weights:
    if args.weights and args.preset:
        raise UsageError("give --weights or --preset, not both")
    if args.preset:
        return WEIGHT_PRESETS[args.preset]
    if args.weights:
        try:
            return Weights.parse(args.weights)
        except ValueError as exc:
            raise UsageError(f"--weights: {exc}") from None
    return cfg.weights


def cmd_query(args: argparse.Namespace, cfg: EngineConfig, res: Resources) -> dict[str, Any]:
    cfg = cfg.with_overrides(weights=_weights(args, cfg), k=args.k)
    engine = make_engine(cfg, res=res)
    ctx = context_for(engine, args.context) if args.context else None
    return engine.answer(args.text, ctx).to_dict(with_latency=args.timing)


def cmd_audit(args: argparse.Namespace, cfg: EngineConfig, res: Resources) -> dict[str, Any]:
    kg = open_store(cfg, res.ontology)
    report = audit_report(kg.snapshot(), read_answers(args.answers), res.aliases)
    _write_json(args.out, report)
    return report if not args.out else {"out": args.out, "totals": report["totals"], "rates": report["rates"]}


def cmd_stream(args: argparse.Namespace, cfg: EngineConfig, res: Resources) -> dict[str, Any]:
    from .dynamics import apply_event

    engine = make_engine(cfg, res=res)
    summaries = []
    for e in load_events(args.events):
        summary, _ = apply_event(engine.kg, None, e)
        engine.refresh()
        summaries.append(summary.to_dict())
    if args.out:
        dump_store(engine.kg, args.out)
    return {"applied": len(summaries), "revision": engine.revision, "events": summaries, "out": args.out}


def cmd_bench(args: argparse.Namespace, cfg: EngineConfig, res: Resources) -> dict[str, Any]:
    stream = load_events(args.stream or bundled_path("slice27_stream.jsonl"))
    probes = load_probes(args.probes or bundled_path("slice27_probes.jsonl"))
    kg = open_store(cfg, res.ontology)
    report = run_bench(lambda g: make_engine(cfg, kg=g, res=res), kg, stream, probes, args.mode,
                       args.poll, args.max_polls).to_dict()
    _write_json(args.out, report)
    if args.out:
        report = {k: v for k, v in report.items() if k != "per_event"} | {"out": args.out}
    return report


def _corpus(path: str) -> list:
    p = Path(path)
    files = sorted(p.glob("*.jsonl")) if p.is_dir() else [p]
    if not files:
        raise ValueError(f"no .jsonl files under {p}")
    return [t for f in files for t in read_triples(f)]


def cmd_costs(args: argparse.Namespace, cfg: EngineConfig, res: Resources) -> dict[str, Any]:
    corpus = _corpus(args.corpus or str(bundled_path("corpus500.jsonl")))
    stream = load_events(args.stream or bundled_path("cost_stream.jsonl"))
    queries = [r["query"] for r in _read_jsonl(str(bundled_path("demo_queries.jsonl")))]
    report = measure_costs(corpus, stream, lambda g: make_engine(cfg, kg=g, res=res), queries,
                           res.ontology, args.batch_size).to_dict()
    _write_json(args.out, report)
    return report


def cmd_serve(args: argparse.Namespace, cfg: EngineConfig, res: Resources) -> dict[str, Any]:
    from .service import KGService, serve

    host = args.host or cfg.host
    port = args.port if args.port is not None else cfg.port
    serve(KGService(lambda: make_engine(cfg, res=res)), host, port)
    return {"stopped": True}


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kgrag", description="Knowledge-graph grounded question answering.")
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--store", help="store file (defaults to the bundled demo store)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", metavar="command", required=True)

    s = sub.add_parser("ingest", help="extract triples from documents into a store dump")
    s.add_argument("--doc", action="append", required=True, help="text document (repeatable)")
    s.add_argument("--out", required=True)
    s.add_argument("--family", default="spec", choices=["spec", "vendor_doc", "log", "telemetry", "synthetic"])
    s.add_argument("--revision-date", default="1970-01-01T00:00:00Z")
    s.add_argument("--uri-prefix", default="file://")
    s.add_argument("--rules", help="extraction rules JSON (defaults to the bundled rules)")
    s.add_argument("--aliases", help="alias table JSON (defaults to the bundled table)")
    s.add_argument("--backend", choices=["none", "mock", "http"], default="none",
                   help="model extractor run beside the rules")
    s.add_argument("--backend-url", help="extractor endpoint for --backend http")
    s.add_argument("--min-confidence", type=float, default=0.5)
    s.add_argument("--fresh", action="store_true", help="start from an empty store")
    s.set_defaults(fn=cmd_ingest)

    s = sub.add_parser("build-kg", help="build a store from a triple file and write its dump")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_build_kg)

    s = sub.add_parser("dump", help="write the store as JSONL")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_dump)

    s = sub.add_parser("linkpred", help="train, propose and admit predicted edges")
    s.add_argument("action", choices=["train", "propose", "admit"])
    s.add_argument("--model", help="model file (propose, admit)")
    s.add_argument("--candidates", help="candidate JSONL (admit)")
    s.add_argument("--out", required=True)
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--margin", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tau", type=float)
    s.add_argument("--max-candidates", type=int, default=1000)
    s.set_defaults(fn=cmd_linkpred)

    s = sub.add_parser("query", help="answer a question against the store")
    s.add_argument("--text", required=True)
    s.add_argument("--context", action="append", help="earlier turn (repeatable, oldest first)")
    s.add_argument("--k", type=int)
    s.add_argument("--weights", help="w_sim,w_ont,w_ctx")
    s.add_argument("--preset", choices=sorted(WEIGHT_PRESETS))
    s.add_argument("--timing", action="store_true", help="include generation latency")
    s.set_defaults(fn=cmd_query)

    s = sub.add_parser("audit", help="classify answer claims against the store")
    s.add_argument("--answers", required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_audit)

    s = sub.add_parser("stream", help="apply an event stream to the store")
    s.add_argument("--events", required=True)
    s.add_argument("--out", help="write the updated store here")
    s.set_defaults(fn=cmd_stream)

    s = sub.add_parser("bench", help="static vs dynamic freshness bench on virtual time")
    s.add_argument("--stream")
    s.add_argument("--probes")
    s.add_argument("--mode", choices=["static", "dynamic"], default="dynamic")
    s.add_argument("--poll", type=float, default=1.0, help="poll interval, virtual seconds")
    s.add_argument("--max-polls", type=int, default=3)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("costs", help="incremental vs rebuild timings and query latency")
    s.add_argument("--corpus", help="triple JSONL file or directory of them")
    s.add_argument("--stream")
    s.add_argument("--batch-size", type=int, default=100)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_costs)

    s = sub.add_parser("serve", help="run the HTTP service")
    s.add_argument("--host")
    s.add_argument("--port", type=int)
    s.set_defaults(fn=cmd_serve)
    return p


REQUIRED = {"propose": ("model",), "admit": ("model", "candidates")}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.command == "linkpred":
        missing = [f"--{m}" for m in REQUIRED.get(args.action, ()) if getattr(args, m) is None]
        if missing:
            parser.error(f"linkpred {args.action} needs {', '.join(missing)}")
    stage = args.command
    try:
        cfg = load_config(args.config)
        if args.store:
            cfg = cfg.with_overrides(store=Path(args.store))
        if args.command == "ingest":
            cfg = cfg.with_overrides(rules=args.rules and Path(args.rules),
                                     aliases=args.aliases and Path(args.aliases))
        stage = "load"
        res = load_resources(cfg)
        stage = args.command
        _emit(args.fn(args, cfg, res))
        return 0
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"kgrag: error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"kgrag: error [config]: {exc}", file=sys.stderr)
        return 1
    except StageError as exc:
        print(f"kgrag: error [{exc.stage}]: {exc.cause}", file=sys.stderr)
        return 1
    except (KGRAGError, OSError, ValueError, KeyError) as exc:
        print(f"kgrag: error [{stage}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
