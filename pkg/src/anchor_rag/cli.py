"""Command-line entry point: ingest, build-index, run, eval, transitions, report, inspect.

Secrets are only ever read from environment variables (the config names
the variable, never the value). Every subcommand exits nonzero on error;
partial per-question failures inside ``run`` flip the exit code only when
the failure rate exceeds the configured cap.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from anchor_rag import evaluation
from anchor_rag.corpus import (
    DEFAULT_CHUNK_SIZE,
    DEFAULT_STRIDE,
    DEFAULT_TOKENIZER,
    CorpusError,
    build_corpus,
    load_dataset,
    read_chunk_manifest,
    read_question_file,
    sample_questions,
    write_chunk_manifest,
    write_question_file,
)
from anchor_rag.embed_index import EmbedIndexError, HashingEmbedder, Index, RemoteEmbedder, build_index
from anchor_rag.llm_gateway import GatewayError, OpenAIChatProvider, ScriptedProvider
from anchor_rag.pipeline import MODES, Pipeline, PipelineError, RunConfig, read_trace_file

DEFAULT_CHAT_KEY_ENV = "ANCHOR_RAG_API_KEY"
DEFAULT_EMBED_KEY_ENV = "ANCHOR_RAG_EMBED_API_KEY"


class CliError(RuntimeError):
    pass


def _env_key(spec: dict, default_env: str) -> str | None:
    return os.environ.get(spec.get("api_key_env") or default_env)


def build_embed_provider(spec: dict):
    kind = spec.get("kind", "hashing")
    if kind == "hashing":
        return HashingEmbedder(dim=int(spec.get("dim") or 256))
    if kind == "remote":
        if not spec.get("base_url") or not spec.get("model"):
            raise CliError("remote embedder needs base_url and model")
        return RemoteEmbedder(
            base_url=spec["base_url"],
            model=spec["model"],
            api_key=_env_key(spec, DEFAULT_EMBED_KEY_ENV),
            dim=int(spec["dim"]) if spec.get("dim") else None,
        )
    raise CliError(f"unknown embedder kind: {kind!r}")


def build_chat_provider(spec: dict):
    kind = spec.get("kind", "scripted")
    if kind == "scripted":
        if not spec.get("fixtures"):
            raise CliError("scripted provider needs a fixtures path")
        return ScriptedProvider.from_jsonl(spec["fixtures"])
    if kind == "openai":
        if not spec.get("base_url") or not spec.get("model"):
            raise CliError("openai provider needs base_url and model")
        return OpenAIChatProvider(
            base_url=spec["base_url"],
            model=spec["model"],
            api_key=_env_key(spec, DEFAULT_CHAT_KEY_ENV),
        )
    raise CliError(f"unknown chat provider kind: {kind!r}")


# --- subcommands ---------------------------------------------------------------


def cmd_ingest(args: argparse.Namespace) -> int:
    if args.sample_n is not None and args.sample_n < 1:
        raise CliError("--sample-n must be >= 1")
    items, docs = load_dataset(args.data, args.format)
    if args.sample_n is not None:
        items = sample_questions(items, args.sample_n, args.seed)
    if args.contexts == "sampled":
        keep = {q.question_id for q in items}
        _, docs = load_dataset(args.data, args.format, restrict_to=keep)
    chunks = build_corpus(docs, chunk_size=args.chunk_size, stride=args.stride)
    out = Path(args.out_dir)
    write_question_file(
        items,
        out / "questions.jsonl",
        meta={"dataset_tag": args.format, "sample_n": args.sample_n, "seed": args.seed},
    )
    write_chunk_manifest(
        chunks,
        out / "chunks.jsonl",
        chunk_size=args.chunk_size,
        stride=args.stride,
        tokenizer_id=DEFAULT_TOKENIZER.tokenizer_id,
    )
    print(f"ingested {len(items)} questions, {len(docs)} documents, {len(chunks)} chunks -> {out}")
    return 0


def cmd_build_index(args: argparse.Namespace) -> int:
    chunks, _ = read_chunk_manifest(args.chunks)
    provider = build_embed_provider(
        {"kind": args.embedder, "dim": args.dim, "base_url": args.endpoint, "model": args.model}
    )
    index = build_index(chunks, provider)
    index.save(args.out)
    print(f"indexed {len(index)} chunks (dim={index.dim}, provider={index.provider_id}) -> {args.out}")
    return 0


def _run_config_from_args(args: argparse.Namespace) -> RunConfig:
    base: dict = {}
    if args.config:
        base = json.loads(Path(args.config).read_text(encoding="utf-8"))
    if args.mode is not None:
        base["mode"] = args.mode
    if args.tau is not None:
        base["confidence_threshold"] = args.tau
    if args.k is not None:
        base["k_per_triple"] = args.k
    if args.seed is not None:
        base["seed"] = args.seed
    if args.concurrency is not None:
        base["concurrency"] = args.concurrency
    if args.max_failure_rate is not None:
        base["max_failure_rate"] = args.max_failure_rate
    chat = dict(base.get("chat_provider") or {})
    if args.provider is not None:
        chat["kind"] = args.provider
    if args.fixtures is not None:
        chat["fixtures"] = args.fixtures
    if args.endpoint is not None:
        chat["base_url"] = args.endpoint
    if args.model is not None:
        chat["model"] = args.model
    base["chat_provider"] = chat
    embed = dict(base.get("embed_provider") or {})
    embed.setdefault("kind", args.embedder)
    if args.dim is not None:
        embed["dim"] = args.dim
    base["embed_provider"] = embed
    return RunConfig.from_dict(base)


def cmd_run(args: argparse.Namespace) -> int:
    config = _run_config_from_args(args)
    items, _ = read_question_file(args.questions)
    chunks: list = []
    index = None
    if config.mode != "system1_only":
        if not args.index or not args.chunks:
            raise CliError(f"mode {config.mode!r} requires --index and --chunks")
        chunks, _ = read_chunk_manifest(args.chunks)
        embed_spec = dict(config.embed_provider)
        embed_spec.setdefault("base_url", args.endpoint)
        index = Index.load(args.index, build_embed_provider(embed_spec))
    provider = build_chat_provider(config.chat_provider)
    out = Path(args.out)
    if out.exists() and not args.resume:
        raise CliError(f"{out} already exists; pass --resume to continue it or remove it first")
    pipeline = Pipeline(provider, config, index=index, chunks=chunks)
    traces = pipeline.run_dataset(items, trace_path=out, resume=args.resume)
    failed = sum(1 for t in traces if t.errors)
    rate = failed / len(traces) if traces else 0.0
    print(f"ran {len(traces)} questions ({failed} with errors) -> {out}")
    if rate > config.max_failure_rate:
        print(f"failure rate {rate:.2%} exceeds cap {config.max_failure_rate:.2%}", file=sys.stderr)
        return 1
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    _, traces = read_trace_file(args.traces)
    scores = evaluation.score_traces(traces, answer=args.answers)
    em, f1 = evaluation.aggregate(scores)
    label = f"{Path(args.traces).stem}:{args.answers}"
    print(evaluation.render_score_table([(label, em, f1, len(scores))]))
    if args.out:
        evaluation.write_summary_json(
            args.out,
            {"traces": str(args.traces), "answers": args.answers, "em": em, "f1": f1, "n": len(scores)},
        )
    return 0


def cmd_transitions(args: argparse.Namespace) -> int:
    if args.sys1 and args.sys2:
        _, first = read_trace_file(args.sys1)
        _, second = read_trace_file(args.sys2)
        before = evaluation.score_traces(first, answer="final")
        after = evaluation.score_traces(second, answer="final")
        label = f"{Path(args.sys1).stem} -> {Path(args.sys2).stem}"
    elif args.traces:
        _, traces = read_trace_file(args.traces)
        before = evaluation.score_traces(traces, answer="system1")
        after = evaluation.score_traces(traces, answer="final")
        label = Path(args.traces).stem
    else:
        raise CliError("pass either --traces or both --sys1 and --sys2")
    report = evaluation.transitions(before, after)
    print(evaluation.render_transition_table([(label, report)]))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    score_rows = []
    payload_rows = []
    transition_rows = []
    savings_rows = []
    summary: dict = {"runs": {}}
    for trace_path in args.traces:
        header, traces = read_trace_file(trace_path)
        label = Path(trace_path).stem
        mode = header["config"]["mode"]
        final_scores = evaluation.score_traces(traces, answer="final")
        em, f1 = evaluation.aggregate(final_scores)
        score_rows.append((label, em, f1, len(final_scores)))
        payload = evaluation.payload_tokens(traces)
        payload_rows.append((label, payload))
        run_summary = {
            "mode": mode,
            "em": em,
            "f1": f1,
            "n": len(final_scores),
            "avg_payload_tokens": payload.overall_mean,
            "payload_per_dataset": payload.per_dataset,
        }
        if mode in ("full", "no_initial_reasoning", "threshold_gated"):
            sys1_scores = evaluation.score_traces(traces, answer="system1")
            rep = evaluation.transitions(sys1_scores, final_scores)
            transition_rows.append((label, rep))
            run_summary["transitions"] = {
                "both_correct": rep.both_correct,
                "gained": rep.gained,
                "lost": rep.lost,
                "both_incorrect": rep.both_incorrect,
                "net_gain": rep.net_gain,
            }
        if mode == "threshold_gated":
            savings = evaluation.threshold_savings(traces)
            savings_rows.append((label, savings))
            run_summary["threshold"] = {
                "complete": savings.complete,
                "continue": savings.continued,
                "avg_input_tokens_saved": savings.avg_input_tokens_saved,
            }
        evaluation.write_scores_csv(out_dir / f"{label}.scores.csv", final_scores)
        summary["runs"][label] = run_summary

    sections = [evaluation.render_score_table(score_rows), evaluation.render_payload_table(payload_rows)]
    if transition_rows:
        sections.append(evaluation.render_transition_table(transition_rows))
    if savings_rows:
        sections.append(evaluation.render_savings_table(savings_rows))
    text = "\n\n".join(sections) + "\n"
    (out_dir / "report.txt").write_text(text, encoding="utf-8")
    evaluation.write_summary_json(out_dir / "summary.json", summary)
    print(text, end="")
    print(f"report written to {out_dir}")
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    _, traces = read_trace_file(args.traces)
    for trace in traces:
        if trace.question_id == args.question_id:
            print(json.dumps(trace.to_json_dict(), indent=2, ensure_ascii=False))
            return 0
    raise CliError(f"question id {args.question_id!r} not found in {args.traces}")


# --- parser --------------------------------------------------------------------


def _add_embedder_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--embedder", choices=["hashing", "remote"], default="hashing")
    p.add_argument("--dim", type=int, default=None, help="embedding dimension (hashing default 256)")
    p.add_argument("--endpoint", default=None, help="base URL of the model/embedding endpoint")
    p.add_argument("--model", default=None, help="model name on the remote endpoint")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anchor-rag", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load a dataset, sample questions, chunk the corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--format", required=True, choices=["2wiki", "hotpotqa", "musique"])
    p.add_argument("--out-dir", required=True)
    p.add_argument("--sample-n", type=int, default=None)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--chunk-size", type=int, default=DEFAULT_CHUNK_SIZE)
    p.add_argument("--stride", type=int, default=DEFAULT_STRIDE)
    p.add_argument("--contexts", choices=["all", "sampled"], default="all",
                   help="index contexts from every record, or only from sampled questions")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("build-index", help="embed a chunk manifest into a searchable index")
    p.add_argument("--chunks", required=True)
    p.add_argument("--out", required=True)
    _add_embedder_flags(p)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("run", help="run the pipeline over a question file")
    p.add_argument("--questions", required=True)
    p.add_argument("--index", default=None)
    p.add_argument("--chunks", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON run config; flags override it")
    p.add_argument("--mode", choices=list(MODES), default=None)
    p.add_argument("--tau", type=float, default=None, help="confidence threshold for threshold_gated")
    p.add_argument("--k", type=int, default=None, help="chunks retrieved per triple")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--concurrency", type=int, default=None)
    p.add_argument("--max-failure-rate", type=float, default=None)
    p.add_argument("--provider", choices=["scripted", "openai"], default=None)
    p.add_argument("--fixtures", default=None, help="fixture JSONL for the scripted provider")
    p.add_argument("--resume", action="store_true")
    _add_embedder_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score a trace file")
    p.add_argument("--traces", required=True)
    p.add_argument("--answers", choices=["final", "system1"], default="final")
    p.add_argument("--out", default=None, help="write a JSON summary here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transitions", help="correctness flow between fast and final answers")
    p.add_argument("--traces", default=None, help="single run: compare its system1 vs final answers")
    p.add_argument("--sys1", default=None, help="baseline trace file (final answers)")
    p.add_argument("--sys2", default=None, help="comparison trace file (final answers)")
    p.set_defaults(func=cmd_transitions)

    p = sub.add_parser("report", help="render score/payload/transition/savings tables")
    p.add_argument("--traces", nargs="+", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("inspect", help="pretty-print one trace")
    p.add_argument("--traces", required=True)
    p.add_argument("--question-id", required=True)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, CorpusError, EmbedIndexError, GatewayError, PipelineError, evaluation.EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
