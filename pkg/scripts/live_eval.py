#!/usr/bin/env python3
"""End-to-end benchmark against a live OpenAI-compatible endpoint.

Ingests a dataset validation file, samples 500 questions, indexes all of its
contexts, runs the full pipeline, and prints EM/F1 next to the reference
targets measured with a 7B instruct model and a 0.6B embedder. Expect
agreement only in the rough (+/- a few EM points): the sample, the model,
and the embedder all shift the numbers. Excluded from CI by construction.

    export ANCHOR_RAG_API_KEY=...          # if the endpoint needs auth
    python3 scripts/live_eval.py \
        --data 2wikimultihopqa_dev.json --format 2wiki \
        --endpoint http://localhost:8000/v1 --model Qwen2.5-7B-Instruct \
        --embed-model Qwen3-Embedding-0.6B --out-dir runs/2wiki
"""

import argparse
import sys
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from anchor_rag.cli import main as cli_main

REFERENCE = {
    "2wiki": (29.60, 34.71),
    "hotpotqa": (20.80, 28.75),
    "musique": (10.20, 19.42),
}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data", required=True, help="dataset validation file")
    parser.add_argument("--format", required=True, choices=list(REFERENCE))
    parser.add_argument("--endpoint", required=True, help="OpenAI-compatible base URL")
    parser.add_argument("--model", required=True, help="chat model name")
    parser.add_argument("--embed-model", default=None, help="embedding model name (hashing embedder if unset)")
    parser.add_argument("--out-dir", required=True)
    parser.add_argument("--sample-n", type=int, default=500)
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--mode", default="full")
    parser.add_argument("--tau", type=float, default=None)
    parser.add_argument("--concurrency", type=int, default=4)
    parser.add_argument("--resume", action="store_true")
    args = parser.parse_args()

    out = Path(args.out_dir)
    rc = cli_main(
        ["ingest", "--data", args.data, "--format", args.format, "--out-dir", str(out),
         "--sample-n", str(args.sample_n), "--seed", str(args.seed)]
    )
    if rc:
        return rc

    index_cmd = ["build-index", "--chunks", str(out / "chunks.jsonl"), "--out", str(out / "index.bin")]
    if args.embed_model:
        index_cmd += ["--embedder", "remote", "--endpoint", args.endpoint, "--model", args.embed_model]
    if not (out / "index.bin").exists():
        rc = cli_main(index_cmd)
        if rc:
            return rc

    run_cmd = [
        "run",
        "--questions", str(out / "questions.jsonl"),
        "--index", str(out / "index.bin"),
        "--chunks", str(out / "chunks.jsonl"),
        "--mode", args.mode,
        "--provider", "openai",
        "--endpoint", args.endpoint,
        "--model", args.model,
        "--concurrency", str(args.concurrency),
        "--out", str(out / "traces.jsonl"),
    ]
    if args.embed_model:
        run_cmd += ["--embedder", "remote"]
    if args.tau is not None:
        run_cmd += ["--tau", str(args.tau)]
    if args.resume:
        run_cmd += ["--resume"]
    rc = cli_main(run_cmd)
    if rc:
        return rc

    rc = cli_main(["report", "--traces", str(out / "traces.jsonl"), "--out-dir", str(out / "report")])
    ref_em, ref_f1 = REFERENCE[args.format]
    print(f"\nreference targets for {args.format} (full mode): EM {ref_em:.2f} / F1 {ref_f1:.2f}")
    return rc


if __name__ == "__main__":
    sys.exit(main())
