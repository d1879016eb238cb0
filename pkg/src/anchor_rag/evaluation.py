"""Answer scoring and run aggregation.

EM and token-F1 follow the standard extractive-QA scoring rules: answers
are lowercased, stripped of punctuation and English articles, whitespace
collapsed; F1 counts token overlap with multiplicity. When both answers
normalize to empty the pair scores EM=1, F1=1.
"""

from __future__ import annotations

import csv
import json
import re
import string
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

if TYPE_CHECKING:
    from anchor_rag.pipeline import PipelineTrace


class EvaluationError(ValueError):
    """Empty score list or misaligned question ids."""


_ARTICLES_RE = re.compile(r"\b(a|an|the)\b")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_answer(s: str) -> str:
    """Lowercase, drop punctuation and articles, collapse whitespace."""
    s = s.lower().translate(_PUNCT_TABLE)
    s = _ARTICLES_RE.sub(" ", s)
    return " ".join(s.split())


def exact_match(pred: str, gold: str) -> int:
    return int(normalize_answer(pred) == normalize_answer(gold))


def token_f1(pred: str, gold: str) -> float:
    """Harmonic mean of token precision/recall, overlap with multiplicity."""
    pred_tokens = normalize_answer(pred).split()
    gold_tokens = normalize_answer(gold).split()
    if not pred_tokens or not gold_tokens:
        return float(pred_tokens == gold_tokens)
    overlap = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class EvalScore:
    question_id: str
    em: int
    f1: float

    def __post_init__(self) -> None:
        if self.em not in (0, 1):
            raise EvaluationError("em must be 0 or 1")
        if not (0.0 <= self.f1 <= 1.0):
            raise EvaluationError("f1 must lie in [0, 1]")


def score_pair(question_id: str, pred: str, gold: str) -> EvalScore:
    return EvalScore(question_id=question_id, em=exact_match(pred, gold), f1=token_f1(pred, gold))


def aggregate(scores: Sequence[EvalScore]) -> tuple[float, float]:
    """Mean EM and F1 as percentages, rounded to two decimals."""
    if not scores:
        raise EvaluationError("cannot aggregate an empty score list")
    em = 100.0 * sum(s.em for s in scores) / len(scores)
    f1 = 100.0 * sum(s.f1 for s in scores) / len(scores)
    return round(em, 2), round(f1, 2)


@dataclass(frozen=True)
class TransitionReport:
    """Correctness flow between the fast answer and the final answer."""

    both_correct: int
    gained: int
    lost: int
    both_incorrect: int

    @property
    def net_gain(self) -> int:
        return self.gained - self.lost

    @property
    def total(self) -> int:
        return self.both_correct + self.gained + self.lost + self.both_incorrect


def transitions(sys1_scores: Sequence[EvalScore], sys2_scores: Sequence[EvalScore]) -> TransitionReport:
    """Four-way classification of per-question correctness changes.

    Correctness is strict exact match. The two score lists must cover the
    same question ids.
    """
    first = {s.question_id: s for s in sys1_scores}
    second = {s.question_id: s for s in sys2_scores}
    if len(first) != len(sys1_scores) or len(second) != len(sys2_scores):
        raise EvaluationError("duplicate question ids in score list")
    if first.keys() != second.keys():
        missing = first.keys() ^ second.keys()
        raise EvaluationError(f"score lists are misaligned on {len(missing)} question id(s)")
    both_correct = gained = lost = both_incorrect = 0
    for qid, before in first.items():
        after = second[qid]
        if before.em and after.em:
            both_correct += 1
        elif not before.em and after.em:
            gained += 1
        elif before.em and not after.em:
            lost += 1
        else:
            both_incorrect += 1
    return TransitionReport(both_correct=both_correct, gained=gained, lost=lost, both_incorrect=both_incorrect)


def score_traces(traces: Iterable["PipelineTrace"], answer: str = "final") -> list[EvalScore]:
    """Score one answer field of every trace against its gold answer."""
    if answer not in ("final", "system1"):
        raise EvaluationError(f"unknown answer field {answer!r}")
    scores = []
    for trace in traces:
        pred = trace.final_answer if answer == "final" else trace.system1_answer
        scores.append(score_pair(trace.question_id, pred, trace.gold_answer))
    return scores


@dataclass(frozen=True)
class PayloadReport:
    """Average retrieved-context tokens per question."""

    overall_mean: float
    per_dataset: dict[str, float]
    total_questions: int


def payload_tokens(traces: Sequence["PipelineTrace"]) -> PayloadReport:
    if not traces:
        raise EvaluationError("no traces to aggregate")
    per_dataset_sums: dict[str, list[int]] = {}
    for trace in traces:
        per_dataset_sums.setdefault(trace.dataset_tag, []).append(trace.payload_tokens)
    per_dataset = {tag: sum(vals) / len(vals) for tag, vals in sorted(per_dataset_sums.items())}
    overall = sum(t.payload_tokens for t in traces) / len(traces)
    return PayloadReport(overall_mean=overall, per_dataset=per_dataset, total_questions=len(traces))


@dataclass(frozen=True)
class ThresholdSavingsReport:
    """Gate outcomes plus the deliberate-pass input tokens never spent."""

    complete: int
    continued: int
    avg_input_tokens_saved: float


def threshold_savings(traces: Sequence["PipelineTrace"]) -> ThresholdSavingsReport:
    """Count gate decisions and average the unsent deliberate-prompt sizes.

    Gate-complete traces carry the token count of their rendered-but-unsent
    final prompt; questions that continued saved nothing.
    """
    complete = [t for t in traces if t.gate_decision == "complete"]
    continued = sum(1 for t in traces if t.gate_decision == "continue")
    avg_saved = sum(t.saved_input_tokens for t in complete) / len(complete) if complete else 0.0
    return ThresholdSavingsReport(complete=len(complete), continued=continued, avg_input_tokens_saved=avg_saved)


# --- report rendering -------------------------------------------------------


def render_score_table(rows: Sequence[tuple[str, float, float, int]]) -> str:
    """Plain-text EM/F1 table; one row per (label, em%, f1%, n)."""
    lines = [f"{'run':<32} {'EM':>8} {'F1':>8} {'n':>6}"]
    for label, em, f1, n in rows:
        lines.append(f"{label:<32} {em:>8.2f} {f1:>8.2f} {n:>6d}")
    return "\n".join(lines)


def render_transition_table(rows: Sequence[tuple[str, TransitionReport]]) -> str:
    lines = [f"{'run':<32} {'C->C':>6} {'I->C':>6} {'C->I':>6} {'I->I':>6} {'net':>6}"]
    for label, rep in rows:
        lines.append(
            f"{label:<32} {rep.both_correct:>6d} {rep.gained:>6d} {rep.lost:>6d} "
            f"{rep.both_incorrect:>6d} {rep.net_gain:>6d}"
        )
    return "\n".join(lines)


def render_payload_table(rows: Sequence[tuple[str, PayloadReport]]) -> str:
    lines = [f"{'run':<32} {'avg payload tokens':>20}"]
    for label, rep in rows:
        lines.append(f"{label:<32} {rep.overall_mean:>20.2f}")
        for tag, mean in rep.per_dataset.items():
            lines.append(f"  {tag:<30} {mean:>20.2f}")
    return "\n".join(lines)


def render_savings_table(rows: Sequence[tuple[str, ThresholdSavingsReport]]) -> str:
    lines = [f"{'run':<32} {'complete':>9} {'continue':>9} {'avg saved':>12}"]
    for label, rep in rows:
        lines.append(
            f"{label:<32} {rep.complete:>9d} {rep.continued:>9d} {rep.avg_input_tokens_saved:>12.2f}"
        )
    return "\n".join(lines)


def write_scores_csv(path: str | Path, scores: Sequence[EvalScore]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["question_id", "em", "f1"])
        for s in scores:
            writer.writerow([s.question_id, s.em, f"{s.f1:.6f}"])


def write_summary_json(path: str | Path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
