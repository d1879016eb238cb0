"""Prompt templates and tagged-output parsing.

The three stage prompts (direct answer, triple generation, deliberate
re-answer) ship as plain-text assets under ``templates/`` and are rendered
by literal placeholder substitution, so question text containing braces or
angle brackets passes through verbatim. Parsers are total: they return a
value plus a malformed flag, or raise :class:`PromptParseError` when no
answer text can be extracted at all.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import NamedTuple, Sequence

from anchor_rag.corpus import Chunk, QAItem

STAGE_TAGS = ("system1", "triple_gen", "system2", "system2_noanchor", "standard_rag")

_ANSWER_RE = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)
_FINAL_RE = re.compile(r"<final_answer>(.*?)</final_answer>", re.DOTALL)
_TRIPLE_RE = re.compile(r"<triple>(.*?)</triple>", re.DOTALL)
_OUTPUT_WRAPPER_RE = re.compile(r"^\s*<output>(.*?)</output>\s*$", re.DOTALL)


class PromptParseError(ValueError):
    """No usable answer text could be extracted from a model response."""


@dataclass(frozen=True)
class ReasoningTriple:
    """One (subject, predicate, object) step of the model's rationale."""

    subject: str
    predicate: str
    object: str

    def __post_init__(self) -> None:
        for name in ("subject", "predicate", "object"):
            if not getattr(self, name).strip():
                raise ValueError(f"triple field {name!r} is empty")


@dataclass(frozen=True)
class RenderedPrompt:
    """A stage prompt split into its system and user messages."""

    stage_tag: str
    system_text: str
    user_text: str
    source_question_id: str

    @property
    def text(self) -> str:
        return self.system_text + "\n\n" + self.user_text


class ParseResult(NamedTuple):
    value: str
    malformed: bool


class PromptLibrary:
    """Loads stage templates from packaged assets or an override directory."""

    def __init__(self, template_dir: str | Path | None = None):
        self._dir = Path(template_dir) if template_dir is not None else None
        self._cache: dict[str, str] = {}

    def raw(self, name: str) -> str:
        if name not in self._cache:
            if self._dir is not None:
                text = (self._dir / name).read_text(encoding="utf-8")
            else:
                text = resources.files("anchor_rag.templates").joinpath(name).read_text(encoding="utf-8")
            self._cache[name] = text
        return self._cache[name]

    def pair(self, stage_tag: str) -> tuple[str, str]:
        if stage_tag not in STAGE_TAGS:
            raise ValueError(f"unknown stage tag: {stage_tag!r}")
        return self.raw(f"{stage_tag}.system.txt"), self.raw(f"{stage_tag}.user.txt")


DEFAULT_LIBRARY = PromptLibrary()


def _fill(template: str, substitutions: dict[str, str]) -> str:
    # Literal replacement, not str.format: values may contain braces.
    out = template
    for key, value in substitutions.items():
        out = out.replace("{" + key + "}", value)
    return out


def format_triples_inline(triples: Sequence[ReasoningTriple]) -> str:
    return ", ".join(f"({t.subject} | {t.predicate} | {t.object})" for t in triples)


def format_documents(chunks: Sequence[Chunk]) -> str:
    lines = []
    for i, chunk in enumerate(chunks, start=1):
        label = chunk.title if chunk.title else chunk.doc_id
        lines.append(f"{i}. {label}: {chunk.text}")
    return "\n".join(lines)


def render_system1(q: QAItem, library: PromptLibrary = DEFAULT_LIBRARY) -> RenderedPrompt:
    """Direct-answer prompt: the bare question, no retrieved context."""
    system, user = library.pair("system1")
    return RenderedPrompt(
        stage_tag="system1",
        system_text=system,
        user_text=_fill(user, {"question": q.question}),
        source_question_id=q.question_id,
    )


def render_triplegen(q: QAItem, hypothesis: str, library: PromptLibrary = DEFAULT_LIBRARY) -> RenderedPrompt:
    """Ask the model to explain its hypothesis as subject-predicate-object triples."""
    if not hypothesis:
        raise ValueError("hypothesis must be non-empty (it may be wrong, but not blank)")
    system, user = library.pair("triple_gen")
    return RenderedPrompt(
        stage_tag="triple_gen",
        system_text=system,
        user_text=_fill(user, {"question": q.question, "answer": hypothesis}),
        source_question_id=q.question_id,
    )


def render_system2(
    q: QAItem,
    hypothesis: str,
    triples: Sequence[ReasoningTriple],
    chunks: Sequence[Chunk],
    include_anchor: bool = True,
    library: PromptLibrary = DEFAULT_LIBRARY,
) -> RenderedPrompt:
    """Deliberate re-answer prompt: question, optional anchor, numbered evidence.

    With ``include_anchor=False`` the initial guess and triples are omitted
    entirely (the model answers from the retrieved documents alone).
    """
    if not chunks:
        raise ValueError("system2 prompt requires at least one retrieved chunk")
    stage = "system2" if include_anchor else "system2_noanchor"
    system, user = library.pair(stage)
    substitutions = {"question": q.question, "documents": format_documents(chunks)}
    if include_anchor:
        substitutions["initial_guess"] = hypothesis
        substitutions["triples"] = format_triples_inline(triples)
    return RenderedPrompt(
        stage_tag=stage,
        system_text=system,
        user_text=_fill(user, substitutions),
        source_question_id=q.question_id,
    )


def render_standard_rag(q: QAItem, chunks: Sequence[Chunk], library: PromptLibrary = DEFAULT_LIBRARY) -> RenderedPrompt:
    """One-shot retrieve-then-answer baseline prompt."""
    if not chunks:
        raise ValueError("standard_rag prompt requires at least one retrieved chunk")
    system, user = library.pair("standard_rag")
    return RenderedPrompt(
        stage_tag="standard_rag",
        system_text=system,
        user_text=_fill(user, {"question": q.question, "documents": format_documents(chunks)}),
        source_question_id=q.question_id,
    )


def render_triple(t: ReasoningTriple) -> str:
    """Canonical tag form, the inverse of :func:`parse_triples` for one triple."""
    return f"<triple>{t.subject} | {t.predicate} | {t.object}</triple>"


def parse_answer(text: str) -> ParseResult:
    """Extract the first ``<answer>`` element; innermost content wins.

    Without tags, falls back to the whole text minus any ``<output>``
    wrapper, flagged malformed. Raises :class:`PromptParseError` when the
    extraction is empty.
    """
    match = _ANSWER_RE.search(text)
    if match:
        content = match.group(1)
        # A nested open tag means the regex caught an outer shell; keep the
        # innermost commitment.
        while "<answer>" in content:
            content = content.split("<answer>", 1)[1]
        value = content.strip()
        if not value:
            raise PromptParseError("empty <answer> element")
        return ParseResult(value, False)
    stripped = text.strip()
    wrapper = _OUTPUT_WRAPPER_RE.match(stripped)
    if wrapper:
        stripped = wrapper.group(1).strip()
    if not stripped:
        raise PromptParseError("no answer text found")
    return ParseResult(stripped, True)


def parse_triples(text: str) -> tuple[list[ReasoningTriple], int]:
    """Parse every well-formed ``<triple>S | p | O</triple>`` element.

    Elements with fewer than three fields, or with any field empty after
    trimming, are skipped and counted. Extra ``|`` separators are absorbed
    into the predicate so no text is discarded.
    """
    triples: list[ReasoningTriple] = []
    malformed = 0
    for inner in _TRIPLE_RE.findall(text):
        if inner.count("|") < 2:
            malformed += 1
            continue
        subject, rest = inner.split("|", 1)
        predicate, obj = rest.rsplit("|", 1)
        subject, predicate, obj = subject.strip(), predicate.strip(), obj.strip()
        if not (subject and predicate and obj):
            malformed += 1
            continue
        triples.append(ReasoningTriple(subject=subject, predicate=predicate, object=obj))
    return triples, malformed


def parse_final(text: str) -> ParseResult:
    """Extract the last ``<final_answer>`` element (the model's last word).

    Without tags, falls back to the last non-empty line, flagged malformed.
    """
    matches = _FINAL_RE.findall(text)
    for candidate in reversed(matches):
        value = candidate.strip()
        if value:
            return ParseResult(value, False)
    lines = [line.strip() for line in text.splitlines() if line.strip()]
    if not lines:
        raise PromptParseError("no final answer text found")
    return ParseResult(lines[-1], True)
