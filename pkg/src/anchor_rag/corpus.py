"""Dataset loading, corpus assembly, and sliding-window chunking.

Every context passage of a loaded QA dataset becomes one :class:`Document`
(de-duplicated by title+text), and documents are cut into fixed-size token
windows that overlap by a configurable stride. Chunk offsets are token
indices under a pluggable tokenizer; the tokenizer id is recorded on every
chunk so indexes built with different tokenizers can never be mixed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Protocol, Sequence

logger = logging.getLogger(__name__)

DATASET_TAGS = ("2wiki", "hotpotqa", "musique")
DEFAULT_CHUNK_SIZE = 400
DEFAULT_STRIDE = 50

CHUNK_MANIFEST_VERSION = 1
QUESTION_FILE_VERSION = 1


class CorpusError(ValueError):
    """Bad dataset file, unknown format, or invalid chunking parameters."""


class TokenSpan(NamedTuple):
    text: str
    start_char: int
    end_char: int


class Tokenizer(Protocol):
    tokenizer_id: str

    def tokenize(self, text: str) -> list[TokenSpan]: ...

    def count(self, text: str) -> int: ...


class WordPunctTokenizer:
    """Whitespace-plus-punctuation word splitter.

    Words (``\\w+``) and individual punctuation characters are separate
    tokens; whitespace is never a token. Spans index into the original text.
    """

    tokenizer_id = "wordpunct-v1"
    _pattern = re.compile(r"\w+|[^\w\s]", re.UNICODE)

    def tokenize(self, text: str) -> list[TokenSpan]:
        return [TokenSpan(m.group(), m.start(), m.end()) for m in self._pattern.finditer(text)]

    def count(self, text: str) -> int:
        return sum(1 for _ in self._pattern.finditer(text))


_TOKENIZERS: dict[str, Tokenizer] = {
    WordPunctTokenizer.tokenizer_id: WordPunctTokenizer(),
}

DEFAULT_TOKENIZER = _TOKENIZERS[WordPunctTokenizer.tokenizer_id]


def get_tokenizer(tokenizer_id: str) -> Tokenizer:
    try:
        return _TOKENIZERS[tokenizer_id]
    except KeyError:
        raise CorpusError(f"unknown tokenizer id: {tokenizer_id!r}") from None


def register_tokenizer(tokenizer: Tokenizer) -> None:
    _TOKENIZERS[tokenizer.tokenizer_id] = tokenizer


@dataclass(frozen=True)
class Document:
    """One knowledge passage: a title plus its full plain text."""

    doc_id: str
    title: str
    text: str

    def __post_init__(self) -> None:
        if not self.text:
            raise CorpusError(f"document {self.doc_id!r} has empty text")


@dataclass(frozen=True)
class Chunk:
    """A token window of one document; the unit of retrieval.

    ``start_token``/``end_token`` index into the parent document's token
    sequence; ``start_char``/``end_char`` locate the same window in the raw
    text. ``title`` is denormalized from the parent document so prompts can
    be rendered from chunks alone.
    """

    chunk_id: str
    doc_id: str
    start_token: int
    end_token: int
    text: str
    token_count: int
    tokenizer_id: str
    title: str = ""
    start_char: int = 0
    end_char: int = 0

    def __post_init__(self) -> None:
        if self.start_token < 0 or self.end_token <= self.start_token:
            raise CorpusError(f"chunk {self.chunk_id!r} has invalid token range")
        if self.token_count != self.end_token - self.start_token:
            raise CorpusError(f"chunk {self.chunk_id!r} token_count does not match its range")


@dataclass(frozen=True)
class QAItem:
    """One evaluation question with its gold answer."""

    question_id: str
    question: str
    gold_answer: str
    gold_support_titles: frozenset[str] | None = None
    dataset_tag: str = "hotpotqa"

    def __post_init__(self) -> None:
        if not self.question or not self.gold_answer:
            raise CorpusError(f"question {self.question_id!r} missing question or answer text")
        if self.dataset_tag not in DATASET_TAGS:
            raise CorpusError(f"unknown dataset tag: {self.dataset_tag!r}")


def _doc_id(title: str, text: str) -> str:
    digest = hashlib.sha1(f"{title}\x1f{text}".encode("utf-8")).hexdigest()
    return f"d{digest[:16]}"


def _join_sentences(sentences: Iterable[str]) -> str:
    return " ".join(s.strip() for s in map(str, sentences) if s.strip())


def _iter_records(path: Path) -> list[dict]:
    raw = path.read_text(encoding="utf-8")
    stripped = raw.lstrip()
    try:
        if stripped.startswith("["):
            records = json.loads(raw)
        else:
            records = [json.loads(line) for line in raw.splitlines() if line.strip()]
    except json.JSONDecodeError as exc:
        raise CorpusError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(records, list):
        raise CorpusError(f"{path} does not contain a list of records")
    return records


def _contexts_hotpot_style(record: dict) -> list[tuple[str, str]]:
    out = []
    for entry in record.get("context") or []:
        if isinstance(entry, (list, tuple)) and len(entry) >= 2:
            title, sentences = str(entry[0]), entry[1]
        elif isinstance(entry, dict):
            title = str(entry.get("title", ""))
            sentences = entry.get("sentences", [])
        else:
            continue
        text = _join_sentences(sentences) if isinstance(sentences, (list, tuple)) else str(sentences).strip()
        out.append((title, text))
    return out


def _contexts_musique(record: dict) -> list[tuple[str, str]]:
    out = []
    for para in record.get("paragraphs") or []:
        if not isinstance(para, dict):
            continue
        out.append((str(para.get("title", "")), str(para.get("paragraph_text", "")).strip()))
    return out


def _support_titles(record: dict, fmt: str) -> frozenset[str] | None:
    if fmt == "musique":
        titles = {
            str(p.get("title", ""))
            for p in record.get("paragraphs") or []
            if isinstance(p, dict) and p.get("is_supporting")
        }
    else:
        titles = {
            str(entry[0])
            for entry in record.get("supporting_facts") or []
            if isinstance(entry, (list, tuple)) and entry
        }
    return frozenset(titles) or None


def load_dataset(
    path: str | Path, fmt: str, restrict_to: set[str] | None = None
) -> tuple[list[QAItem], list[Document]]:
    """Read one dataset file in its distributed layout.

    Returns every QA record as a :class:`QAItem` and every context passage
    as a :class:`Document`, de-duplicated by (title, text). Records missing
    a question or answer are skipped and counted in a log line. With
    ``restrict_to`` set, only records with those question ids contribute
    (used to index contexts of a sampled subset only).
    """
    if fmt not in DATASET_TAGS:
        raise CorpusError(f"unknown dataset format: {fmt!r} (expected one of {DATASET_TAGS})")
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"dataset file not found: {path}")
    records = _iter_records(path)

    items: list[QAItem] = []
    docs: list[Document] = []
    seen: set[tuple[str, str]] = set()
    skipped = 0
    for i, record in enumerate(records):
        question = str(record.get("question") or "").strip()
        answer = str(record.get("answer") or "").strip()
        if not question or not answer:
            skipped += 1
            continue
        qid = str(record.get("_id") or record.get("id") or f"{fmt}-{i:06d}")
        if restrict_to is not None and qid not in restrict_to:
            continue
        items.append(
            QAItem(
                question_id=qid,
                question=question,
                gold_answer=answer,
                gold_support_titles=_support_titles(record, fmt),
                dataset_tag=fmt,
            )
        )
        contexts = _contexts_musique(record) if fmt == "musique" else _contexts_hotpot_style(record)
        for title, text in contexts:
            if not text:
                continue
            key = (title, text)
            if key in seen:
                continue
            seen.add(key)
            docs.append(Document(doc_id=_doc_id(title, text), title=title, text=text))
    if skipped:
        logger.warning("%s: skipped %d record(s) missing question or answer", path, skipped)
    return items, docs


def sample_questions(items: Sequence[QAItem], n: int, seed: int) -> list[QAItem]:
    """Draw ``n`` distinct questions; deterministic in (items, n, seed)."""
    if n > len(items):
        raise CorpusError(f"cannot sample {n} questions from {len(items)}")
    return random.Random(seed).sample(list(items), n)


def chunk_document(
    doc: Document,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    stride: int = DEFAULT_STRIDE,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
) -> list[Chunk]:
    """Cut a document into token windows that overlap by ``stride`` tokens.

    Window starts advance by ``chunk_size - stride``; the final window is
    clamped to the document end, so a document no longer than ``chunk_size``
    yields exactly one chunk.
    """
    if stride < 0 or chunk_size <= stride:
        raise CorpusError(f"need chunk_size > stride >= 0, got {chunk_size=}, {stride=}")
    if not doc.text:
        raise CorpusError(f"document {doc.doc_id!r} has empty text")
    tokens = tokenizer.tokenize(doc.text)
    total = len(tokens)
    if total == 0:
        raise CorpusError(f"document {doc.doc_id!r} has no tokens")

    step = chunk_size - stride
    chunks: list[Chunk] = []
    start = 0
    while True:
        end = min(start + chunk_size, total)
        start_char = tokens[start].start_char
        end_char = tokens[end - 1].end_char
        chunks.append(
            Chunk(
                chunk_id=f"{doc.doc_id}:{start}",
                doc_id=doc.doc_id,
                start_token=start,
                end_token=end,
                text=doc.text[start_char:end_char],
                token_count=end - start,
                tokenizer_id=tokenizer.tokenizer_id,
                title=doc.title,
                start_char=start_char,
                end_char=end_char,
            )
        )
        if end == total:
            return chunks
        start += step


def build_corpus(
    docs: Sequence[Document],
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    stride: int = DEFAULT_STRIDE,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
) -> list[Chunk]:
    """Chunk every document; chunk ids are globally unique (doc id + start)."""
    out: list[Chunk] = []
    for doc in docs:
        out.extend(chunk_document(doc, chunk_size=chunk_size, stride=stride, tokenizer=tokenizer))
    return out


# --- manifest / question file I/O -----------------------------------------
# Both files are JSONL with a typed header line, so readers can refuse files
# written under a different tokenizer or schema version.


def write_chunk_manifest(
    chunks: Sequence[Chunk],
    path: str | Path,
    chunk_size: int,
    stride: int,
    tokenizer_id: str,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "kind": "chunk_manifest",
        "schema_version": CHUNK_MANIFEST_VERSION,
        "tokenizer_id": tokenizer_id,
        "chunk_size": chunk_size,
        "stride": stride,
        "num_chunks": len(chunks),
    }
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for c in chunks:
            row = {
                "chunk_id": c.chunk_id,
                "doc_id": c.doc_id,
                "title": c.title,
                "start_token": c.start_token,
                "end_token": c.end_token,
                "token_count": c.token_count,
                "start_char": c.start_char,
                "end_char": c.end_char,
                "tokenizer_id": c.tokenizer_id,
                "text": c.text,
            }
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def read_chunk_manifest(path: str | Path) -> tuple[list[Chunk], dict]:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("kind") != "chunk_manifest":
            raise CorpusError(f"{path} is not a chunk manifest")
        if header.get("schema_version") != CHUNK_MANIFEST_VERSION:
            raise CorpusError(f"{path}: unsupported chunk manifest version {header.get('schema_version')}")
        chunks = []
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            chunks.append(
                Chunk(
                    chunk_id=row["chunk_id"],
                    doc_id=row["doc_id"],
                    start_token=row["start_token"],
                    end_token=row["end_token"],
                    text=row["text"],
                    token_count=row["token_count"],
                    tokenizer_id=row["tokenizer_id"],
                    title=row.get("title", ""),
                    start_char=row.get("start_char", 0),
                    end_char=row.get("end_char", 0),
                )
            )
    return chunks, header


def write_question_file(items: Sequence[QAItem], path: str | Path, meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"kind": "question_file", "schema_version": QUESTION_FILE_VERSION, "num_questions": len(items)}
    header.update(meta or {})
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for q in items:
            row = {
                "question_id": q.question_id,
                "question": q.question,
                "gold_answer": q.gold_answer,
                "gold_support_titles": sorted(q.gold_support_titles) if q.gold_support_titles else None,
                "dataset_tag": q.dataset_tag,
            }
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def read_question_file(path: str | Path) -> tuple[list[QAItem], dict]:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("kind") != "question_file":
            raise CorpusError(f"{path} is not a question file")
        items = []
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            titles = row.get("gold_support_titles")
            items.append(
                QAItem(
                    question_id=row["question_id"],
                    question=row["question"],
                    gold_answer=row["gold_answer"],
                    gold_support_titles=frozenset(titles) if titles else None,
                    dataset_tag=row["dataset_tag"],
                )
            )
    return items, header
