import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchor_rag.corpus import (
    CorpusError,
    Document,
    QAItem,
    WordPunctTokenizer,
    build_corpus,
    chunk_document,
    load_dataset,
    read_chunk_manifest,
    read_question_file,
    sample_questions,
    write_chunk_manifest,
    write_question_file,
)

TOK = WordPunctTokenizer()


def make_doc(n_tokens: int, doc_id: str = "doc") -> Document:
    return Document(doc_id=doc_id, title="T", text=" ".join(f"w{i}" for i in range(n_tokens)))


# --- tokenizer ---------------------------------------------------------------


def test_tokenizer_splits_words_and_punctuation():
    spans = TOK.tokenize("Hello, world!")
    assert [s.text for s in spans] == ["Hello", ",", "world", "!"]
    assert spans[0].start_char == 0 and spans[0].end_char == 5


def test_tokenizer_count_matches_tokenize():
    text = "Justin Lewis Bannan (born April 18, 1979) is a former American football defensive tackle."
    assert TOK.count(text) == len(TOK.tokenize(text))


# --- chunk_document ------------------------------------------------------------


def test_short_document_single_chunk():
    chunks = chunk_document(make_doc(300))
    assert [(c.start_token, c.end_token) for c in chunks] == [(0, 300)]
    assert chunks[0].token_count == 300


def test_900_token_document_three_chunks():
    chunks = chunk_document(make_doc(900))
    assert [(c.start_token, c.end_token) for c in chunks] == [(0, 400), (350, 750), (700, 900)]


def test_500_token_document_two_chunks():
    chunks = chunk_document(make_doc(500))
    assert [(c.start_token, c.end_token) for c in chunks] == [(0, 400), (350, 500)]


def test_chunk_ids_are_deterministic():
    doc = make_doc(900, doc_id="abc")
    ids = [c.chunk_id for c in chunk_document(doc)]
    assert ids == ["abc:0", "abc:350", "abc:700"]
    assert ids == [c.chunk_id for c in chunk_document(doc)]


def test_empty_document_rejected():
    with pytest.raises(CorpusError):
        Document(doc_id="x", title="", text="")
    doc = Document(doc_id="x", title="", text="   ")
    with pytest.raises(CorpusError):
        chunk_document(doc)


def test_bad_chunk_params_rejected():
    with pytest.raises(CorpusError):
        chunk_document(make_doc(10), chunk_size=50, stride=50)
    with pytest.raises(CorpusError):
        chunk_document(make_doc(10), chunk_size=50, stride=-1)


@settings(max_examples=60, deadline=None)
@given(
    total=st.integers(min_value=1, max_value=3000),
    chunk_size=st.integers(min_value=2, max_value=500),
    stride_frac=st.floats(min_value=0.0, max_value=0.99),
)
def test_chunking_invariants(total, chunk_size, stride_frac):
    stride = min(int(chunk_size * stride_frac), chunk_size - 1)
    doc = make_doc(total)
    chunks = chunk_document(doc, chunk_size=chunk_size, stride=stride)
    step = chunk_size - stride

    # boundary oracle: direct enumeration of window starts
    starts = [0]
    while starts[-1] + chunk_size < total:
        starts.append(starts[-1] + step)
    assert [(c.start_token, c.end_token) for c in chunks] == [
        (s, min(s + chunk_size, total)) for s in starts
    ]

    # count formula
    if total <= chunk_size:
        expected = 1
    else:
        expected = -(-(total - chunk_size) // step) + 1
    assert len(chunks) == expected

    # coverage without gaps, fixed overlap between neighbours
    covered = set()
    for c in chunks:
        assert c.token_count <= chunk_size
        covered.update(range(c.start_token, c.end_token))
    assert covered == set(range(total))
    for prev, nxt in zip(chunks, chunks[1:]):
        assert prev.end_token - nxt.start_token >= stride

    # reconstruction from non-overlapping suffixes
    token_texts = [t.text for t in TOK.tokenize(doc.text)]
    rebuilt = token_texts[chunks[0].start_token : chunks[0].end_token]
    for prev, nxt in zip(chunks, chunks[1:]):
        rebuilt.extend(token_texts[prev.end_token : nxt.end_token])
    assert rebuilt == token_texts


def test_chunk_text_slices_original_document():
    text = "Alpha beta, gamma; delta epsilon zeta eta theta."
    doc = Document(doc_id="d", title="T", text=text)
    chunks = chunk_document(doc, chunk_size=4, stride=1)
    for c in chunks:
        assert c.text == text[c.start_char : c.end_char]
        assert TOK.count(c.text) == c.token_count


# --- build_corpus ---------------------------------------------------------------


def test_build_corpus_counts():
    docs = [make_doc(300, "a"), make_doc(300, "b")]
    assert len(build_corpus(docs)) == 2
    docs = [make_doc(900, "a"), make_doc(300, "b")]
    assert len(build_corpus(docs)) == 4
    assert build_corpus([]) == []


def test_build_corpus_unique_ids():
    docs = [make_doc(900, "a"), make_doc(900, "b")]
    chunks = build_corpus(docs)
    assert len({c.chunk_id for c in chunks}) == len(chunks)


# --- dataset loading --------------------------------------------------------------


def write_hotpot(path, records):
    path.write_text(json.dumps(records), encoding="utf-8")


def hotpot_record(qid, question="Who?", answer="X", n_contexts=2, title_prefix="t"):
    return {
        "_id": qid,
        "question": question,
        "answer": answer,
        "context": [[f"{title_prefix}{i}", [f"Sentence one of {i}.", f"Sentence two of {i}."]] for i in range(n_contexts)],
        "supporting_facts": [[f"{title_prefix}0", 0]],
    }


def test_load_hotpot_record_with_ten_contexts(tmp_path):
    path = tmp_path / "hotpot.json"
    write_hotpot(path, [hotpot_record("q1", n_contexts=10)])
    items, docs = load_dataset(path, "hotpotqa")
    assert len(items) == 1 and len(docs) == 10
    assert items[0].dataset_tag == "hotpotqa"
    assert items[0].gold_support_titles == frozenset({"t0"})
    assert docs[0].text == "Sentence one of 0. Sentence two of 0."


def test_load_empty_context_list(tmp_path):
    path = tmp_path / "hotpot.json"
    record = hotpot_record("q1")
    record["context"] = []
    write_hotpot(path, [record])
    items, docs = load_dataset(path, "hotpotqa")
    assert len(items) == 1 and docs == []


def test_shared_passage_deduplicated(tmp_path):
    path = tmp_path / "hotpot.json"
    write_hotpot(path, [hotpot_record("q1", n_contexts=1), hotpot_record("q2", n_contexts=1)])
    items, docs = load_dataset(path, "hotpotqa")
    assert len(items) == 2 and len(docs) == 1


def test_records_missing_fields_skipped(tmp_path, caplog):
    path = tmp_path / "hotpot.json"
    bad = hotpot_record("q2")
    del bad["answer"]
    write_hotpot(path, [hotpot_record("q1"), bad])
    with caplog.at_level("WARNING"):
        items, _ = load_dataset(path, "hotpotqa")
    assert [q.question_id for q in items] == ["q1"]
    assert "skipped 1" in caplog.text


def test_load_musique_jsonl(tmp_path):
    path = tmp_path / "musique.jsonl"
    record = {
        "id": "mu1",
        "question": "Who?",
        "answer": "X",
        "paragraphs": [
            {"idx": 0, "title": "p0", "paragraph_text": "First paragraph.", "is_supporting": True},
            {"idx": 1, "title": "p1", "paragraph_text": "Second paragraph.", "is_supporting": False},
        ],
    }
    path.write_text(json.dumps(record) + "\n", encoding="utf-8")
    items, docs = load_dataset(path, "musique")
    assert len(items) == 1 and len(docs) == 2
    assert items[0].gold_support_titles == frozenset({"p0"})


def test_load_2wiki_uses_hotpot_layout(tmp_path):
    path = tmp_path / "dev.json"
    write_hotpot(path, [hotpot_record("w1")])
    items, docs = load_dataset(path, "2wiki")
    assert items[0].dataset_tag == "2wiki" and len(docs) == 2


def test_unknown_format_rejected(tmp_path):
    path = tmp_path / "x.json"
    write_hotpot(path, [])
    with pytest.raises(CorpusError):
        load_dataset(path, "triviaqa")


def test_missing_file_rejected(tmp_path):
    with pytest.raises(CorpusError):
        load_dataset(tmp_path / "nope.json", "hotpotqa")


def test_restrict_to_filters_documents(tmp_path):
    path = tmp_path / "hotpot.json"
    write_hotpot(path, [hotpot_record("q1", title_prefix="a"), hotpot_record("q2", title_prefix="b")])
    items, docs = load_dataset(path, "hotpotqa", restrict_to={"q2"})
    assert [q.question_id for q in items] == ["q2"]
    assert all(d.title.startswith("b") for d in docs)


# --- sampling -----------------------------------------------------------------


def make_items(n):
    return [
        QAItem(question_id=f"q{i:04d}", question=f"Question {i}?", gold_answer=f"A{i}", dataset_tag="2wiki")
        for i in range(n)
    ]


def test_sample_full_set_returns_all():
    items = make_items(500)
    assert sorted(sample_questions(items, 500, seed=1), key=lambda q: q.question_id) == items


def test_sample_deterministic():
    items = make_items(100)
    assert sample_questions(items, 30, seed=9) == sample_questions(items, 30, seed=9)


def test_sample_seed_changes_selection():
    items = make_items(1000)
    a = {q.question_id for q in sample_questions(items, 500, seed=7)}
    b = {q.question_id for q in sample_questions(items, 500, seed=8)}
    assert a != b


def test_sample_no_duplicates():
    items = make_items(50)
    picked = sample_questions(items, 50, seed=3)
    assert len({q.question_id for q in picked}) == 50


def test_sample_too_large_rejected():
    with pytest.raises(CorpusError):
        sample_questions(make_items(3), 4, seed=0)


# --- manifest I/O -----------------------------------------------------------------


def test_chunk_manifest_round_trip(tmp_path):
    chunks = build_corpus([make_doc(900, "a"), make_doc(120, "b")])
    path = tmp_path / "chunks.jsonl"
    write_chunk_manifest(chunks, path, chunk_size=400, stride=50, tokenizer_id=TOK.tokenizer_id)
    loaded, header = read_chunk_manifest(path)
    assert loaded == chunks
    assert header["tokenizer_id"] == TOK.tokenizer_id

    again = tmp_path / "chunks2.jsonl"
    write_chunk_manifest(loaded, again, chunk_size=400, stride=50, tokenizer_id=TOK.tokenizer_id)
    assert path.read_bytes() == again.read_bytes()


def test_question_file_round_trip(tmp_path):
    items = make_items(5)
    path = tmp_path / "questions.jsonl"
    write_question_file(items, path, meta={"seed": 1})
    loaded, header = read_question_file(path)
    assert loaded == items and header["seed"] == 1


def test_manifest_kind_checked(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"kind": "something_else"}\n', encoding="utf-8")
    with pytest.raises(CorpusError):
        read_chunk_manifest(path)
    with pytest.raises(CorpusError):
        read_question_file(path)
