import json
from pathlib import Path

import pytest

from anchor_rag.corpus import Document, build_corpus, read_question_file
from anchor_rag.embed_index import HashingEmbedder, build_index
from anchor_rag.llm_gateway import ScriptedProvider

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture(scope="session")
def bannan_docs() -> list[Document]:
    docs = []
    with (DATA_DIR / "bannan_docs.jsonl").open(encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            docs.append(Document(doc_id=row["doc_id"], title=row["title"], text=row["text"]))
    return docs


@pytest.fixture(scope="session")
def bannan_chunks(bannan_docs):
    return build_corpus(bannan_docs)


@pytest.fixture(scope="session")
def bannan_index(bannan_chunks):
    return build_index(bannan_chunks, HashingEmbedder())


@pytest.fixture(scope="session")
def golden_questions():
    items, _ = read_question_file(DATA_DIR / "questions.jsonl")
    return {q.question_id: q for q in items}


@pytest.fixture()
def scripted_provider() -> ScriptedProvider:
    return ScriptedProvider.from_jsonl(DATA_DIR / "scripted_fixtures.jsonl")
