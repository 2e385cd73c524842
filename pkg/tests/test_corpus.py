import json

import pytest
from hypothesis import given, strategies as st

from fidqa.corpus import Document, chunk_document, read_documents, split_words, write_passages


@pytest.mark.parametrize("text, words", [
    ("the cat  sat", ["the", "cat", "sat"]),
    ("", []),
    ("a\tb\nc", ["a", "b", "c"]),
    (" x y ", ["x", "y"]),
])
def test_split_words(text, words):
    assert split_words(text) == words


def _doc(n_words, doc_id="d"):
    return Document(doc_id, "T", " ".join(f"w{i}" for i in range(n_words)))


@pytest.mark.parametrize("n_words, size, expected", [
    (250, 100, [100, 100, 50]),
    (100, 100, [100]),
    (7, 3, [3, 3, 1]),
    (0, 5, []),
])
def test_chunk_sizes(n_words, size, expected):
    assert [p.word_count for p in chunk_document(_doc(n_words), size)] == expected


def test_chunk_ids_and_titles():
    passages = chunk_document(_doc(7), 3)
    assert [p.id for p in passages] == ["d#0", "d#1", "d#2"]
    assert {p.title for p in passages} == {"T"}
    assert passages[2].text == "w6"


def test_rejects_zero_chunk_size():
    with pytest.raises(ValueError):
        chunk_document(_doc(3), 0)


@given(st.text(alphabet=st.sampled_from("ab \t\n　"), max_size=200), st.integers(1, 12))
def test_round_trip_and_sizes(text, size):
    doc = Document("x", "", text)
    passages = chunk_document(doc, size)
    words = [w for p in passages for w in p.text.split(" ")] if passages else []
    assert words == split_words(text)
    assert all(1 <= p.word_count <= size for p in passages)
    assert all(p.word_count == size for p in passages[:-1])
    assert chunk_document(doc, size) == passages


def test_jsonl_io(tmp_path):
    src = tmp_path / "docs.jsonl"
    src.write_text(json.dumps({"id": "a", "title": "A", "text": "one two three"}) + "\n", encoding="utf-8")
    docs = read_documents(src)
    out = tmp_path / "p.jsonl"
    write_passages(out, chunk_document(docs[0], 2))
    rows = [json.loads(line) for line in out.read_text(encoding="utf-8").splitlines()]
    assert rows == [
        {"id": "a#0", "doc_id": "a", "title": "A", "text": "one two"},
        {"id": "a#1", "doc_id": "a", "title": "A", "text": "three"},
    ]
