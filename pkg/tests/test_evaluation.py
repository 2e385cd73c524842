import json
import string
import unicodedata

import pytest
from hypothesis import given, settings, strategies as st

from fidqa.errors import DataError
from fidqa.evaluation import (EMReport, Prediction, exact_match, normalize_answer, read_predictions, score,
                              write_predictions)
from fidqa.trainer import QAExample


@pytest.mark.parametrize("raw, expected", [
    ("The Eiffel Tower.", "eiffel tower"),
    ("", ""),
    ("a  AN the", ""),
    ("  Paris,   France!  ", "paris france"),
    ("theater", "theater"),               # articles are whole words only
    ("rock-n-roll", "rocknroll"),          # punctuation is deleted, not spaced
    ("the\u2014end\u201d", "theend"),      # Unicode dash and quote
    ("U.S.A. and the U.K.", "usa and uk"),
    ("$100", "$100"),                      # symbols (S*) are not punctuation
    ("Ça VA", "ça va"),
])
def test_normalize_examples(raw, expected):
    assert normalize_answer(raw) == expected


def test_exact_match_examples():
    assert exact_match("Paris", ["paris!", "Paris, France"]) == 1
    assert exact_match("Paris", []) == 0
    assert exact_match("London", ["Paris"]) == 0
    assert exact_match("the  Beatles", ["Beatles"]) == 1


texts = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=40)
# bias towards the interesting characters so articles and punctuation actually occur
mixed = st.lists(st.sampled_from(["the", "a", "An", "THE", " ", "  ", ".", ",", "-", "'", "’", "\t", "x", "Ab",
                                  "¿", "。", "z_z"]) | texts, max_size=8).map("".join)


def _checks(s: str) -> None:
    out = normalize_answer(s)
    assert normalize_answer(out) == out
    assert out == out.lower()
    assert not any(unicodedata.category(ch).startswith("P") for ch in out)
    assert "  " not in out and out == out.strip()
    assert exact_match(s, [out]) == 1 and exact_match(out, [s]) == 1


@given(texts)
@settings(max_examples=5000, deadline=None)
def test_normalize_properties_random_unicode(s):
    _checks(s)


@given(mixed)
@settings(max_examples=5000, deadline=None)
def test_normalize_properties_article_and_punct_heavy(s):
    _checks(s)


@given(st.text(alphabet=string.printable, max_size=30))
@settings(max_examples=500, deadline=None)
def test_exact_match_reflexive(x):
    assert exact_match(x, [x]) == 1


def _examples():
    return [QAExample("q1", "capital of france?", ("Paris",)), QAExample("q2", "who wrote hamlet?", ("Shakespeare",))]


def test_score_and_summary():
    report = score([Prediction("q1", "paris"), Prediction("q2", "Marlowe")], _examples())
    assert (report.n_questions, report.n_correct, report.em) == (2, 1, 0.5)
    assert report.verdicts == {"q1": 1, "q2": 0}
    assert report.summary() == "EM: 50.00 (1/2)"
    perfect = score([Prediction("q1", "Paris"), Prediction("q2", "Shakespeare")], _examples())
    assert perfect.em == 1.0
    assert json.loads(json.dumps(perfect.to_json()))["n_correct"] == 2


@pytest.mark.parametrize("preds", [
    [Prediction("q1", "Paris")],
    [Prediction("q1", "Paris"), Prediction("q1", "Paris"), Prediction("q2", "x")],
    [Prediction("q1", "Paris"), Prediction("q2", "x"), Prediction("q3", "y")],
])
def test_score_rejects_bad_prediction_sets(preds):
    with pytest.raises(DataError):
        score(preds, _examples())


def test_prediction_io(tmp_path):
    path = tmp_path / "preds.jsonl"
    preds = [Prediction("q1", "Zürich"), Prediction("q2", "")]
    assert write_predictions(path, preds) == 2
    assert read_predictions(path) == preds
    (tmp_path / "bad.jsonl").write_text('{"question_id": "q1", "answer": "a"}\n{"question_id": 3}\n')
    with pytest.raises(DataError, match=":2"):
        read_predictions(tmp_path / "bad.jsonl")


def test_report_summary_rounding():
    assert EMReport(3, 2, 2 / 3).summary() == "EM: 66.67 (2/3)"
