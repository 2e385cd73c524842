"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (printed in the terminal summary) and
then asserts the same condition, so a failing criterion fails the run.
"""

import os
import subprocess
import sys
import time
import unicodedata
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest

import seq2seq_ref as ref
from conftest import make_passages, record
from fidqa import tensor as T
from fidqa.bm25 import analyze, bm25_score, build_index, retrieve
from fidqa.checks import tiny_model_gradcheck
from fidqa.corpus import chunk_corpus
from fidqa.evaluation import exact_match, normalize_answer
from fidqa.model import FidModel, ModelConfig, encoder_pair_total
from fidqa.study import recall_at_k
from fidqa.synthetic import copy_task, needle_corpus, split_by_entity
from fidqa.trainer import TrainConfig, contexts_from_retrieval, evaluate, train
from fidqa.vocab import DECODER_START, PAD, QUESTION, RESERVED, build_vocab

pytestmark = pytest.mark.acceptance


def _vocab(words=50):
    return build_vocab([" ".join(f"w{i}" for i in range(words - len(RESERVED)))], max_size=words)


def _rows(rng, shape, vocab_size, pad_tail=0):
    tok = rng.integers(len(RESERVED), vocab_size, size=shape)
    tok[..., 0] = QUESTION
    if pad_tail:
        tok[..., -pad_tail:] = PAD
    return tok


# 1 ---------------------------------------------------------------------------------

def test_criterion_1_full_model_gradcheck():
    start = time.perf_counter()
    errors = tiny_model_gradcheck(seed=0, max_coords=64)
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-3 and elapsed < 60
    record(1, ok, f"max rel err {errors[worst]:.2e} ({worst}), {elapsed:.1f}s "
                  f"[64 coords + 1 random direction per tensor, float64]")
    assert ok


# 2 ---------------------------------------------------------------------------------

def test_criterion_2_single_passage_equals_seq2seq():
    vocab = _vocab()
    cfg = ModelConfig(vocab_size=len(vocab), d_model=32, n_heads=4, n_enc_layers=2, n_dec_layers=2, d_ff=64,
                      max_input_len=16, max_answer_len=6, dropout_p=0.0, init_std=0.2)
    rng = np.random.default_rng(0)
    worst, same_greedy = 0.0, True
    for seed in range(3):
        model = FidModel(cfg, vocab, seed=seed, dtype=np.float64)
        P = {k: v.data for k, v in model.params.items()}
        ids = _rows(rng, (14,), len(vocab), pad_tail=3)
        enc = model.encode(ids[None])
        out = model.generate(ids[None, None])[0]
        same_greedy &= out == ref.greedy(P, cfg, ids, cfg.max_answer_len)
        prefix = np.array([DECODER_START, *rng.integers(len(RESERVED), len(vocab), size=5)])
        expected = ref.decode(P, cfg, ref.encode(P, cfg, ids), ids != PAD, prefix)
        for t in range(1, len(prefix) + 1):
            worst = max(worst, float(np.max(np.abs(model.decode_step(prefix[:t], enc)[0] - expected[t - 1]))))
    ok = worst < 1e-6 and same_greedy
    record(2, ok, f"max |logit diff| {worst:.1e} vs numpy seq2seq reference, greedy identical: {same_greedy}")
    assert ok


# 3 ---------------------------------------------------------------------------------

def test_criterion_3_encoder_independence_float32():
    vocab = _vocab(200)
    cfg = ModelConfig(vocab_size=len(vocab), max_input_len=64, dropout_p=0.1)
    model = FidModel(cfg, vocab, seed=0).eval()
    rng = np.random.default_rng(1)
    batch = _rows(rng, (2, 10, 64), len(vocab))
    batch[:, ::3, 40:] = PAD
    together = model.encode(batch).states.data
    worst = 0.0
    for b in range(2):
        for i in range(10):
            alone = model.encode(batch[b, i:i + 1]).states.data[0, 0]
            worst = max(worst, float(np.max(np.abs(together[b, i] - alone))))
    shuffled = model.encode(batch[:, ::-1]).states.data[:, ::-1]
    worst = max(worst, float(np.max(np.abs(shuffled - together))))
    ok = worst <= 1e-6 and together.dtype == np.float32
    record(3, ok, f"max |diff| {worst:.1e} at float32 over 20 rows co-batched vs alone and reversed")
    assert ok


# 4 ---------------------------------------------------------------------------------

def test_criterion_4_linear_scaling_certificate():
    vocab = _vocab(100)
    cfg = ModelConfig(vocab_size=len(vocab), max_input_len=250, dropout_p=0.0)
    model = FidModel(cfg, vocab, seed=0)
    rng = np.random.default_rng(2)
    exact = True
    measured = {}
    for n in (1, 10, 100):
        model.counters.clear()
        with T.no_grad():
            model.encode(_rows(rng, (1, n, 250), len(vocab)))
        measured[n] = model.counters["encoder_pairs"]
        exact &= measured[n] == n * 250 ** 2 * cfg.n_enc_layers * cfg.n_heads == encoder_pair_total(n, 250, cfg)
    ratio = Fraction(measured[100], (100 * 250) ** 2 * cfg.n_enc_layers * cfg.n_heads)
    ok = exact and ratio == Fraction(1, 100)
    record(4, ok, f"measured pairs {measured} == n*L^2*layers*heads: {exact}; FiD/joint at n=100, L=250 = {ratio}")
    assert ok


# 5 ---------------------------------------------------------------------------------

def test_criterion_5_bm25_oracle():
    idx = build_index(make_passages(["cat sat mat", "dog sat log", "cat cat hat"]))
    # hand values: idf(cat) = ln(1 + 1.5/2.5) = ln 1.6, tf factor 1 for p1, 4.4/3.2 for p3
    hand = {0: 0.470003629245735553650937031148, 1: 0.0, 2: 0.646254990212886386270038417829}
    hand_err = max(abs(bm25_score(idx, ["cat"], o) - v) for o, v in hand.items())

    rng = np.random.default_rng(5)
    words = "ant bee cat dog elk fox gnu".split()
    failures = Counter()
    for _ in range(1000):
        # idf monotone in df: the same single-occurrence term scored in corpora with df and df+1 holders
        n = int(rng.integers(3, 30))
        df = int(rng.integers(1, n - 1))
        make = lambda d: make_passages(["t x"] * d + ["y x"] * (n - d))  # noqa: E731
        if not bm25_score(build_index(make(df)), ["t"], 0) > bm25_score(build_index(make(df + 1)), ["t"], 0):
            failures["idf"] += 1
        # tf monotone at equal length
        tf, other = int(rng.integers(1, 20)), int(rng.integers(0, 20))
        length = tf + 1 + other
        pair = build_index(make_passages([" ".join(["t"] * tf + ["u"] * (length - tf)),
                                          " ".join(["t"] * (tf + 1) + ["u"] * (length - tf - 1)), "v"]))
        if not bm25_score(pair, ["t"], 1) > bm25_score(pair, ["t"], 0) > 0:
            failures["tf"] += 1
        # zero overlap scores zero
        text = " ".join(rng.choice(words, size=int(rng.integers(1, 8))))
        zero = build_index(make_passages([text, "ant"]))
        if bm25_score(zero, analyze("zebra yak"), 0) != 0.0:
            failures["zero"] += 1
    ok = hand_err < 1e-9 and not failures
    record(5, ok, f"hand corpus max err {hand_err:.1e}; property failures over 1000 cases each: {dict(failures) or 0}")
    assert ok


# 6 ---------------------------------------------------------------------------------

def test_criterion_6_em_normalization():
    vectors = {"The Eiffel Tower.": "eiffel tower", "": "", "a  AN the": ""}
    vec_ok = all(normalize_answer(k) == v for k, v in vectors.items())
    vec_ok &= exact_match("Paris", ["paris!", "Paris, France"]) == 1 and exact_match("Paris", []) == 0
    rng = np.random.default_rng(6)
    pieces = ["the", "a", "An", "THE", " ", "  ", "\t", ".", ",", "!", "-", "'", "’", "«", "¿", "。", "Ab", "x",
              "É", "ß", "z_z", "1", "$"]
    bad = Counter()
    for i in range(10_000):
        if i % 2:
            s = "".join(rng.choice(pieces, size=int(rng.integers(0, 9))))
        else:
            s = "".join(chr(int(c)) for c in rng.integers(0x20, 0x3000, size=int(rng.integers(0, 16)))
                        if not 0xD800 <= c < 0xE000)
        out = normalize_answer(s)
        bad["idempotent"] += normalize_answer(out) != out
        bad["uppercase"] += out != out.lower()
        bad["punctuation"] += any(unicodedata.category(ch).startswith("P") for ch in out)
        bad["whitespace"] += "  " in out or out != out.strip()
    bad = +bad
    ok = vec_ok and not bad
    record(6, ok, f"listed vectors pass: {vec_ok}; property violations over 10^4 strings: {dict(bad) or 0}")
    assert ok


# 7 ---------------------------------------------------------------------------------

def test_criterion_7_copy_task_overfit():
    examples, contexts = copy_task(n_examples=64, n_passages=2, seed=0)
    texts = [ex.question for ex in examples] + [f"{t} {x}" for c in contexts.values() for t, x in c]
    vocab = build_vocab(texts, max_size=100)
    cfg = ModelConfig(vocab_size=len(vocab), d_model=32, n_heads=4, n_enc_layers=2, n_dec_layers=2, d_ff=64,
                      max_input_len=24, max_answer_len=4)
    model = FidModel(cfg, vocab, seed=0)
    tc = TrainConfig(learning_rate=1e-3, batch_size=16, total_steps=2000, eval_every=100, n_train_passages=2)
    start = time.perf_counter()
    # overfit oracle: the validation split is the training set itself
    result = train(model, examples, contexts, tc, examples)
    elapsed = time.perf_counter() - start
    losses = [r["loss"] for r in result.log]
    first = next((r["step"] for r in result.log if r.get("val_em", 0) >= 0.95), None)
    exact = all(model.greedy_decode(ex.question, contexts[ex.id]) == ex.answers[0] for ex in examples)
    ok = result.best_em >= 0.95 and elapsed < 600 and np.mean(losses[-100:]) < np.mean(losses[:100])
    record(7, ok, f"best val EM {result.best_em:.3f} (first >= 0.95 at step {first}), {elapsed:.0f}s, "
                  f"loss {np.mean(losses[:100]):.3f} -> {np.mean(losses[-100:]):.3f}, memorized exactly: {exact}")
    assert ok


# 8 and 9: synthetic needle-in-haystack ---------------------------------------------

STEPS = 3000
NEEDLE_MODEL = dict(d_model=32, n_heads=4, n_enc_layers=2, n_dec_layers=2, d_ff=64, max_input_len=32,
                    max_answer_len=4, init_std=0.1)


@pytest.fixture(scope="module")
def needle():
    corpus = needle_corpus(n_entities=2000, n_chatter=0, seed=0)
    passages = list(chunk_corpus(corpus.documents))
    index = build_index(passages)
    results = [retrieve(index, q.question, 10, q.id) for q in corpus.questions]
    contexts = contexts_from_retrieval(results, {p.id: p for p in passages})
    train_q, val_q, test_q = split_by_entity(corpus, n_test=125, n_val=25)
    vocab = build_vocab([q.question for q in corpus.questions] + [p.title + " " + p.text for p in passages], 20_000)
    cfg = ModelConfig(vocab_size=len(vocab), **NEEDLE_MODEL)
    test_ids = {q.id for q in test_q}
    gold = {q.id: {corpus.gold_doc[q.id] + "#0"} for q in test_q}
    return dict(corpus=corpus, contexts=contexts, train=train_q, val=val_q, test=test_q, vocab=vocab, cfg=cfg,
                results=[r for r in results if r.question_id in test_ids], gold=gold)


def _fit(needle, n, steps, init=None, seed=0):
    model = FidModel(needle["cfg"], needle["vocab"], seed=seed)
    if init is not None:
        model.load_state_dict(init)
    tc = TrainConfig(learning_rate=1e-3, batch_size=16, total_steps=steps, eval_every=min(250, steps),
                     n_train_passages=n, n_eval_passages=10, seed=seed)
    result = train(model, needle["train"], needle["contexts"], tc, needle["val"])
    return model, result


@pytest.fixture(scope="module")
def full_run(needle):
    return _fit(needle, 10, STEPS)


def test_criterion_8_more_passages_help(needle, full_run):
    recall = {k: recall_at_k(needle["results"], needle["gold"], k) for k in (1, 2, 5, 10)}
    monotone = all(recall[a] <= recall[b] for a, b in zip(list(recall), list(recall)[1:]))
    model, _ = full_run
    em1 = evaluate(model, needle["test"], needle["contexts"], 1).em
    em10 = evaluate(model, needle["test"], needle["contexts"], 10).em
    ok = monotone and len(needle["test"]) == 500 and em10 >= em1 and em10 - em1 > 0
    record(8, ok, f"500 held-out questions; recall@k {recall}; n=10 model EM(k=1) {em1:.3f}, EM(k=10) {em10:.3f}")
    assert ok


def test_criterion_9_small_then_refinetune(needle, full_run):
    full_model, full = full_run
    small_model, small = _fit(needle, 2, STEPS)
    refined_model, refined = _fit(needle, 10, STEPS // 10, init=small_model.state_dict())
    em = {name: evaluate(m, needle["test"], needle["contexts"], 10).em
          for name, m in (("n=2", small_model), ("n=2 + refinetune", refined_model), ("n=10", full_model))}
    protocol_ops = small.encoder_token_ops + refined.encoder_token_ops
    gap = em["n=10"] - em["n=2"]
    closed = em["n=2 + refinetune"] - em["n=2"]
    cheaper = protocol_ops < full.encoder_token_ops
    # with gap <= 0 this still demands the refinetuned model reach the midpoint of the two
    closes_half = closed >= 0.5 * gap
    ok = cheaper and closes_half
    record(9, ok, f"test EM at k=10 {({k: round(v, 3) for k, v in em.items()})}; encoder token-ops "
                  f"{protocol_ops} vs {full.encoder_token_ops}; gap closed {closed:+.3f} of {gap:+.3f}")
    assert ok


# 10 --------------------------------------------------------------------------------

def _pipeline(workdir):
    env = dict(os.environ, PYTHONHASHSEED="0")

    def run(*args):
        proc = subprocess.run([sys.executable, "-m", "fidqa", *args], cwd=workdir, env=env,
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        return proc.stdout

    run("make-toy", "--out", "data", "--seed", "0")
    run("ingest", "--docs", "data/docs.jsonl", "--out", "passages.jsonl")
    run("index", "--passages", "passages.jsonl", "--out", "bm25.idx")
    run("retrieve", "--index", "bm25.idx", "--questions", "data/all_questions.jsonl", "--k", "10",
        "--out", "retrieved.jsonl")
    run("train", "--qa", "data/train.jsonl", "--retrieved", "retrieved.jsonl", "--passages", "passages.jsonl",
        "--out", "run", "--n-passages", "10", "--steps", "150", "--eval-every", "50", "--lr", "1e-3",
        "--batch-size", "16", "--d-model", "32", "--d-ff", "64", "--max-input-len", "32", "--max-answer-len", "4",
        "--init-std", "0.1", "--seed", "0")
    run("predict", "--ckpt", "run/best.ckpt", "--qa", "data/test.jsonl", "--retrieved", "retrieved.jsonl",
        "--passages", "passages.jsonl", "--n-passages", "10", "--out", "preds.jsonl")
    summary = run("evaluate", "--predictions", "preds.jsonl", "--qa", "data/test.jsonl").strip()
    return (workdir / "preds.jsonl").read_bytes(), summary


def test_criterion_10_pipeline_reproducible(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    preds_a, em_a = _pipeline(tmp_path / "a")
    preds_b, em_b = _pipeline(tmp_path / "b")
    ok = preds_a == preds_b and em_a == em_b and len(preds_a) > 0
    record(10, ok, f"predictions byte-identical: {preds_a == preds_b} ({len(preds_a)} bytes); "
                   f"EM run A '{em_a}', run B '{em_b}'")
    assert ok
