from __future__ import annotations

import pytest
from hypothesis import given, settings, strategies as st

from ctcam.errors import DataError
from ctcam.scoring import DEL, INS, MATCH, SUB, align_words, score_wer
from oracles import edit_distance

words = st.lists(st.sampled_from(["a", "b", "c", "d"]), max_size=8)


def test_single_substitution():
    r = score_wer([["museums", "in", "chicago"]], [["museum", "in", "chicago"]])
    assert (r.substitutions, r.insertions, r.deletions) == (1, 0, 0)
    assert r.errors / r.ref_words == 1 / 3
    assert r.wer == pytest.approx(100 / 3)


def test_identical_corpus_scores_zero():
    refs = [["a", "b"], ["c"], ["d", "d", "a"]]
    assert score_wer(refs, [list(r) for r in refs]).wer == 0.0


def test_insertions_and_deletions_by_hand():
    r = score_wer([["a", "b", "c"], ["a", "b", "c"]], [["a", "b", "x", "c"], ["b", "c"]])
    assert (r.substitutions, r.insertions, r.deletions) == (0, 1, 1)
    assert [op for op, *_ in r.alignments[0]] == [MATCH, MATCH, INS, MATCH]
    assert [op for op, *_ in r.alignments[1]] == [DEL, MATCH, MATCH]
    r = score_wer([["a"]], [[]])
    assert (r.deletions, r.wer) == (1, 100.0)


@settings(max_examples=300, deadline=None)
@given(ref=words, hyp=words)
def test_alignment_cost_equals_oracle_distance(ref, hyp):
    ops = align_words(ref, hyp)
    assert sum(op != MATCH for op, *_ in ops) == edit_distance(ref, hyp)
    assert [r for _, r, _ in ops if r is not None] == ref
    assert [h for *_, h in ops if h is not None] == hyp
    assert all((op == MATCH) == (r == h) for op, r, h in ops if op in (MATCH, SUB))


@settings(max_examples=50, deadline=None)
@given(pairs=st.lists(st.tuples(words.filter(bool), words), min_size=1, max_size=6))
def test_corpus_wer_equals_oracle(pairs):
    refs, hyps = zip(*pairs)
    r = score_wer(refs, hyps)
    n = sum(map(len, refs))
    assert r.wer == pytest.approx(100 * sum(edit_distance(a, b) for a, b in pairs) / n)


def test_exclude_oov_drops_exactly_the_oov_utterances():
    refs = [["a", "b"], ["a", "zz"], ["c"], ["yy", "yy"]]
    hyps = [["a", "b"], ["a", "b"], ["d"], ["a"]]
    r = score_wer(refs, hyps, mode="exclude_oov", vocab={"a", "b", "c", "d"})
    assert r.kept == [0, 2]
    assert r.utterances == 2 and r.ref_words == 3
    assert r.wer == pytest.approx(100 / 3)
    assert r.oov_rate == pytest.approx(100 * 3 / 7)
    assert r.oov_utterance_rate == 50.0
    # "all" mode still reports OOV rates when a vocabulary is given
    assert score_wer(refs, hyps, vocab={"a", "b", "c", "d"}).utterances == 4


def test_report_text():
    r = score_wer([["museums", "in", "chicago"]], [["museum", "in", "chicago"]])
    assert "wer=33.3333" in r.summary_lines()
    text = r.aligned_text(["utt1"])
    assert text.splitlines()[0] == "id: utt1"
    assert "museums" in text and "S" in text.splitlines()[3]


def test_errors():
    with pytest.raises(DataError):
        score_wer([], [])
    with pytest.raises(DataError):
        score_wer([["a"]], [])
    with pytest.raises(DataError):
        score_wer([["a"]], [["a"]], mode="exclude_oov")
    with pytest.raises(DataError):
        score_wer([["zz"]], [["a"]], mode="exclude_oov", vocab={"a"})
