from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctcam import cdphone
from ctcam.cdphone import BOUNDARY, PhoneSample, PhoneticQuestion
from ctcam.errors import DataError, ShapeError, UncoveredPhoneError, UnknownLabelError
from oracles import diag_gaussian_loglik, minimum_duration_by_sorting
from synthetic import PH, PHONES, two_context_samples


def _runs(labels):
    """Independent run-length scanner."""
    out, start = [], 0
    for t in range(1, len(labels) + 1):
        if t == len(labels) or labels[t] != labels[t - 1]:
            out.append((labels[start], start, t))
            start = t
    return out


def test_collect_samples_by_hand():
    feats = np.arange(4 * 40, dtype=float).reshape(4, 40)
    samples = cdphone.collect_samples([0, 0, 0, 1], feats)
    assert len(samples) == 2
    a, b = samples
    assert (a.phone, a.left, a.right, a.duration_frames) == (0, BOUNDARY, 1, 3)
    assert np.array_equal(a.vec, np.concatenate([feats[0], feats[1], feats[2]]))
    assert np.array_equal(b.vec, np.concatenate([feats[3]] * 3))
    assert (b.left, b.right) == (0, BOUNDARY)
    assert a.vec.shape == (120,)


def test_collect_samples_errors():
    with pytest.raises(ShapeError):
        cdphone.collect_samples([0, 1], np.zeros((3, 40)))
    with pytest.raises(ShapeError):
        cdphone.collect_samples([0, 1], np.zeros((2, 39)))


@settings(max_examples=50, deadline=None)
@given(labels=st.lists(st.integers(0, 3), min_size=1, max_size=30))
def test_sample_count_equals_run_count(labels):
    feats = np.random.default_rng(len(labels)).normal(size=(len(labels), 40))
    samples = cdphone.collect_samples(labels, feats)
    runs = _runs(labels)
    assert len(samples) == len(runs)
    assert [(s.phone, s.duration_frames) for s in samples] == [(p, e - s) for p, s, e in runs]
    for k, s in enumerate(samples):
        assert s.left == (runs[k - 1][0] if k else BOUNDARY)
        assert s.right == (runs[k + 1][0] if k + 1 < len(runs) else BOUNDARY)


def test_gaussian_loglik_matches_direct_formula():
    X = np.random.default_rng(0).normal(2.0, 3.0, size=(30, 5))
    ll = cdphone.gaussian_loglik(len(X), X.sum(0), (X * X).sum(0))
    assert ll == pytest.approx(diag_gaussian_loglik(X), rel=1e-10)


def test_identical_samples_do_not_split():
    vec = np.ones(120)
    samples = [PhoneSample(0, k % 3, (k + 1) % 3, vec, 2) for k in range(12)]
    tree = cdphone.grow_trees(samples, cdphone.default_questions(["a", "b", "c"]))
    assert tree.num_leaves == 1
    assert not tree.splits


def test_planted_left_context_is_the_first_split():
    rng = np.random.default_rng(0)
    samples = two_context_samples(rng)
    questions = cdphone.default_questions(PHONES)
    tree = cdphone.grow_trees(samples, questions, phone_names=PHONES)
    first = tree.splits[0]
    assert first.phone == PH["a"]
    # exhaustive oracle: every question's gain recomputed from scratch
    idx = [i for i, s in enumerate(samples) if s.phone == PH["a"]]
    X = np.stack([samples[i].vec for i in idx])
    base = diag_gaussian_loglik(X)
    gains = {}
    for q in questions:
        yes = np.array([q.ask(samples[i].left, samples[i].right) for i in idx])
        if yes.all() or not yes.any():
            continue
        gains[q] = diag_gaussian_loglik(X[yes]) + diag_gaussian_loglik(X[~yes]) - base
    best = max(gains.values())
    assert first.gain == pytest.approx(best, rel=1e-9)
    # "left is p" and "left is t" induce the same partition; either is the planted split
    q = first.question
    assert q.side == "left"
    assert len({PH["p"], PH["t"]} & q.phone_set) == 1
    winners = [w for w, g in gains.items() if g >= best * (1 - 1e-9)]
    assert q in winners
    assert all(w.side == "left" and len({PH["p"], PH["t"]} & w.phone_set) == 1 for w in winners)
    # the two clusters map to distinct CD phones
    assert tree.map_context(PH["a"], PH["p"], PH["s"]) != tree.map_context(PH["a"], PH["t"], PH["s"])


def test_executed_splits_are_best_and_above_min_gain():
    rng = np.random.default_rng(1)
    samples = two_context_samples(rng)
    questions = cdphone.default_questions(PHONES)
    tree = cdphone.grow_trees(samples, questions, min_gain=50.0, min_leaf_count=3)
    for rec in tree.splits:
        gains = [g for g in cdphone.split_gains(samples, rec.sample_indices, questions, 3)
                 if g is not None]
        assert rec.gain >= 50.0
        assert rec.gain == pytest.approx(max(gains), rel=1e-12)


def test_ci_reproduction():
    rng = np.random.default_rng(2)
    samples = two_context_samples(rng)
    questions = cdphone.default_questions(PHONES)
    for tree in (cdphone.grow_trees(samples, questions, min_gain=math.inf),
                 cdphone.grow_trees(samples, questions, max_leaves=len(PHONES))):
        assert tree.num_leaves == len(PHONES)
        for p in range(len(PHONES)):
            assert tree.map_context(p, BOUNDARY, BOUNDARY) == p


def test_map_context_is_total_and_reaches_every_leaf():
    rng = np.random.default_rng(3)
    samples = two_context_samples(rng)
    tree = cdphone.grow_trees(samples, cdphone.default_questions(PHONES), max_leaves=9)
    ctx = list(range(len(PHONES))) + [BOUNDARY, 99]
    seen = set()
    for p in range(len(PHONES)):
        for left in ctx:
            for right in ctx:
                seen.add(tree.map_context(p, left, right))
    assert seen == set(range(tree.num_leaves))
    assert sum(leaf.count for r in tree.roots.values() for leaf in r.leaves()) == len(samples)
    with pytest.raises(UnknownLabelError):
        tree.map_context(42, 0, 0)


def test_uncovered_phone():
    s = [PhoneSample(0, BOUNDARY, BOUNDARY, np.zeros(3), 1)]
    with pytest.raises(UncoveredPhoneError):
        cdphone.grow_trees(s, [], phones=[0, 1])
    with pytest.raises(UncoveredPhoneError):
        cdphone.grow_trees([], [])


def test_question_validation():
    with pytest.raises(DataError):
        PhoneticQuestion("x", "left", frozenset())


def test_duration_examples():
    assert cdphone.duration_minima({0: list(range(1, 11))}).minima[0] == 1
    assert cdphone.duration_minima({0: [5] * 7}).minima[0] == 5


@settings(max_examples=100, deadline=None)
@given(durs=st.lists(st.integers(1, 30), min_size=1, max_size=60),
       pct=st.sampled_from([0.05, 0.1, 0.25, 0.5, 0.9]))
def test_duration_minima_match_sorting(durs, pct):
    assert cdphone.duration_minima({0: durs}, pct).minima[0] == minimum_duration_by_sorting(durs, pct)


def test_tree_and_duration_files(tmp_path):
    rng = np.random.default_rng(4)
    samples = two_context_samples(rng)
    tree = cdphone.grow_trees(samples, cdphone.default_questions(PHONES), max_leaves=8,
                              phone_names=PHONES)
    cdphone.write_tree(tmp_path / "tree.txt", tree)
    back = cdphone.read_tree(tmp_path / "tree.txt")
    ctx = list(range(len(PHONES))) + [BOUNDARY]
    for p in range(len(PHONES)):
        for left in ctx:
            for right in ctx:
                assert back.map_context(p, left, right) == tree.map_context(p, left, right)
    assert back.leaf_names() == tree.leaf_names()
    stats = cdphone.duration_minima(cdphone.durations_by_leaf(samples, tree))
    stats.write(tmp_path / "dur.txt")
    assert cdphone.DurationStats.read(tmp_path / "dur.txt").minima == stats.minima
