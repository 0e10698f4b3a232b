"""Reference implementations used only by the tests.

Each oracle is written from the definition (enumeration, sorting, a plain
DP) and shares no code with the package under test.
"""

from __future__ import annotations

import itertools
import math
from functools import lru_cache

import numpy as np


# --------------------------------------------------------------------------- CTC

def collapse(seq, blank):
    """Merge repeated labels, then drop blanks."""
    out = []
    prev = None
    for s in seq:
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return tuple(out)


@lru_cache(maxsize=None)
def all_sequences(L: int, T: int) -> np.ndarray:
    return np.array(list(itertools.product(range(L), repeat=T)), dtype=np.int64).reshape(-1, T)


@lru_cache(maxsize=None)
def _collapsed_index(L: int, T: int, blank: int) -> dict:
    groups: dict = {}
    for i, seq in enumerate(all_sequences(L, T)):
        groups.setdefault(collapse(seq.tolist(), blank), []).append(i)
    return {k: np.array(v) for k, v in groups.items()}


def ctc_paths(labels, L: int, T: int, blank: int) -> np.ndarray:
    """Every length-T frame labelling whose CTC collapse equals ``labels``."""
    idx = _collapsed_index(L, T, blank).get(tuple(labels))
    if idx is None:
        return np.zeros((0, T), dtype=np.int64)
    return all_sequences(L, T)[idx]


def forced_paths(labels, T: int) -> np.ndarray:
    """Every way to give each label a contiguous run of >= 1 frames, in order."""
    n = len(labels)
    out = []
    for cuts in itertools.combinations(range(1, T), n - 1):
        bounds = (0,) + cuts + (T,)
        seq = []
        for lab, a, b in zip(labels, bounds, bounds[1:]):
            seq += [lab] * (b - a)
        out.append(seq)
    return np.array(out, dtype=np.int64).reshape(-1, T)


def path_scores(paths: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Product over frames of ``scores[t, path[t]]`` for each path."""
    if len(paths) == 0:
        return np.zeros(0)
    T = paths.shape[1]
    return np.prod(scores[np.arange(T)[None, :], paths], axis=1)


def enumerate_total_and_gamma(paths: np.ndarray, scores: np.ndarray, L: int):
    """Total path score and per-frame label occupancy by explicit summation."""
    w = path_scores(paths, scores)
    total = w.sum()
    T = scores.shape[0]
    gamma = np.zeros((T, L))
    for t in range(T):
        np.add.at(gamma[t], paths[:, t], w)
    return total, gamma / total if total > 0 else gamma


# --------------------------------------------------------------------------- numerics

def central_diff(f, x: np.ndarray, eps: float = 1e-5, index=None) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. ``x`` (in place perturbation)."""
    grad = np.zeros_like(x)
    it = index if index is not None else np.ndindex(x.shape)
    for i in it:
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2 * eps)
    return grad


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def log_softmax(x):
    x = np.asarray(x, dtype=np.float64)
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


# --------------------------------------------------------------------------- lattices

def lattice_paths(lat):
    """All start-to-final arc sequences of an acyclic lattice (depth-first)."""
    out_arcs: dict = {}
    for a in lat.arcs:
        out_arcs.setdefault(a.src, []).append(a)
    has_in = {a.dst for a in lat.arcs}
    start = next(n for n in lat.nodes if n not in has_in)
    paths = []

    def walk(node, acc):
        if node in lat.finals:
            paths.append(list(acc))
        for a in out_arcs.get(node, ()):
            acc.append(a)
            walk(a.dst, acc)
            acc.pop()

    walk(start, [])
    return paths


def frame_labels_of(path, lat, T):
    labels = np.full(T, -1)
    for a in path:
        labels[lat.nodes[a.src]:lat.nodes[a.dst]] = a.label
    return labels


def smbr_by_enumeration(num, den, logits, kappa=1.0):
    """Expected frame accuracy and its logit gradient from explicit path sums."""
    logp = log_softmax(logits)
    T, L = logp.shape

    def path_score(path):
        return sum(kappa * logp[f0:f1, a.label].sum() + a.lm_score for a, f0, f1 in path)

    def timed(path, lat):
        return [(a, lat.nodes[a.src], lat.nodes[a.dst]) for a in path]

    num_paths = [timed(p, num) for p in lattice_paths(num)]
    ref_path = max(num_paths, key=path_score)
    ref = np.full(T, -1)
    for a, f0, f1 in ref_path:
        ref[f0:f1] = a.label

    den_paths = [timed(p, den) for p in lattice_paths(den)]
    scores = np.array([path_score(p) for p in den_paths])
    post = np.exp(scores - scores.max())
    post /= post.sum()
    accs = []
    for p in den_paths:
        lab = np.full(T, -2)
        for a, f0, f1 in p:
            lab[f0:f1] = a.label
        accs.append(float(np.sum(lab == ref)))
    accs = np.array(accs)
    expected = float(post @ accs)

    # d E / d logp[t, l] = kappa * sum_path P(path) (A(path) - E) [path emits l at t]
    g_logp = np.zeros((T, L))
    for p, w, acc in zip(den_paths, post, accs):
        for a, f0, f1 in p:
            g_logp[f0:f1, a.label] += kappa * w * (acc - expected)
    soft = np.exp(logp)
    grad = g_logp - soft * g_logp.sum(axis=1, keepdims=True)
    return expected, grad


# --------------------------------------------------------------------------- decoding

def decode_by_enumeration(graph, scores):
    """Best (score, words, labels) over every length-T start-to-final arc path."""
    T = scores.shape[0]
    out = {}
    for a in graph.arcs:
        out.setdefault(a.src, []).append(a)
    best = [None]

    def walk(state, t, score, words, labels):
        if t == T:
            if state in graph.finals:
                total = score + graph.finals[state]
                cand = (total, tuple(words), tuple(labels))
                if best[0] is None or total > best[0][0]:
                    best[0] = cand
            return
        for a in out.get(state, ()):
            s = scores[t, a.ilabel]
            if s == -math.inf:
                continue
            # same summation order as the search, so scores compare exactly
            walk(a.dst, t + 1, score + (s + a.weight),
                 words + [a.word] if a.word is not None else words, labels + [a.ilabel])

    walk(graph.start, 0, 0.0, [], [])
    return best[0]


def count_paths(graph, T: int) -> int:
    counts = {graph.start: 1}
    for _ in range(T):
        nxt: dict = {}
        for a in graph.arcs:
            if a.src in counts:
                nxt[a.dst] = nxt.get(a.dst, 0) + counts[a.src]
        counts = nxt
    return sum(c for s, c in counts.items() if s in graph.finals)


# --------------------------------------------------------------------------- scoring

def edit_distance(ref, hyp) -> int:
    """Word-level Levenshtein distance by memoised recursion."""
    ref, hyp = tuple(ref), tuple(hyp)

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1]))

    return d(len(ref), len(hyp))


# --------------------------------------------------------------------------- clustering

def diag_gaussian_loglik(X: np.ndarray, var_floor: float = 1e-4) -> float:
    """Log-likelihood of the rows of X under their own ML diagonal Gaussian."""
    if len(X) == 0:
        return 0.0
    mu = X.mean(axis=0)
    var = X.var(axis=0)
    v = np.maximum(var, var_floor)
    return float(np.sum(-0.5 * np.log(2 * np.pi * v) - 0.5 * (X - mu) ** 2 / v))


def minimum_duration_by_sorting(durations, percentile: float) -> int:
    s = sorted(durations)
    n = len(s)
    for i in range(1, n + 1):
        if i / n >= percentile:
            return max(1, s[i - 1])
    return max(1, s[-1])
