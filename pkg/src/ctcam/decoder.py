"""Decoding graphs, frame-synchronous beam search and greedy CTC decoding.

A decode graph is an acceptor over frames: every arc consumes exactly one
frame and carries an acoustic input label, an optional output word and a
natural-log graph weight. State 0 is a non-emitting start state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .cdphone import BOUNDARY, CDPhoneTree, DurationStats
from .criteria import Lattice, LatticeArc
from .errors import ConfigError, DataError, LexiconGapError, NoHypothesisError
from .graphs import LabelInventory, Lexicon

LN10 = math.log(10.0)
SENTENCE_START = "<s>"
SENTENCE_END = "</s>"


@dataclass
class LanguageModel:
    """Unigram/bigram back-off model with log10 probabilities (ARPA subset)."""

    unigrams: dict[str, float]
    backoffs: dict[str, float] = field(default_factory=dict)
    bigrams: dict[tuple[str, str], float] = field(default_factory=dict)

    @classmethod
    def uniform(cls, words: Sequence[str]) -> "LanguageModel":
        p = -math.log10(len(words))
        return cls({w: p for w in words})

    @property
    def words(self) -> list[str]:
        return [w for w in self.unigrams if w not in (SENTENCE_START, SENTENCE_END)]

    def log10prob(self, history: str, word: str) -> float:
        if (history, word) in self.bigrams:
            return self.bigrams[(history, word)]
        if word not in self.unigrams:
            return -math.inf
        return self.backoffs.get(history, 0.0) + self.unigrams[word]

    def end_log10prob(self, history: str) -> float:
        if SENTENCE_END not in self.unigrams:
            return 0.0
        return self.log10prob(history, SENTENCE_END)

    @classmethod
    def read_arpa(cls, path: str | Path) -> "LanguageModel":
        lm = cls({})
        order = 0
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if not line or line.startswith("\\data\\") or line.startswith("ngram "):
                continue
            if line.startswith("\\") and line.endswith("-grams:"):
                order = int(line[1])
                continue
            if line == "\\end\\":
                break
            parts = line.split()
            if order == 1:
                lm.unigrams[parts[1]] = float(parts[0])
                if len(parts) > 2:
                    lm.backoffs[parts[1]] = float(parts[2])
            elif order == 2:
                lm.bigrams[(parts[1], parts[2])] = float(parts[0])
            else:
                raise DataError(f"{path}: only unigram/bigram models are supported")
        return lm

    def write_arpa(self, path: str | Path) -> None:
        lines = ["\\data\\", f"ngram 1={len(self.unigrams)}"]
        if self.bigrams:
            lines.append(f"ngram 2={len(self.bigrams)}")
        lines += ["", "\\1-grams:"]
        for w, p in self.unigrams.items():
            bo = f"\t{self.backoffs[w]:.6f}" if w in self.backoffs else ""
            lines.append(f"{p:.6f}\t{w}{bo}")
        if self.bigrams:
            lines += ["", "\\2-grams:"]
            lines += [f"{p:.6f}\t{a} {b}" for (a, b), p in self.bigrams.items()]
        lines += ["", "\\end\\"]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class DecodeArc:
    src: int
    dst: int
    ilabel: int
    word: str | None
    weight: float
    unit: int = -1       # id of the phone occurrence the arc belongs to; -1 for blank
    entry: bool = False  # first frame of a unit occurrence


@dataclass
class DecodeGraph:
    num_states: int
    arcs: list[DecodeArc]
    finals: dict[int, float]
    start: int = 0
    allow_blank: bool = False
    blank_id: int | None = None
    min_dur: dict[int, int] | None = None
    unit_labels: dict[int, int] = field(default_factory=dict)  # unit tag -> acoustic label
    out_arcs: list[list[int]] = field(init=False, repr=False)

    def __post_init__(self):
        self.out_arcs = [[] for _ in range(self.num_states)]
        for i, a in enumerate(self.arcs):
            if not math.isfinite(a.weight):
                raise DataError(f"arc {a} has a non-finite weight")
            self.out_arcs[a.src].append(i)

    def segments(self, arc_path: Sequence[int]) -> list[tuple[int, int, int]]:
        """(acoustic label, start frame, end frame) for each unit occurrence on a path."""
        segs: list[list[int]] = []
        for t, ai in enumerate(arc_path):
            a = self.arcs[ai]
            if a.unit < 0:
                continue
            if a.entry or not segs or segs[-1][3] != a.unit or segs[-1][2] != t:
                segs.append([a.ilabel, t, t + 1, a.unit])
            else:
                segs[-1][2] = t + 1
        return [(lab, s, e) for lab, s, e, _ in segs]


class _GraphBuilder:
    def __init__(self, allow_blank: bool, blank_id: int | None, minima: dict[int, int] | None):
        self.num_states = 1
        self.arcs: list[DecodeArc] = []
        self.unit_labels: dict[int, int] = {}
        self.allow_blank = allow_blank
        self.blank_id = blank_id
        self.minima = minima

    def state(self) -> int:
        self.num_states += 1
        return self.num_states - 1

    def unit_chain(self, label: int) -> tuple[int, int, int]:
        """States for one unit occurrence: min-duration chain ending in a self-loop."""
        tag = len(self.unit_labels)
        self.unit_labels[tag] = label
        d = max(1, self.minima.get(label, 1)) if self.minima else 1
        chain = [self.state() for _ in range(d)]
        for k in range(d - 1):
            self.arcs.append(DecodeArc(chain[k], chain[k + 1], label, None, 0.0, tag))
        self.arcs.append(DecodeArc(chain[-1], chain[-1], label, None, 0.0, tag))
        return chain[0], chain[-1], tag

    def blank_loop(self, src: int) -> int:
        state = self.state()
        self.arcs.append(DecodeArc(src, state, self.blank_id, None, 0.0))
        self.arcs.append(DecodeArc(state, state, self.blank_id, None, 0.0))
        return state

    def exits(self, last_state: int, label: int) -> list[tuple[int, int]]:
        """Places a following unit may be entered from, tagged with the label just emitted."""
        out = [(last_state, label)]
        if self.allow_blank:
            out.append((self.blank_loop(last_state), -1))
        return out

    def link(self, exits, first_state: int, label: int, tag: int,
             word: str | None = None, weight: float = 0.0) -> None:
        for src, prev_label in exits:
            if self.allow_blank and prev_label == label:
                continue  # a blank must separate identical units
            self.arcs.append(DecodeArc(src, first_state, label, word, weight, tag, entry=True))


def _word_units(pron: Sequence[int], tree: CDPhoneTree | None) -> list[int]:
    if tree is None:
        return list(pron)
    units = []
    for j, p in enumerate(pron):
        left = pron[j - 1] if j > 0 else BOUNDARY
        right = pron[j + 1] if j + 1 < len(pron) else BOUNDARY
        units.append(tree.map_context(p, left, right))
    return units


def build_decode_graph(lex: Lexicon, lm: LanguageModel, tree: CDPhoneTree | None = None,
                       allow_blank: bool = True, blank_id: int | None = None,
                       min_dur: DurationStats | Mapping[int, int] | None = None) -> DecodeGraph:
    """Expand an LM over lexicon pronunciations into a frame-level decoding graph.

    Every unit becomes a chain of ``min_dur`` states ending in a self-loop.
    With ``allow_blank`` an optional blank loop sits before the first word,
    between units and after every word; it is mandatory between two
    identical consecutive units. With a CD-phone ``tree`` units are mapped
    using within-word context only (word edges use the boundary context).
    Graph weights are natural-log LM scores.
    """
    if allow_blank and blank_id is None:
        raise ConfigError("allow_blank requires blank_id")
    minima = getattr(min_dur, "minima", min_dur)
    minima = dict(minima) if minima is not None else None
    words = lm.words
    gaps = [w for w in words if w not in lex]
    if gaps:
        raise LexiconGapError(f"lexicon gap: LM words without pronunciation: {gaps[:5]}")

    b = _GraphBuilder(allow_blank, blank_id, minima)
    chains = []  # (word, first state, first label, first tag, exits)
    for w in words:
        for pron in lex[w]:
            units = _word_units(pron, tree)
            first, last, tag = b.unit_chain(units[0])
            head = (first, units[0], tag)
            for prev_label, u in zip(units, units[1:]):
                exits = b.exits(last, prev_label)
                first, last, tag = b.unit_chain(u)
                b.link(exits, first, u, tag)
            chains.append((w, *head, b.exits(last, units[-1])))

    start_exits = [(0, -1)]
    if allow_blank:
        start_exits.append((b.blank_loop(0), -1))
    sources = [(SENTENCE_START, start_exits)] + [(c[0], c[4]) for c in chains]
    for history, exits in sources:
        for w, first, label, tag, _ in chains:
            lp = lm.log10prob(history, w)
            if math.isfinite(lp):
                b.link(exits, first, label, tag, word=w, weight=lp * LN10)

    finals = {}
    for w, *_, exits in chains:
        fw = lm.end_log10prob(w) * LN10
        if math.isfinite(fw):
            for src, _ in exits:
                finals[src] = fw
    return DecodeGraph(b.num_states, b.arcs, finals, 0, allow_blank, blank_id, minima,
                       b.unit_labels)


@dataclass(frozen=True)
class DecodeParams:
    beam: float = math.inf
    max_active: float = math.inf
    am_weight: float = 1.0
    blank_scale: float = 1.0
    tokens_per_state: int = 1  # distinct word histories kept per graph state
    lattice_k: int = 50

    def __post_init__(self):
        if not self.beam > 0 or not self.max_active >= 1:
            raise ConfigError("beam must be > 0 and max_active >= 1")
        if not self.am_weight > 0 or not self.blank_scale > 0:
            raise ConfigError("am_weight and blank_scale must be positive")
        if self.tokens_per_state < 1 or self.lattice_k < 1:
            raise ConfigError("tokens_per_state and lattice_k must be >= 1")


# am_weight presets: CI-phone CTC needs no weighting, CD-phone CTC uses 2.1
AM_WEIGHT_PRESETS = {"ci_phone": 1.0, "cd_phone": 2.1, "word": 1.0, "cd_state": 1.0}


@dataclass(frozen=True)
class Hypothesis:
    words: tuple[str, ...]
    score: float
    word_times: tuple[tuple[int, int], ...]  # (first frame, end frame) per word
    arc_path: tuple[int, ...]
    frame_labels: tuple[int, ...]
    graph_score: float = 0.0


def _trace(trace) -> list[int]:
    out = []
    while trace is not None:
        trace, ai = trace
        out.append(ai)
    return out[::-1]


def _make_hypothesis(g: DecodeGraph, words, score, trace, final_weight) -> Hypothesis:
    path = _trace(trace)
    times: list[list[int]] = []
    graph_score = final_weight
    for t, ai in enumerate(path):
        a = g.arcs[ai]
        graph_score += a.weight
        if a.word is not None:
            times.append([t, t + 1])
        elif times and a.unit >= 0:
            times[-1][1] = t + 1
    return Hypothesis(tuple(words), float(score), tuple(tuple(x) for x in times), tuple(path),
                      tuple(g.arcs[ai].ilabel for ai in path), float(graph_score))


def scaled_log_posteriors(post, am_weight: float = 1.0, blank_scale: float = 1.0,
                          blank_id: int | None = None) -> np.ndarray:
    """``am_weight * log y`` with ``log(blank_scale)`` taken off the blank column first."""
    data = np.asarray(getattr(post, "data", post), dtype=np.float64)
    with np.errstate(divide="ignore"):
        logp = np.log(data)
    if blank_id is not None and blank_scale != 1.0:
        logp[:, blank_id] -= math.log(blank_scale)
    return am_weight * logp


def beam_search(g: DecodeGraph, post, p: DecodeParams = DecodeParams()
                ) -> tuple[Hypothesis, Lattice]:
    """Frame-synchronous Viterbi beam search with word-conditioned tokens.

    Maximizes ``sum_t am_weight * log y_t(label) + graph weights``. Each
    state keeps up to ``p.tokens_per_state`` tokens with distinct word
    histories. Tokens further than ``p.beam`` below the frame's best, or
    outside the ``p.max_active`` best, are pruned. Returns the best final
    hypothesis and a lattice of up to ``p.lattice_k`` best final hypotheses.
    """
    scores = scaled_log_posteriors(post, p.am_weight, p.blank_scale, g.blank_id)
    T, L = scores.shape
    if any(a.ilabel >= L for a in g.arcs):
        raise DataError("decode graph uses labels outside the posteriorgram")
    arcs = g.arcs
    # token: (score, words, trace); trace is a (prev_trace, arc index) linked list
    active: dict[int, dict[tuple, tuple]] = {g.start: {(): (0.0, (), None)}}
    K = p.tokens_per_state
    for t in range(T):
        frame = scores[t]
        nxt: dict[int, dict[tuple, tuple]] = {}
        for state, toks in active.items():
            for ai in g.out_arcs[state]:
                a = arcs[ai]
                inc = frame[a.ilabel] + a.weight
                if inc == -math.inf:
                    continue
                bucket = nxt.setdefault(a.dst, {})
                for score, words, trace in toks.values():
                    new_words = words + (a.word,) if a.word is not None else words
                    new_score = score + inc
                    old = bucket.get(new_words)
                    if old is None or new_score > old[0]:
                        bucket[new_words] = (new_score, new_words, (trace, ai))
        active = _prune(nxt, K, p.beam, p.max_active)
        if not active:
            break

    finals = []
    for state, toks in active.items():
        if state in g.finals:
            fw = g.finals[state]
            for score, words, trace in toks.values():
                finals.append((score + fw, words, trace, fw))
    if not finals:
        n_active = sum(len(v) for v in active.values())
        raise NoHypothesisError(
            f"no hypothesis: no final state reached after {T} frames "
            f"({n_active} tokens active at the end)")
    # best per word sequence, then best overall; ties resolved by word sequence order
    by_words: dict[tuple, tuple] = {}
    for item in finals:
        if item[1] not in by_words or item[0] > by_words[item[1]][0]:
            by_words[item[1]] = item
    ranked = sorted(by_words.values(), key=lambda x: (-x[0], x[1]))
    hyps = [_make_hypothesis(g, w, s, tr, fw) for s, w, tr, fw in ranked[:p.lattice_k]]
    return hyps[0], hypotheses_lattice(hyps, scores)


def _prune(tokens: dict[int, dict[tuple, tuple]], per_state: int, beam: float,
           max_active: float) -> dict[int, dict[tuple, tuple]]:
    if per_state < math.inf:
        for state, bucket in tokens.items():
            if len(bucket) > per_state:
                keep = sorted(bucket.values(), key=lambda x: (-x[0], x[1]))[:per_state]
                tokens[state] = {tok[1]: tok for tok in keep}
    flat = [(tok[0], state, key) for state, bucket in tokens.items() for key, tok in bucket.items()]
    if not flat:
        return {}
    best = max(f[0] for f in flat)
    threshold = best - beam
    survivors = [f for f in flat if f[0] >= threshold]
    if len(survivors) > max_active:
        survivors.sort(key=lambda f: (-f[0], f[1], f[2]))
        survivors = survivors[:int(max_active)]
    out: dict[int, dict[tuple, tuple]] = {}
    for _, state, key in survivors:
        out.setdefault(state, {})[key] = tokens[state][key]
    return out


def hypotheses_lattice(hyps: Sequence[Hypothesis], scores: np.ndarray) -> Lattice:
    """Lattice of the given hypotheses' frame labellings, with per-arc acoustic scores."""
    base = Lattice.from_paths([h.frame_labels for h in hyps],
                              lm_scores=[h.graph_score for h in hyps])
    arcs = []
    for a in base.arcs:
        f0, f1 = base.nodes[a.src], base.nodes[a.dst]
        arcs.append(LatticeArc(a.src, a.dst, a.label,
                               float(np.sum(scores[f0:f1, a.label])), a.lm_score))
    return Lattice(base.nodes, tuple(arcs), base.finals)


def greedy_ctc_decode(post, inv: LabelInventory | int | None) -> list[int]:
    """Per-frame argmax, merge repeated labels, drop blanks."""
    blank = inv if isinstance(inv, int) or inv is None else inv.blank_id
    best = np.argmax(np.asarray(getattr(post, "data", post)), axis=1)
    out = []
    prev = None
    for lab in best:
        lab = int(lab)
        if lab != prev and lab != blank:
            out.append(lab)
        prev = lab
    return out
