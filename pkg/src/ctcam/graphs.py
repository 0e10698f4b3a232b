"""Label inventories, lexica, alignment graphs and forward-backward / Viterbi over them.

Alignment graphs are state-labelled: every state emits its label once per
frame it is occupied, and a path of length T visits T states along arcs
(self-loops included). ``starts`` are the states a path may occupy at the
first frame.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, EmptyAlignmentError, NotCTCError, UnknownLabelError

BLANK = "<b>"
_BLANK_SPELLINGS = {BLANK, "⟨b⟩"}
LABEL_KINDS = ("cd_state", "ci_phone", "cd_phone", "word")
PRIOR_FLOOR = 1e-8


@dataclass(frozen=True)
class LabelInventory:
    labels: tuple[str, ...]
    blank_id: int | None = None
    kind: str = "ci_phone"
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        labels = tuple(self.labels)
        object.__setattr__(self, "labels", labels)
        if len(set(labels)) != len(labels):
            raise DataError("label names must be unique")
        if self.kind not in LABEL_KINDS:
            raise DataError(f"unknown inventory kind {self.kind!r}")
        if self.blank_id is not None and not 0 <= self.blank_id < len(labels):
            raise DataError("blank id out of range")
        object.__setattr__(self, "_index", {name: i for i, name in enumerate(labels)})

    @classmethod
    def from_names(cls, names: Iterable[str], kind: str = "ci_phone",
                   with_blank: bool = False) -> "LabelInventory":
        names = [n for n in names if n not in _BLANK_SPELLINGS]
        if with_blank:
            return cls(tuple(names) + (BLANK,), len(names), kind)
        return cls(tuple(names), None, kind)

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, name) -> bool:
        return name in self._index

    @property
    def is_ctc(self) -> bool:
        return self.blank_id is not None

    @property
    def ident(self) -> str:
        digest = hashlib.sha1("\n".join(self.labels).encode("utf-8")).hexdigest()[:12]
        return f"{self.kind}:{len(self)}:{digest}"

    def id(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise UnknownLabelError(f"unknown label {name!r}") from None

    def ids(self, names: Iterable[str]) -> list[int]:
        return [self.id(n) for n in names]

    def names(self, ids: Iterable[int]) -> list[str]:
        return [self.labels[i] for i in ids]

    def non_blank_ids(self) -> list[int]:
        return [i for i in range(len(self)) if i != self.blank_id]

    def write(self, path: str | Path) -> None:
        lines = [f"#kind {self.kind}"] + [BLANK if i == self.blank_id else name
                                          for i, name in enumerate(self.labels)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path, kind: str | None = None) -> "LabelInventory":
        names, blank_id, file_kind = [], None, "ci_phone"
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#kind "):
                file_kind = line.split()[1]
                continue
            if line in _BLANK_SPELLINGS:
                if blank_id is not None:
                    raise DataError(f"{path}: more than one blank line")
                blank_id = len(names)
                names.append(BLANK)
            else:
                names.append(line)
        return cls(tuple(names), blank_id, kind or file_kind)


@dataclass(frozen=True)
class Lexicon:
    prons: Mapping[str, tuple[tuple[int, ...], ...]]

    def __post_init__(self):
        for word, plist in self.prons.items():
            if not plist or any(len(p) == 0 for p in plist):
                raise DataError(f"empty pronunciation for {word!r}")

    def __contains__(self, word) -> bool:
        return word in self.prons

    def __getitem__(self, word) -> tuple[tuple[int, ...], ...]:
        return self.prons[word]

    @property
    def words(self) -> list[str]:
        return list(self.prons)

    @classmethod
    def read(cls, path: str | Path, inv: LabelInventory) -> "Lexicon":
        prons: dict[str, list[tuple[int, ...]]] = {}
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            word, _, phones = line.partition("\t")
            if not phones.strip():
                raise DataError(f"{path}:{n}: expected 'word<TAB>phones'")
            prons.setdefault(word.strip(), []).append(tuple(inv.ids(phones.split())))
        return cls({w: tuple(p) for w, p in prons.items()})

    def write(self, path: str | Path, inv: LabelInventory) -> None:
        lines = [f"{w}\t{' '.join(inv.names(p))}" for w, plist in self.prons.items()
                 for p in plist]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def expand(self, words: Sequence[str]) -> list[int]:
        """First pronunciation of each word, concatenated."""
        out: list[int] = []
        for w in words:
            if w not in self.prons:
                raise UnknownLabelError(f"word {w!r} not in lexicon")
            out.extend(self.prons[w][0])
        return out


@dataclass(frozen=True)
class AlignmentGraph:
    state_labels: tuple[int, ...]
    arcs: tuple[tuple[int, int, int], ...]  # (from, to, label of `to`)
    starts: frozenset[int]
    finals: frozenset[int]

    @property
    def num_states(self) -> int:
        return len(self.state_labels)

    def _pred_matrix(self) -> np.ndarray:
        """Predecessor table padded with the sentinel index ``num_states``."""
        preds: list[list[int]] = [[] for _ in range(self.num_states)]
        for src, dst, _ in self.arcs:
            preds[dst].append(src)
        width = max(1, max(len(p) for p in preds))
        table = np.full((self.num_states, width), self.num_states, dtype=np.int64)
        for s, p in enumerate(preds):
            table[s, :len(p)] = p
        return table

    def _succ_matrix(self) -> np.ndarray:
        succs: list[list[int]] = [[] for _ in range(self.num_states)]
        for src, dst, _ in self.arcs:
            succs[src].append(dst)
        width = max(1, max(len(s) for s in succs))
        table = np.full((self.num_states, width), self.num_states, dtype=np.int64)
        for s, nxt in enumerate(succs):
            table[s, :len(nxt)] = sorted(nxt)
        return table

    def min_length(self) -> int:
        """Fewest frames on any start-to-final path."""
        dist = {s: 1 for s in self.starts}
        frontier = list(self.starts)
        while frontier:
            nxt = []
            for src, dst, _ in self.arcs:
                if src in frontier and dst not in dist:
                    dist[dst] = dist[src] + 1
                    nxt.append(dst)
            frontier = nxt
        reach = [dist[f] for f in self.finals if f in dist]
        return min(reach) if reach else -1


def _check_labels(labels: Sequence[int], inv: LabelInventory | None):
    if len(labels) == 0:
        raise DataError("label sequence must be non-empty")
    if inv is not None:
        for lab in labels:
            if not 0 <= lab < len(inv) or lab == inv.blank_id:
                raise UnknownLabelError(f"unknown label id {lab}")


def build_ctc_graph(labels: Sequence[int], inv: LabelInventory) -> AlignmentGraph:
    """CTC topology: optional blanks around every label, blank mandatory between repeats."""
    if inv.blank_id is None:
        raise NotCTCError("not CTC: inventory has no blank")
    labels = [int(x) for x in labels]
    _check_labels(labels, inv)
    n = len(labels)
    blank = inv.blank_id
    state_labels = []
    for lab in labels:
        state_labels += [blank, lab]
    state_labels.append(blank)
    arcs = []
    for s in range(2 * n + 1):
        arcs.append((s, s, state_labels[s]))
        if s + 1 <= 2 * n:
            arcs.append((s, s + 1, state_labels[s + 1]))
        if s % 2 == 1 and s + 2 < 2 * n and state_labels[s] != state_labels[s + 2]:
            arcs.append((s, s + 2, state_labels[s + 2]))
    return AlignmentGraph(tuple(state_labels), tuple(arcs), frozenset({0, 1}),
                          frozenset({2 * n - 1, 2 * n}))


def build_forced_graph(labels: Sequence[int], inv: LabelInventory | None = None) -> AlignmentGraph:
    """Linear chain of label states with self-loops; no blank."""
    labels = [int(x) for x in labels]
    _check_labels(labels, inv)
    n = len(labels)
    arcs = []
    for s in range(n):
        arcs.append((s, s, labels[s]))
        if s + 1 < n:
            arcs.append((s, s + 1, labels[s + 1]))
    return AlignmentGraph(tuple(labels), tuple(arcs), frozenset({0}), frozenset({n - 1}))


def add_optional_edges(g: AlignmentGraph, label: int) -> AlignmentGraph:
    """Allow an optional run of ``label`` (e.g. silence) before and after the graph."""
    n = g.num_states
    head, tail = n, n + 1
    arcs = list(g.arcs)
    arcs += [(head, head, label), (tail, tail, label)]
    arcs += [(head, s, g.state_labels[s]) for s in sorted(g.starts)]
    arcs += [(f, tail, label) for f in sorted(g.finals)]
    return AlignmentGraph(g.state_labels + (label, label), tuple(arcs),
                          g.starts | {head}, g.finals | {tail})


def _lse(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - safe), axis=axis, keepdims=True)) + safe
    return np.squeeze(out, axis=axis)


def _emission_scores(g: AlignmentGraph, post, priors, log_domain: bool) -> np.ndarray:
    data = np.asarray(getattr(post, "data", post), dtype=np.float64)
    if log_domain:
        logp = data
    else:
        with np.errstate(divide="ignore"):
            logp = np.log(data)
    labels = np.asarray(g.state_labels)
    if labels.max() >= data.shape[1]:
        raise UnknownLabelError("graph label outside posteriorgram range")
    scores = logp[:, labels]
    if priors is not None:
        scores = scores - np.log(np.asarray(getattr(priors, "probs", priors)))[labels]
    return scores


def forward_backward(g: AlignmentGraph, post, priors=None,
                     log_domain: bool = False) -> tuple[float, np.ndarray]:
    """Total log score over all T-frame paths and per-frame label occupancies.

    Frame scores are posteriors, or posteriors divided by ``priors`` when
    given; ``log_domain`` marks ``post`` as already holding log posteriors.
    Returns ``(log_total, gamma)`` with ``gamma`` of shape (T, L),
    each row summing to one. Raises EmptyAlignmentError when no path fits.
    """
    E = _emission_scores(g, post, priors, log_domain)
    T, S = E.shape
    L = np.asarray(getattr(post, "data", post)).shape[1]
    pred, succ = g._pred_matrix(), g._succ_matrix()
    neg = np.full(1, -np.inf)

    alpha = np.full((T, S), -np.inf)
    start_mask = np.zeros(S, dtype=bool)
    start_mask[list(g.starts)] = True
    alpha[0, start_mask] = E[0, start_mask]
    for t in range(1, T):
        prev = np.concatenate([alpha[t - 1], neg])
        alpha[t] = _lse(prev[pred], axis=1) + E[t]

    final_mask = np.zeros(S, dtype=bool)
    final_mask[list(g.finals)] = True
    beta = np.full((T, S), -np.inf)
    beta[T - 1, final_mask] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = np.concatenate([beta[t + 1] + E[t + 1], neg])
        beta[t] = _lse(nxt[succ], axis=1)

    log_total = float(_lse(alpha[T - 1, final_mask], axis=0))
    if not np.isfinite(log_total):
        raise EmptyAlignmentError(
            f"empty alignment set: no path of {T} frames through a graph "
            f"needing at least {g.min_length()}")
    occ = np.exp(alpha + beta - log_total)
    gamma = np.zeros((T, L))
    np.add.at(gamma.T, np.asarray(g.state_labels), occ.T)
    return log_total, gamma


@dataclass(frozen=True)
class ForcedAlignment:
    labels: np.ndarray  # (T,) label id per frame
    states: np.ndarray  # (T,) graph state per frame
    log_score: float = 0.0

    def __len__(self) -> int:
        return len(self.labels)


def viterbi_align(g: AlignmentGraph, post, priors=None,
                  log_domain: bool = False) -> ForcedAlignment:
    """Single best path through ``g``.

    Ties go to the path that advances to a later state as early as possible
    (lexicographically largest state sequence among the optimal paths).
    """
    E = _emission_scores(g, post, priors, log_domain)
    T, S = E.shape
    succ = g._succ_matrix()
    neg = np.full(1, -np.inf)
    # best score-to-go, including the current frame's emission
    togo = np.full((T, S), -np.inf)
    final_mask = np.zeros(S, dtype=bool)
    final_mask[list(g.finals)] = True
    togo[T - 1, final_mask] = E[T - 1, final_mask]
    for t in range(T - 2, -1, -1):
        nxt = np.concatenate([togo[t + 1], neg])
        togo[t] = np.max(nxt[succ], axis=1) + E[t]

    def pick(candidates, row):
        best = max(row[c] for c in candidates)
        if not np.isfinite(best):
            return None
        return max(c for c in candidates if row[c] == best)

    state = pick(sorted(g.starts), togo[0])
    if state is None:
        raise EmptyAlignmentError(f"empty alignment set: no path of {T} frames")
    states = [state]
    for t in range(1, T):
        candidates = [int(s) for s in succ[state] if s < S]
        state = pick(candidates, togo[t])
        states.append(state)
    states_arr = np.asarray(states, dtype=np.int64)
    labels = np.asarray(g.state_labels)[states_arr]
    return ForcedAlignment(labels, states_arr, float(togo[0, states[0]]))


@dataclass(frozen=True)
class PriorVector:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if np.any(p <= 0) or abs(p.sum() - 1.0) > 1e-6:
            raise DataError("priors must be positive and sum to one")
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, n: int) -> "PriorVector":
        return cls(np.full(n, 1.0 / n))


def estimate_priors(alignments: Iterable, inv: LabelInventory | int) -> PriorVector:
    """Relative label frequencies over all frames, floored at 1e-8 and renormalized."""
    n = inv if isinstance(inv, int) else len(inv)
    counts = np.zeros(n)
    seen = False
    for ali in alignments:
        labels = np.asarray(getattr(ali, "labels", ali), dtype=np.int64)
        counts += np.bincount(labels, minlength=n)[:n]
        seen = True
    if not seen or counts.sum() == 0:
        raise DataError("cannot estimate priors from an empty alignment collection")
    probs = np.maximum(counts / counts.sum(), PRIOR_FLOOR)
    return PriorVector(probs / probs.sum())
