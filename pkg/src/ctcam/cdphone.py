"""Context-dependent whole-phone clustering with per-phone binary question trees.

Each whole-phone occurrence is summarized by the first, centre and last frame
of its aligned run (first 40 feature coefficients each). Trees are grown by
greedy divisive clustering: the leaf whose best phonetic question gives the
largest single-Gaussian log-likelihood gain is split next.
"""

from __future__ import annotations

import heapq
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, ShapeError, UncoveredPhoneError, UnknownLabelError

BOUNDARY = -1
VAR_FLOOR = 1e-4
GAIN_TOLERANCE = 1e-9  # relative; smaller gains are rounding noise
SAMPLE_DIMS = 40

# Broad classes used to generate the default question set. Phones not listed
# still get singleton questions.
PHONE_CLASSES = {
    "vowel": {"aa", "ae", "ah", "ao", "aw", "ax", "ay", "eh", "er", "ey", "ih", "ix",
              "iy", "ow", "oy", "uh", "uw", "a", "e", "i", "o", "u"},
    "nasal": {"m", "n", "ng", "em", "en", "eng", "nx"},
    "plosive": {"b", "d", "g", "p", "t", "k", "q", "dx"},
    "fricative": {"f", "v", "th", "dh", "s", "z", "sh", "zh", "hh", "ch", "jh", "x"},
    "silence": {"sil", "sp", "spn", "pau", "h#", "<sil>"},
}


@dataclass(frozen=True)
class PhoneSample:
    phone: int
    left: int
    right: int
    vec: np.ndarray
    duration_frames: int


@dataclass(frozen=True)
class PhoneticQuestion:
    name: str
    side: str  # "left" | "right"
    phone_set: frozenset[int]

    def __post_init__(self):
        if self.side not in ("left", "right"):
            raise DataError(f"question side must be left/right, got {self.side!r}")
        if not self.phone_set:
            raise DataError(f"question {self.name!r} has an empty phone set")

    def ask(self, left: int, right: int) -> bool:
        return (left if self.side == "left" else right) in self.phone_set


@dataclass
class TreeNode:
    question: PhoneticQuestion | None = None
    yes: "TreeNode | None" = None
    no: "TreeNode | None" = None
    leaf_id: int = -1
    count: int = 0

    @property
    def is_leaf(self) -> bool:
        return self.question is None

    def leaves(self) -> list["TreeNode"]:
        if self.is_leaf:
            return [self]
        return self.yes.leaves() + self.no.leaves()


@dataclass(frozen=True)
class SplitRecord:
    phone: int
    question: PhoneticQuestion
    gain: float
    sample_indices: tuple[int, ...]


@dataclass
class CDPhoneTree:
    phone_names: tuple[str, ...]
    roots: dict[int, TreeNode]
    questions: tuple[PhoneticQuestion, ...]
    splits: list[SplitRecord] = field(default_factory=list)

    @property
    def num_leaves(self) -> int:
        return sum(len(r.leaves()) for r in self.roots.values())

    def leaf_names(self) -> list[str]:
        """Name of every CD phone, indexed by leaf id: ``<phone>_<k>``."""
        names = [""] * self.num_leaves
        for phone, root in self.roots.items():
            for k, leaf in enumerate(root.leaves()):
                names[leaf.leaf_id] = f"{self.phone_names[phone]}_{k}"
        return names

    def leaf_phone(self) -> dict[int, int]:
        return {leaf.leaf_id: phone for phone, root in self.roots.items()
                for leaf in root.leaves()}

    def map_context(self, phone: int, left: int, right: int) -> int:
        if phone not in self.roots:
            raise UnknownLabelError(f"unknown phone {phone}")
        node = self.roots[phone]
        while not node.is_leaf:
            node = node.yes if node.question.ask(left, right) else node.no
        return node.leaf_id


def map_context(tree: CDPhoneTree, phone: int, left: int, right: int) -> int:
    return tree.map_context(phone, left, right)


def collect_samples(alignment, feats, phone_map: Mapping[int, int | None] | None = None,
                    dims: int = SAMPLE_DIMS) -> list[PhoneSample]:
    """One sample per contiguous phone run of a frame alignment.

    ``phone_map`` maps alignment labels to phone ids; labels mapped to None
    are dropped before contexts are assigned.
    """
    labels = np.asarray(getattr(alignment, "labels", alignment), dtype=np.int64)
    data = np.asarray(getattr(feats, "data", feats), dtype=np.float64)
    if labels.shape[0] != data.shape[0]:
        raise ShapeError(f"alignment mismatch: {labels.shape[0]} labels vs {data.shape[0]} frames")
    if data.shape[1] < dims:
        raise ShapeError(f"need at least {dims} feature dims, got {data.shape[1]}")
    runs = []
    start = 0
    for t in range(1, len(labels) + 1):
        if t == len(labels) or labels[t] != labels[start]:
            phone = int(labels[start]) if phone_map is None else phone_map.get(int(labels[start]))
            if phone is not None:
                runs.append((phone, start, t))
            start = t
    samples = []
    for k, (phone, s, e) in enumerate(runs):
        centre = s + (e - 1 - s) // 2
        vec = np.concatenate([data[s, :dims], data[centre, :dims], data[e - 1, :dims]])
        left = runs[k - 1][0] if k > 0 else BOUNDARY
        right = runs[k + 1][0] if k + 1 < len(runs) else BOUNDARY
        samples.append(PhoneSample(phone, left, right, vec, e - s))
    return samples


def default_questions(phone_names: Sequence[str]) -> list[PhoneticQuestion]:
    """Class and singleton questions on both sides, de-duplicated by phone set."""
    ids = {name: i for i, name in enumerate(phone_names)}
    sets: list[tuple[str, frozenset[int]]] = []
    for cls, members in PHONE_CLASSES.items():
        s = frozenset(ids[m] for m in members if m in ids)
        if s:
            sets.append((cls, s))
    for name, i in ids.items():
        sets.append((name, frozenset({i})))
    seen = set()
    questions = []
    for side in ("left", "right"):
        for name, s in sets:
            if (side, s) in seen:
                continue
            seen.add((side, s))
            questions.append(PhoneticQuestion(f"{side[0].upper()}-{name}", side, s))
    return questions


def gaussian_loglik(n: float, s1: np.ndarray, s2: np.ndarray) -> float:
    """Log-likelihood of n points with sums s1, s2 under their own diagonal Gaussian fit."""
    if n <= 0:
        return 0.0
    mean = s1 / n
    raw_var = np.maximum(s2 / n - mean * mean, 0.0)
    var = np.maximum(raw_var, VAR_FLOOR)
    return float(-0.5 * np.sum(n * np.log(2.0 * np.pi * var) + n * raw_var / var))


def _best_split(idx, X, X2, lefts, rights, questions, min_leaf_count):
    """Best (gain, question index, yes mask) for the samples ``idx``; None if no valid split."""
    x, x2 = X[idx], X2[idx]
    n = len(idx)
    base = gaussian_loglik(n, x.sum(0), x2.sum(0))
    best = None
    for qi, q in enumerate(questions):
        ctx = lefts[idx] if q.side == "left" else rights[idx]
        mask = np.isin(ctx, list(q.phone_set))
        n_yes = int(mask.sum())
        n_no = n - n_yes
        if n_yes < max(1, min_leaf_count) or n_no < max(1, min_leaf_count):
            continue
        s1y, s2y = x[mask].sum(0), x2[mask].sum(0)
        s1n, s2n = x.sum(0) - s1y, x2.sum(0) - s2y
        gain = gaussian_loglik(n_yes, s1y, s2y) + gaussian_loglik(n_no, s1n, s2n) - base
        if best is None or gain > best[0]:
            best = (gain, qi, mask)
    if best is not None and best[0] <= GAIN_TOLERANCE * max(1.0, abs(base)):
        return None  # nothing to gain, e.g. identical samples
    return best


def grow_trees(samples: Sequence[PhoneSample], questions: Sequence[PhoneticQuestion],
               min_leaf_count: int = 1, min_gain: float = 0.0,
               max_leaves: float = math.inf, phone_names: Sequence[str] | None = None,
               phones: Iterable[int] | None = None) -> CDPhoneTree:
    """Grow one tree per phone by greedy likelihood-gain splitting.

    Splitting stops when the best remaining gain is below ``min_gain``, when
    no question leaves both children with ``min_leaf_count`` samples, or
    when the total leaf count reaches ``max_leaves``.
    """
    if not samples:
        raise UncoveredPhoneError("uncovered phone: no samples")
    questions = tuple(questions)
    X = np.stack([s.vec for s in samples]).astype(np.float64)
    X2 = X * X
    lefts = np.array([s.left for s in samples])
    rights = np.array([s.right for s in samples])
    by_phone: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_phone.setdefault(s.phone, []).append(i)
    wanted = sorted(set(phones) if phones is not None else by_phone)
    missing = [p for p in wanted if p not in by_phone]
    if missing:
        raise UncoveredPhoneError(f"uncovered phone(s): {missing}")
    if phone_names is None:
        phone_names = [str(i) for i in range(max(wanted) + 1)]

    roots = {p: TreeNode(count=len(by_phone[p])) for p in wanted}
    heap: list = []
    tick = 0

    def push(phone, node, idx):
        nonlocal tick
        found = _best_split(idx, X, X2, lefts, rights, questions, min_leaf_count)
        if found is not None:
            heapq.heappush(heap, (-found[0], tick, phone, node, idx, found))
            tick += 1

    for p in wanted:
        push(p, roots[p], np.asarray(by_phone[p]))
    leaves = len(wanted)
    splits: list[SplitRecord] = []
    while heap and leaves < max_leaves:
        _, _, phone, node, idx, (gain, qi, mask) = heapq.heappop(heap)
        if not gain >= min_gain:
            break
        node.question = questions[qi]
        node.yes = TreeNode(count=int(mask.sum()))
        node.no = TreeNode(count=int((~mask).sum()))
        splits.append(SplitRecord(phone, questions[qi], gain, tuple(int(i) for i in idx)))
        leaves += 1
        push(phone, node.yes, idx[mask])
        push(phone, node.no, idx[~mask])

    next_id = 0
    for p in wanted:
        for leaf in roots[p].leaves():
            leaf.leaf_id = next_id
            next_id += 1
    return CDPhoneTree(tuple(phone_names), roots, questions, splits)


def split_gains(samples: Sequence[PhoneSample], indices: Sequence[int],
                questions: Sequence[PhoneticQuestion], min_leaf_count: int = 1) -> list[float | None]:
    """Gain of every question on one node's samples (None where the split is invalid)."""
    X = np.stack([samples[i].vec for i in indices]).astype(np.float64)
    base = gaussian_loglik(len(X), X.sum(0), (X * X).sum(0))
    out: list[float | None] = []
    for q in questions:
        yes = np.array([q.ask(samples[i].left, samples[i].right) for i in indices])
        if min(yes.sum(), (~yes).sum()) < max(1, min_leaf_count):
            out.append(None)
            continue
        a, b = X[yes], X[~yes]
        out.append(gaussian_loglik(len(a), a.sum(0), (a * a).sum(0)) +
                   gaussian_loglik(len(b), b.sum(0), (b * b).sum(0)) - base)
    return out


@dataclass(frozen=True)
class DurationStats:
    histograms: dict[int, Counter]
    minima: dict[int, int]

    def write(self, path: str | Path) -> None:
        lines = [f"{k}\t{v}" for k, v in sorted(self.minima.items())]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "DurationStats":
        minima = {}
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                k, v = line.split("\t")
                minima[int(k)] = max(1, int(v))
            except ValueError:
                raise DataError(f"{path}:{n}: expected 'cdphone_id<TAB>min_frames'") from None
        return cls({}, minima)


def durations_by_leaf(samples: Iterable[PhoneSample], tree: CDPhoneTree) -> dict[int, list[int]]:
    out: dict[int, list[int]] = {}
    for s in samples:
        out.setdefault(tree.map_context(s.phone, s.left, s.right), []).append(s.duration_frames)
    return out


def duration_minima(durations: Mapping[int, Sequence[int]], percentile: float = 0.10) -> DurationStats:
    """Per unit, the smallest duration d whose cumulative histogram fraction reaches ``percentile``."""
    hists, minima = {}, {}
    for unit, durs in durations.items():
        hist = Counter(int(d) for d in durs)
        if not hist:
            raise DataError(f"no durations for unit {unit}")
        n = sum(hist.values())
        cum = 0
        chosen = max(hist)
        for d in sorted(hist):
            cum += hist[d]
            if cum / n >= percentile:
                chosen = d
                break
        hists[unit] = hist
        minima[unit] = max(1, chosen)
    return DurationStats(hists, minima)


# --- tree file: "phones ...", "question name side phones...", "tree phone sexpr" lines ---

def write_tree(path: str | Path, tree: CDPhoneTree) -> None:
    names = tree.phone_names

    def sexpr(node: TreeNode) -> str:
        if node.is_leaf:
            return str(node.leaf_id)
        return f"({node.question.name} {sexpr(node.yes)} {sexpr(node.no)})"

    lines = ["phones " + " ".join(names)]
    for q in tree.questions:
        lines.append(f"question {q.name} {q.side} " + " ".join(names[p] for p in sorted(q.phone_set)))
    for phone, root in sorted(tree.roots.items()):
        lines.append(f"tree {names[phone]} {sexpr(root)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_tree(path: str | Path) -> CDPhoneTree:
    names: list[str] = []
    questions: dict[str, PhoneticQuestion] = {}
    roots: dict[int, TreeNode] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "phones":
            names = parts[1:]
        elif parts[0] == "question":
            ids = {n: i for i, n in enumerate(names)}
            questions[parts[1]] = PhoneticQuestion(parts[1], parts[2],
                                                   frozenset(ids[p] for p in parts[3:]))
        elif parts[0] == "tree":
            tokens = re.findall(r"\(|\)|[^\s()]+", line.split(None, 2)[2])
            node, rest = _parse_sexpr(tokens, questions)
            if rest:
                raise DataError(f"{path}: trailing tokens in tree for {parts[1]}")
            roots[names.index(parts[1])] = node
        else:
            raise DataError(f"{path}: unknown line type {parts[0]!r}")
    return CDPhoneTree(tuple(names), roots, tuple(questions.values()))


def _parse_sexpr(tokens, questions):
    head, rest = tokens[0], tokens[1:]
    if head != "(":
        return TreeNode(leaf_id=int(head)), rest
    q = questions[rest[0]]
    yes, rest = _parse_sexpr(rest[1:], questions)
    no, rest = _parse_sexpr(rest, questions)
    if not rest or rest[0] != ")":
        raise DataError("unbalanced tree expression")
    return TreeNode(question=q, yes=yes, no=no), rest[1:]
