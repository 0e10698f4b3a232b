"""Word error rate scoring with Levenshtein alignment."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import DataError

# alignment ops
MATCH, SUB, INS, DEL = "=", "S", "I", "D"


def align_words(ref: Sequence[str], hyp: Sequence[str]) -> list[tuple[str, str | None, str | None]]:
    """Minimum edit-distance alignment as (op, ref word, hyp word) triples.

    Among equal-cost alignments, matches/substitutions are preferred over
    deletions, and deletions over insertions, when tracing back.
    """
    n, m = len(ref), len(hyp)
    cost = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        cost[i][0] = i
    for j in range(1, m + 1):
        cost[0][j] = j
    for i in range(1, n + 1):
        row, prev = cost[i], cost[i - 1]
        r = ref[i - 1]
        for j in range(1, m + 1):
            diag = prev[j - 1] + (r != hyp[j - 1])
            row[j] = min(diag, prev[j] + 1, row[j - 1] + 1)
    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i][j] == cost[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            ops.append((MATCH if ref[i - 1] == hyp[j - 1] else SUB, ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and cost[i][j] == cost[i - 1][j] + 1:
            ops.append((DEL, ref[i - 1], None))
            i -= 1
        else:
            ops.append((INS, None, hyp[j - 1]))
            j -= 1
    return ops[::-1]


@dataclass
class WerReport:
    wer: float  # percent
    substitutions: int
    insertions: int
    deletions: int
    ref_words: int
    utterances: int
    oov_rate: float  # percent of reference tokens not in the vocabulary
    oov_utterance_rate: float  # percent of utterances with at least one OOV token
    kept: list[int] = field(default_factory=list)  # indices of the utterances scored
    alignments: list[list[tuple]] = field(default_factory=list)

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    def summary_lines(self) -> list[str]:
        return [
            f"wer={self.wer:.4f}",
            f"substitutions={self.substitutions}",
            f"insertions={self.insertions}",
            f"deletions={self.deletions}",
            f"ref_words={self.ref_words}",
            f"utterances={self.utterances}",
            f"oov_rate={self.oov_rate:.4f}",
            f"oov_utterance_rate={self.oov_utterance_rate:.4f}",
        ]

    def aligned_text(self, ids: Sequence[str] | None = None) -> str:
        blocks = []
        for k, (idx, ops) in enumerate(zip(self.kept, self.alignments)):
            ref_row, hyp_row, op_row = [], [], []
            for op, r, h in ops:
                r = r if r is not None else "*" * len(h)
                h = h if h is not None else "*" * len(r)
                width = max(len(r), len(h))
                ref_row.append(r.ljust(width))
                hyp_row.append(h.ljust(width))
                op_row.append((" " if op == MATCH else op).ljust(width))
            name = ids[idx] if ids is not None else str(idx)
            blocks.append(f"id: {name}\nREF: {' '.join(ref_row)}\nHYP: {' '.join(hyp_row)}\n"
                          f"     {' '.join(op_row)}")
        return "\n\n".join(blocks)


def score_wer(refs: Sequence[Sequence[str]], hyps: Sequence[Sequence[str]], mode: str = "all",
              vocab: Iterable[str] | None = None) -> WerReport:
    """Corpus WER. ``mode="exclude_oov"`` drops utterances whose reference has an OOV word."""
    if len(refs) != len(hyps):
        raise DataError(f"{len(refs)} references but {len(hyps)} hypotheses")
    if not refs:
        raise DataError("empty reference set")
    if mode not in ("all", "exclude_oov"):
        raise DataError(f"unknown scoring mode {mode!r}")
    vocab_set = set(vocab) if vocab is not None else None
    if mode == "exclude_oov" and vocab_set is None:
        raise DataError("exclude_oov scoring needs a vocabulary")

    oov_tokens = total_tokens = oov_utts = 0
    kept = []
    for i, ref in enumerate(refs):
        n_oov = sum(w not in vocab_set for w in ref) if vocab_set is not None else 0
        oov_tokens += n_oov
        total_tokens += len(ref)
        oov_utts += n_oov > 0
        if mode == "all" or n_oov == 0:
            kept.append(i)

    s = ins = d = n = 0
    alignments = []
    for i in kept:
        ops = align_words(list(refs[i]), list(hyps[i]))
        alignments.append(ops)
        s += sum(op == SUB for op, *_ in ops)
        ins += sum(op == INS for op, *_ in ops)
        d += sum(op == DEL for op, *_ in ops)
        n += len(refs[i])
    if n == 0:
        raise DataError("no reference words left to score")
    return WerReport(
        wer=100.0 * (s + ins + d) / n,
        substitutions=s, insertions=ins, deletions=d, ref_words=n, utterances=len(kept),
        oov_rate=100.0 * oov_tokens / total_tokens if total_tokens else 0.0,
        oov_utterance_rate=100.0 * oov_utts / len(refs),
        kept=kept, alignments=alignments,
    )
