"""Training criteria as (loss, d loss / d logits) pairs, plus timed lattices for sMBR."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, NoPathsError, ShapeError
from .graphs import (LabelInventory, add_optional_edges, build_ctc_graph, build_forced_graph,
                     forward_backward)
from .nnet import log_softmax


def ce_loss_grad(logits: np.ndarray, align) -> tuple[float, np.ndarray]:
    """Frame cross-entropy against a fixed alignment."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(getattr(align, "labels", align), dtype=np.int64)
    if targets.shape != (logits.shape[0],):
        raise ShapeError(f"alignment length {targets.shape} != {logits.shape[0]} frames")
    logp = log_softmax(logits)
    frames = np.arange(len(targets))
    loss = -float(np.sum(logp[frames, targets]))
    grad = np.exp(logp)
    grad[frames, targets] -= 1.0
    return loss, grad


def ctc_loss_grad(logits: np.ndarray, labels: Sequence[int],
                  inv: LabelInventory) -> tuple[float, np.ndarray]:
    """Negative CTC log probability of ``labels`` and its logit gradient.

    The gradient is softmax minus the forward-backward occupancies.
    """
    logp = log_softmax(np.asarray(logits, dtype=np.float64))
    log_total, gamma = forward_backward(build_ctc_graph(labels, inv), logp, log_domain=True)
    return -log_total, np.exp(logp) - gamma


def realign_loss_grad(logits: np.ndarray, labels: Sequence[int], priors=None,
                      optional_label: int | None = None) -> tuple[float, np.ndarray]:
    """Blank-free realignment criterion over a forced linear graph.

    Frame scores are posteriors divided by ``priors`` (when given); targets
    are the resulting occupancies. ``optional_label`` (e.g. silence) may
    additionally pad the utterance on both ends.
    """
    logp = log_softmax(np.asarray(logits, dtype=np.float64))
    graph = build_forced_graph(labels)
    if optional_label is not None:
        graph = add_optional_edges(graph, optional_label)
    log_total, gamma = forward_backward(graph, logp, priors=priors, log_domain=True)
    return -log_total, np.exp(logp) - gamma


@dataclass(frozen=True)
class LatticeArc:
    src: int
    dst: int
    label: int
    am_score: float = 0.0
    lm_score: float = 0.0


@dataclass(frozen=True)
class Lattice:
    """Acyclic timed graph; an arc labels every frame in ``[frame(src), frame(dst))``."""

    nodes: dict[int, int]  # node id -> frame index
    arcs: tuple[LatticeArc, ...]
    finals: frozenset[int]

    def __post_init__(self):
        for a in self.arcs:
            if a.src not in self.nodes or a.dst not in self.nodes:
                raise DataError(f"arc {a} references an unknown node")
            if self.nodes[a.dst] <= self.nodes[a.src]:
                raise DataError(f"arc {a} does not advance in time")
        if not self.arcs or not self.finals:
            raise NoPathsError("no paths: empty lattice")

    @property
    def start(self) -> int:
        has_in = {a.dst for a in self.arcs}
        roots = [n for n in self.nodes if n not in has_in]
        if len(roots) != 1:
            raise DataError(f"lattice needs exactly one start node, found {roots}")
        return roots[0]

    @property
    def num_frames(self) -> int:
        return max(self.nodes[f] for f in self.finals)

    def topo_order(self) -> list[int]:
        return sorted(self.nodes, key=lambda n: (self.nodes[n], n))

    def write(self, path: str | Path) -> None:
        lines = [f"node {n} {f}" for n, f in sorted(self.nodes.items())]
        lines += [f"arc {a.src} {a.dst} {a.label} {a.am_score!r} {a.lm_score!r}"
                  for a in self.arcs]
        lines += [f"final {n}" for n in sorted(self.finals)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "Lattice":
        nodes, arcs, finals = {}, [], set()
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            parts = line.split()
            if not parts:
                continue
            try:
                if parts[0] == "node":
                    nodes[int(parts[1])] = int(parts[2])
                elif parts[0] == "arc":
                    arcs.append(LatticeArc(int(parts[1]), int(parts[2]), int(parts[3]),
                                           float(parts[4]), float(parts[5])))
                elif parts[0] == "final":
                    finals.add(int(parts[1]))
                else:
                    raise ValueError(parts[0])
            except (ValueError, IndexError):
                raise DataError(f"{path}:{n}: malformed lattice line {line!r}") from None
        return cls(nodes, tuple(arcs), frozenset(finals))

    @classmethod
    def from_paths(cls, paths: Sequence[Sequence[int]],
                   lm_scores: Sequence[float] | None = None) -> "Lattice":
        """Lattice whose paths are the given frame-level label sequences.

        Each path becomes a chain of run-length arcs between a shared start
        node and a shared end node; ``lm_scores`` are put on each chain's first arc.
        """
        if not paths:
            raise NoPathsError("no paths: empty lattice")
        T = len(paths[0])
        nodes = {0: 0, 1: T}
        arcs = []
        for k, path in enumerate(paths):
            if len(path) != T:
                raise DataError("all lattice paths must span the same frames")
            runs = _runs(path)
            prev = 0
            for j, (label, start, end) in enumerate(runs):
                if end == T:
                    nxt = 1
                else:
                    nxt = len(nodes)
                    nodes[nxt] = end
                lm = lm_scores[k] if (lm_scores is not None and j == 0) else 0.0
                arcs.append(LatticeArc(prev, nxt, int(label), 0.0, float(lm)))
                prev = nxt
        return cls(nodes, tuple(arcs), frozenset({1}))


def _runs(seq) -> list[tuple[int, int, int]]:
    out = []
    start = 0
    for t in range(1, len(seq) + 1):
        if t == len(seq) or seq[t] != seq[start]:
            out.append((seq[start], start, t))
            start = t
    return out


def _lse2(a: float, b: float) -> float:
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    hi, lo = (a, b) if a > b else (b, a)
    return hi + float(np.log1p(np.exp(lo - hi)))


def _arc_acoustic(lat: Lattice, logp: np.ndarray) -> list[float]:
    T = logp.shape[0]
    out = []
    for a in lat.arcs:
        f0, f1 = lat.nodes[a.src], lat.nodes[a.dst]
        if f1 > T:
            raise ShapeError(f"lattice arc reaches frame {f1} beyond {T} logit frames")
        out.append(float(np.sum(logp[f0:f1, a.label])))
    return out


def lattice_best_path(lat: Lattice, logits: np.ndarray, kappa: float = 1.0) -> np.ndarray:
    """Frame labels of the highest-scoring lattice path (-1 on uncovered frames)."""
    logp = log_softmax(np.asarray(logits, dtype=np.float64))
    ac = _arc_acoustic(lat, logp)
    incoming: dict[int, list[int]] = {}
    for i, a in enumerate(lat.arcs):
        incoming.setdefault(a.dst, []).append(i)
    best = {lat.start: (0.0, None)}
    for n in lat.topo_order():
        for i in incoming.get(n, ()):
            a = lat.arcs[i]
            if a.src not in best:
                continue
            score = best[a.src][0] + kappa * ac[i] + a.lm_score
            if n not in best or score > best[n][0]:
                best[n] = (score, i)
    reached = [f for f in lat.finals if f in best]
    if not reached:
        raise NoPathsError("no paths: lattice has no complete path")
    node = max(reached, key=lambda f: best[f][0])
    labels = np.full(logp.shape[0], -1, dtype=np.int64)
    while best[node][1] is not None:
        a = lat.arcs[best[node][1]]
        labels[lat.nodes[a.src]:lat.nodes[a.dst]] = a.label
        node = a.src
    return labels


def smbr_loss_grad(num: Lattice, den: Lattice, logits: np.ndarray,
                   kappa: float = 1.0) -> tuple[float, np.ndarray]:
    """Expected frame accuracy over the denominator lattice and its logit gradient.

    Path posteriors are proportional to ``exp(kappa * acoustic + lm)`` where
    the acoustic score of an arc is the summed log-softmax of its label over
    the frames it covers (recomputed from ``logits``; stored arc acoustic
    scores are ignored). Accuracy counts frames whose label matches the best
    numerator path. Returns ``(objective, d objective / d logits)``; the
    objective is to be maximized.
    """
    logits = np.asarray(logits, dtype=np.float64)
    logp = log_softmax(logits)
    T, L = logp.shape
    ref = lattice_best_path(num, logits, kappa)
    ac = _arc_acoustic(den, logp)
    weights, accs = [], []
    for a, s in zip(den.arcs, ac):
        weights.append(kappa * s + a.lm_score)
        f0, f1 = den.nodes[a.src], den.nodes[a.dst]
        accs.append(float(np.sum(ref[f0:f1] == a.label)))

    order = den.topo_order()
    incoming: dict[int, list[int]] = {}
    outgoing: dict[int, list[int]] = {}
    for i, a in enumerate(den.arcs):
        incoming.setdefault(a.dst, []).append(i)
        outgoing.setdefault(a.src, []).append(i)

    start = den.start
    alpha = {n: -np.inf for n in den.nodes}
    alpha_acc = {n: 0.0 for n in den.nodes}
    alpha[start] = 0.0
    for n in order:
        if n == start:
            continue
        terms = [(alpha[den.arcs[i].src] + weights[i], i) for i in incoming.get(n, ())]
        total = -np.inf
        for w, _ in terms:
            total = _lse2(total, w)
        alpha[n] = total
        if total > -np.inf:
            alpha_acc[n] = sum(np.exp(w - total) * (alpha_acc[den.arcs[i].src] + accs[i])
                               for w, i in terms if w > -np.inf)

    beta = {n: -np.inf for n in den.nodes}
    beta_acc = {n: 0.0 for n in den.nodes}
    for n in reversed(order):
        terms = [(weights[i] + beta[den.arcs[i].dst], i) for i in outgoing.get(n, ())]
        if n in den.finals:
            terms.append((0.0, None))
        total = -np.inf
        for w, _ in terms:
            total = _lse2(total, w)
        beta[n] = total
        if total > -np.inf:
            beta_acc[n] = sum(np.exp(w - total) *
                              ((accs[i] + beta_acc[den.arcs[i].dst]) if i is not None else 0.0)
                              for w, i in terms if w > -np.inf)

    log_z = beta[start]
    if not np.isfinite(log_z):
        raise NoPathsError("no paths: denominator lattice has no complete path")
    expected = beta_acc[start]

    occ = np.zeros((T, L))
    occ_acc = np.zeros((T, L))
    for i, a in enumerate(den.arcs):
        lp = alpha[a.src] + weights[i] + beta[a.dst] - log_z
        if lp == -np.inf:
            continue
        gamma = np.exp(lp)
        acc_through = alpha_acc[a.src] + accs[i] + beta_acc[a.dst]
        f0, f1 = den.nodes[a.src], den.nodes[a.dst]
        occ[f0:f1, a.label] += gamma
        occ_acc[f0:f1, a.label] += gamma * acc_through
    # d objective / d log y(t, l), then through the log-softmax
    g_logp = kappa * (occ_acc - occ * expected)
    grad = g_logp - np.exp(logp) * g_logp.sum(axis=1, keepdims=True)
    return float(expected), grad
