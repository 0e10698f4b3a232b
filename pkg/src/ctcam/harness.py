"""Corpora, training recipes (CE / CTC / realign / sMBR), evaluation and dumps."""

from __future__ import annotations

import io
import logging
import math
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence, TextIO

import numpy as np

from . import criteria, decoder, nnet
from .errors import ConfigError, CtcamError, DataError, NumericalError
from .frontend import FeatureMatrix, Normalizer, StackConfig, load_features, stack_frames
from .graphs import (LabelInventory, Lexicon, PriorVector, add_optional_edges, build_ctc_graph,
                     build_forced_graph, estimate_priors, viterbi_align)
from .scoring import WerReport, score_wer

log = logging.getLogger(__name__)

WORD_VOCAB_PRESETS = {"7k-style": 150, "25k-style": 20}
CRITERIA = ("ce", "ctc", "realign", "smbr")


@dataclass
class Utterance:
    id: str
    path: str | None = None
    transcript: tuple[str, ...] = ()
    feats: FeatureMatrix | None = None
    frame_labels: np.ndarray | None = None  # per input frame, for CE targets

    def features(self, n_mels: int = 80) -> FeatureMatrix:
        if self.feats is None:
            if self.path is None:
                raise DataError(f"{self.id}: no features and no path")
            self.feats = load_features(self.path, n_mels=n_mels)
        return self.feats


def read_manifest(path: str | Path) -> list[Utterance]:
    """Lines of ``id<TAB>path<TAB>transcript``; relative paths resolve against the manifest."""
    base = Path(path).parent
    utts = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{n}: expected 'id<TAB>path<TAB>transcript'")
        uid, p, text = parts
        p = Path(p)
        utts.append(Utterance(uid, str(p if p.is_absolute() else base / p), tuple(text.split())))
    return utts


def write_manifest(path: str | Path, utts: Sequence[Utterance]) -> None:
    lines = [f"{u.id}\t{u.path}\t{' '.join(u.transcript)}" for u in utts]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_alignments(path: str | Path, inv: LabelInventory) -> dict[str, np.ndarray]:
    """Lines of ``utt_id<TAB>label label ...`` with one label name per frame."""
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        uid, _, labels = line.partition("\t")
        if not labels.strip():
            raise DataError(f"{path}:{n}: empty alignment")
        out[uid] = np.asarray(inv.ids(labels.split()), dtype=np.int64)
    return out


def write_alignments(path: str | Path, alignments: dict[str, Sequence[int]],
                     inv: LabelInventory) -> None:
    lines = [f"{uid}\t{' '.join(inv.names(int(x) for x in ali))}" for uid, ali in alignments.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------- toy corpus

TOY_LABELS = ("a", "e", "i", "s", "t", "n")
TOY_SILENCE = "sil"


@dataclass
class ToyCorpus:
    utterances: list[Utterance]
    labels: tuple[str, ...]
    templates: np.ndarray  # (K + 1, D); last row is silence

    def ctc_inventory(self) -> LabelInventory:
        return LabelInventory.from_names(self.labels, with_blank=True)

    def frame_inventory(self) -> LabelInventory:
        """Blank-free inventory (labels + silence) matching ``frame_labels``."""
        return LabelInventory.from_names(self.labels + (TOY_SILENCE,))


def make_toy_corpus(n_utts: int, num_labels: int = 6, dim: int = 40, seed: int = 0,
                    min_labels: int = 2, max_labels: int = 5, min_dur: int = 6,
                    max_dur: int = 12, noise: float = 0.5,
                    templates: np.ndarray | None = None) -> ToyCorpus:
    """Synthetic corpus: each label is a fixed feature template plus Gaussian noise.

    Label segments have uniform random durations; silence (a zero template)
    pads both ends and separates repeated labels. Pass the ``templates`` of
    another corpus to draw held-out data from the same distribution.
    """
    if num_labels < 1 or num_labels > 26:
        raise ConfigError("num_labels must be in 1..26")
    labels = TOY_LABELS[:num_labels] if num_labels <= len(TOY_LABELS) else \
        tuple(chr(ord("a") + k) for k in range(num_labels))
    rng = np.random.default_rng(seed)
    if templates is None:
        templates = np.vstack([rng.normal(0.0, 1.0, size=(num_labels, dim)) * 2.0,
                               np.zeros((1, dim))])
    sil = num_labels
    utts = []
    for u in range(n_utts):
        n = int(rng.integers(min_labels, max_labels + 1))
        seq = [int(x) for x in rng.integers(0, num_labels, size=n)]
        frames: list[int] = [sil] * int(rng.integers(2, 5))
        for k, lab in enumerate(seq):
            if k > 0 and (lab == seq[k - 1] or rng.random() < 0.3):
                frames += [sil] * int(rng.integers(1, 4))
            frames += [lab] * int(rng.integers(min_dur, max_dur + 1))
        frames += [sil] * int(rng.integers(2, 5))
        frame_labels = np.asarray(frames)
        data = templates[frame_labels] + rng.normal(0.0, noise, size=(len(frames), dim))
        utts.append(Utterance(f"toy{seed}_{u:05d}", None, tuple(labels[k] for k in seq),
                              FeatureMatrix(data), frame_labels))
    return ToyCorpus(utts, tuple(labels), templates)


# --------------------------------------------------------------------------- model bundle

@dataclass
class AcousticModel:
    params: nnet.ModelParams
    inventory: LabelInventory
    stack: StackConfig = StackConfig()
    normalizer: Normalizer | None = None
    delay: int = 0

    def prepare(self, feats: FeatureMatrix) -> FeatureMatrix:
        if self.normalizer is not None:
            feats = self.normalizer(feats)
        return stack_frames(feats, self.stack)

    def posteriors(self, feats: FeatureMatrix) -> nnet.Posteriorgram:
        return nnet.forward(self.params, self.prepare(feats))[0]

    def with_params(self, params: nnet.ModelParams) -> "AcousticModel":
        return replace(self, params=params)

    def save(self, path: str | Path) -> None:
        """Write a checkpoint. Tensors are stored as 32-bit floats, so the
        round trip is exact for models whose tensors are already rounded
        (fresh initializations and everything :func:`train` returns)."""
        extra = {
            "labels": list(self.inventory.labels),
            "blank_id": self.inventory.blank_id,
            "kind": self.inventory.kind,
            "stack": self.stack.stack,
            "skip": self.stack.skip,
            "pad_edge": self.stack.pad_edge,
            "delay": self.delay,
        }
        if self.normalizer is not None:
            extra["norm_mean"] = [float(x) for x in self.normalizer.mean]
            extra["norm_std"] = [float(x) for x in self.normalizer.std]
        nnet.save_checkpoint(path, self.params, extra)

    @classmethod
    def load(cls, path: str | Path) -> "AcousticModel":
        params, extra = nnet.load_checkpoint(path)
        inv = LabelInventory(tuple(extra["labels"]), extra["blank_id"], extra["kind"])
        norm = None
        if "norm_mean" in extra:
            norm = Normalizer(np.asarray(extra["norm_mean"]), np.asarray(extra["norm_std"]))
        return cls(params, inv, StackConfig(extra["stack"], extra["skip"], extra["pad_edge"]),
                   norm, extra.get("delay", 0))


# --------------------------------------------------------------------------- vocabularies

def build_word_inventory(transcripts: Iterable[Sequence[str]], min_exemplars: int | str) -> LabelInventory:
    """Words seen at least ``min_exemplars`` times, most frequent first, plus blank."""
    if isinstance(min_exemplars, str):
        try:
            min_exemplars = WORD_VOCAB_PRESETS[min_exemplars]
        except KeyError:
            raise ConfigError(f"unknown vocabulary preset {min_exemplars!r}") from None
    counts = Counter(w for t in transcripts for w in t)
    if not counts:
        raise DataError("empty corpus")
    kept = sorted((w for w, c in counts.items() if c >= min_exemplars),
                  key=lambda w: (-counts[w], w))
    if not kept:
        raise DataError(f"no word has >= {min_exemplars} exemplars")
    return LabelInventory.from_names(kept, kind="word", with_blank=True)


def target_ids(utt: Utterance, inv: LabelInventory, lexicon: Lexicon | None = None) -> list[int]:
    """Transcript as label ids: lexicon expansion if given, else tokens are labels."""
    if lexicon is not None and inv.kind != "word":
        return lexicon.expand(utt.transcript)
    return inv.ids(utt.transcript)


def label_loop_graph(inv: LabelInventory, allow_blank: bool | None = None,
                     min_dur=None) -> decoder.DecodeGraph:
    """Decode graph in which every non-blank label is a one-unit word, uniform LM."""
    ids = inv.non_blank_ids()
    lex = Lexicon({inv.labels[i]: ((i,),) for i in ids})
    lm = decoder.LanguageModel.uniform([inv.labels[i] for i in ids])
    allow = inv.is_ctc if allow_blank is None else allow_blank
    return decoder.build_decode_graph(lex, lm, allow_blank=allow, blank_id=inv.blank_id,
                                      min_dur=min_dur)


# --------------------------------------------------------------------------- training

@dataclass
class TrainConfig:
    criterion: str = "ctc"
    arch: str | tuple[nnet.LayerSpec, ...] = "toy"
    stack: StackConfig = StackConfig(3, 3)
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 1
    steps: int = 1000
    seed: int = 0
    delay: int = 0
    halve_on_plateau: bool = True
    normalize: bool = True
    optional_silence: str | None = None  # realign: label allowed to pad both ends
    # sMBR
    kappa: float = 1.0
    smbr_blank_scale: float = 1.0  # posterior scale used when generating sMBR lattices
    lattice_k: int = 8
    lattice_beam: float = math.inf
    tokens_per_state: int = 4
    # checkpoints / logging
    checkpoint_path: str | None = None
    checkpoint_every: int = 0
    log_every: int = 0

    def __post_init__(self):
        if self.criterion not in CRITERIA:
            raise ConfigError(f"unknown criterion {self.criterion!r}")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("learning_rate must be >= 0 and momentum in [0, 1)")
        if self.batch_size < 1 or self.steps < 0 or self.delay < 0:
            raise ConfigError("batch_size >= 1, steps >= 0 and delay >= 0 required")


@dataclass
class StepLog:
    step: int
    loss: float  # per frame
    grad_norm: float
    time_ms: float

    def line(self) -> str:
        return f"{self.step} {self.loss:.6f} {self.grad_norm:.6f} {self.time_ms:.3f}"


@dataclass
class TrainResult:
    model: AcousticModel
    log: list[StepLog] = field(default_factory=list)
    epochs: int = 0
    visit_order: list[list[int]] = field(default_factory=list)  # utterance indices per epoch
    final_lr: float = 0.0


@dataclass
class _Prepared:
    x: np.ndarray
    labels: object  # label ids, or frame labels for CE
    targets: object = None  # what the criterion consumes; (num, den) lattices for sMBR


def frame_targets(frame_labels: np.ndarray, stack: StackConfig, n_out: int, delay: int = 0) -> np.ndarray:
    """Per-output-frame CE targets: label at the centre of each stacked window, then delayed."""
    T = len(frame_labels)
    centre = np.minimum(np.arange(n_out) * stack.skip + (stack.stack - 1) // 2, T - 1)
    targets = frame_labels[centre]
    if delay:
        targets = np.concatenate([np.full(delay, targets[0]), targets])[:n_out]
    return targets


def _check_inventory(criterion: str, inv: LabelInventory):
    if criterion in ("ctc", "smbr") and not inv.is_ctc:
        raise ConfigError(f"{criterion} training needs an inventory with a blank label")
    if criterion == "realign" and inv.is_ctc:
        raise ConfigError("realign training uses a blank-free inventory")


def train(cfg: TrainConfig, data: Sequence[Utterance], inventory: LabelInventory | None = None,
          model_in: AcousticModel | None = None, lexicon: Lexicon | None = None,
          decode_graph: decoder.DecodeGraph | None = None,
          on_step: Callable[[StepLog], None] | None = None) -> TrainResult:
    """Momentum SGD over seeded shuffles of ``data``.

    Gradients are summed over a mini-batch of utterances and divided by its
    frame count. sMBR needs ``model_in``; its lattices are regenerated at the
    start of each epoch. The returned model's tensors are rounded to storage
    precision. Raises NumericalError (after writing the last good checkpoint
    when a path is configured) if the loss becomes non-finite.
    """
    if not data:
        raise DataError("no training data")
    if cfg.criterion == "smbr" and model_in is None:
        raise ConfigError("sMBR training needs an initial model")
    if model_in is not None:
        model = model_in
    else:
        if inventory is None:
            raise ConfigError("a label inventory is required to initialize a model")
        feats = [u.features() for u in data]
        norm = Normalizer.fit(feats) if cfg.normalize else None
        in_dim = feats[0].dim * cfg.stack.stack
        params = nnet.init_params(cfg.arch, in_dim, len(inventory), seed=cfg.seed,
                                  blank_id=inventory.blank_id, label_inventory_id=inventory.ident)
        model = AcousticModel(params, inventory, cfg.stack, norm, cfg.delay)
    inv = model.inventory
    _check_inventory(cfg.criterion, inv)
    pad = inv.id(cfg.optional_silence) if cfg.optional_silence else None

    prepared = []
    for u in data:
        x = model.prepare(u.features()).data
        if cfg.criterion == "ce":
            if u.frame_labels is None:
                raise DataError(f"{u.id}: CE training needs frame labels")
            tgt = frame_targets(np.asarray(u.frame_labels), model.stack, x.shape[0], model.delay)
        else:
            tgt = target_ids(u, inv, lexicon)
        prepared.append(_Prepared(x, tgt, tgt))

    if cfg.criterion == "smbr" and decode_graph is None:
        decode_graph = label_loop_graph(inv)

    rng = np.random.default_rng(cfg.seed)
    params = model.params
    velocity = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    lr = cfg.learning_rate
    result = TrainResult(model)
    priors = PriorVector.uniform(len(inv)) if cfg.criterion == "realign" else None
    order: list[int] = []
    step = 0
    epoch_losses: list[float] = []
    epoch_frames = 0
    best_epoch_loss = math.inf

    while step < cfg.steps:
        if not order:
            if result.epochs > 0:
                epoch_loss = sum(epoch_losses) / max(1, epoch_frames)
                if cfg.halve_on_plateau and epoch_loss >= best_epoch_loss:
                    lr *= 0.5
                    log.info("loss plateau (%.4f), learning rate halved to %g", epoch_loss, lr)
                best_epoch_loss = min(best_epoch_loss, epoch_loss)
                if cfg.criterion == "realign":
                    priors = _realign_priors(params, prepared, priors, len(inv), pad)
            epoch_losses, epoch_frames = [], 0
            perm = rng.permutation(len(prepared))
            result.visit_order.append([int(i) for i in perm])
            order = list(perm)
            result.epochs += 1
            if cfg.criterion == "smbr":
                _attach_lattices(params, prepared, inv, decode_graph, cfg)
        batch, order = order[:cfg.batch_size], order[cfg.batch_size:]
        t0 = time.perf_counter()
        total: nnet.GradientSet | None = None
        frames = 0
        for i in batch:
            item = prepared[i]
            g = _utterance_gradient(params, item, cfg, inv, priors, pad)
            total = g if total is None else total + g
            frames += item.x.shape[0]
        loss = total.loss / frames
        grads = total.scaled(1.0 / frames)
        if not (math.isfinite(loss) and math.isfinite(grads.norm())):
            # params are still the state after the last completed step
            if cfg.checkpoint_path:
                model.with_params(params.rounded()).save(cfg.checkpoint_path)
            raise NumericalError(f"non-finite loss or gradient at step {step + 1}")
        new = {}
        for k, v in params.tensors.items():
            velocity[k] = cfg.momentum * velocity[k] - lr * grads.tensors[k]
            new[k] = v + velocity[k]
        params = params.with_tensors(new)
        step += 1
        entry = StepLog(step, loss, grads.norm(), 1000.0 * (time.perf_counter() - t0))
        result.log.append(entry)
        epoch_losses.append(total.loss)
        epoch_frames += frames
        if on_step is not None:
            on_step(entry)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d loss %.4f lr %g", step, loss, lr)
        if cfg.checkpoint_path and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            model.with_params(params.rounded()).save(cfg.checkpoint_path)

    result.model = model.with_params(params.rounded())
    result.final_lr = lr
    if cfg.checkpoint_path:
        result.model.save(cfg.checkpoint_path)
    return result


def _utterance_gradient(params, item: _Prepared, cfg: TrainConfig, inv: LabelInventory,
                        priors, pad: int | None = None) -> nnet.GradientSet:
    _, cache = nnet.forward(params, item.x)
    logits = cache.logits
    if cfg.criterion == "ce":
        loss, dlogits = criteria.ce_loss_grad(logits, item.targets)
    elif cfg.criterion == "ctc":
        loss, dlogits = criteria.ctc_loss_grad(logits, item.targets, inv)
    elif cfg.criterion == "realign":
        loss, dlogits = criteria.realign_loss_grad(logits, item.targets, priors, pad)
    else:
        num, den = item.targets
        obj, dobj = criteria.smbr_loss_grad(num, den, logits, cfg.kappa)
        loss, dlogits = -obj, -dobj
    grads = nnet.backward(params, cache, dlogits)
    grads.loss = float(loss)
    return grads


def forced_graph(labels: Sequence[int], pad: int | None = None):
    """Linear forced-alignment graph, optionally padded by ``pad`` on both ends."""
    g = build_forced_graph(labels)
    return add_optional_edges(g, pad) if pad is not None else g


def _realign_priors(params, prepared, priors, n_labels, pad=None) -> PriorVector:
    alignments = []
    for item in prepared:
        post, _ = nnet.forward(params, item.x)
        alignments.append(viterbi_align(forced_graph(item.labels, pad), post, priors))
    return estimate_priors(alignments, n_labels)


def _lattice_pair(post, targets, inv: LabelInventory, graph: decoder.DecodeGraph,
                  params: decoder.DecodeParams) -> tuple[criteria.Lattice, criteria.Lattice]:
    ali = viterbi_align(build_ctc_graph(targets, inv), post)
    num = criteria.Lattice.from_paths([ali.labels])
    try:
        _, den = decoder.beam_search(graph, post, params)
    except CtcamError:
        den = num  # nothing competes with the reference: zero gradient
    return num, den


def smbr_lattices(model: AcousticModel, utt: Utterance, graph: decoder.DecodeGraph,
                  lexicon: Lexicon | None = None, blank_scale: float = 1.0, lattice_k: int = 8,
                  tokens_per_state: int = 4, lattice_beam: float = math.inf
                  ) -> tuple[criteria.Lattice, criteria.Lattice]:
    """Numerator (forced CTC alignment) and denominator (beam search) lattices.

    Lattices come from unscaled posteriors by default; a blank scale can be
    baked into the model beforehand instead.
    """
    params = decoder.DecodeParams(beam=lattice_beam, blank_scale=blank_scale, lattice_k=lattice_k,
                                  tokens_per_state=tokens_per_state)
    post = model.posteriors(utt.features())
    return _lattice_pair(post, target_ids(utt, model.inventory, lexicon), model.inventory,
                         graph, params)


def _attach_lattices(params, prepared, inv, graph, cfg: TrainConfig):
    dparams = decoder.DecodeParams(beam=cfg.lattice_beam, blank_scale=cfg.smbr_blank_scale,
                                   lattice_k=cfg.lattice_k, tokens_per_state=cfg.tokens_per_state)
    for item in prepared:
        post, _ = nnet.forward(params, item.x)
        item.targets = _lattice_pair(post, item.labels, inv, graph, dparams)


def smbr_objective(model: AcousticModel, data: Sequence[Utterance],
                   lattices: Sequence[tuple[criteria.Lattice, criteria.Lattice]],
                   kappa: float = 1.0) -> float:
    """Summed sMBR objective of ``model`` over fixed (num, den) lattice pairs."""
    total = 0.0
    for utt, (num, den) in zip(data, lattices):
        _, cache = nnet.forward(model.params, model.prepare(utt.features()))
        total += criteria.smbr_loss_grad(num, den, cache.logits, kappa)[0]
    return total


# --------------------------------------------------------------------------- evaluation

@dataclass
class DecodeConfig:
    mode: str = "greedy"  # "greedy" | "beam"
    params: decoder.DecodeParams = decoder.DecodeParams()
    score_mode: str = "all"
    vocab: frozenset[str] | None = None


@dataclass
class UtteranceResult:
    id: str
    ref: tuple[str, ...]
    hyp: tuple[str, ...]
    score: float = 0.0
    error: str | None = None

    def line(self) -> str:
        return f"{self.id}\t{' '.join(self.hyp)}\t{self.score:.6f}"


@dataclass
class EvalResult:
    report: WerReport
    utterances: list[UtteranceResult]


def evaluate(model: AcousticModel, data: Sequence[Utterance], cfg: DecodeConfig = DecodeConfig(),
             graph: decoder.DecodeGraph | None = None, lexicon: Lexicon | None = None,
             posteriors: Callable[[Utterance], object] | None = None) -> EvalResult:
    """Decode every utterance and score it.

    Greedy decoding compares label names with the transcript's label
    sequence (lexicon-expanded for phone models); beam decoding compares
    word sequences. Per-utterance decode failures yield an empty hypothesis
    and are recorded, not raised.
    """
    inv = model.inventory
    results = []
    for u in data:
        post = posteriors(u) if posteriors is not None else model.posteriors(u.features())
        if cfg.mode == "greedy":
            if lexicon is not None and inv.kind != "word":
                ref = tuple(inv.names(lexicon.expand(u.transcript)))
            else:
                ref = tuple(u.transcript)
            hyp = tuple(inv.names(decoder.greedy_ctc_decode(post, inv)))
            results.append(UtteranceResult(u.id, ref, hyp))
        elif cfg.mode == "beam":
            if graph is None:
                raise ConfigError("beam decoding needs a decode graph")
            try:
                best, _ = decoder.beam_search(graph, post, cfg.params)
                results.append(UtteranceResult(u.id, tuple(u.transcript), best.words, best.score))
            except CtcamError as exc:
                results.append(UtteranceResult(u.id, tuple(u.transcript), (), 0.0, str(exc)))
        else:
            raise ConfigError(f"unknown decode mode {cfg.mode!r}")
    vocab = cfg.vocab
    if cfg.score_mode == "exclude_oov" and vocab is None:
        vocab = frozenset(inv.labels[i] for i in inv.non_blank_ids())
    report = score_wer([r.ref for r in results], [r.hyp for r in results], cfg.score_mode, vocab)
    return EvalResult(report, results)


def sweep_blank_scale(model: AcousticModel, data: Sequence[Utterance], graph: decoder.DecodeGraph,
                      scales: Sequence[float], params: decoder.DecodeParams = decoder.DecodeParams()
                      ) -> list[tuple[float, float]]:
    """(blank_scale, WER%) for each scale; posteriors are computed once per utterance."""
    cache = {u.id: model.posteriors(u.features()) for u in data}
    table = []
    for s in scales:
        cfg = DecodeConfig("beam", replace(params, blank_scale=float(s)))
        res = evaluate(model, data, cfg, graph, posteriors=lambda u: cache[u.id])
        table.append((float(s), res.report.wer))
    return table


def dump_posteriorgram(model: AcousticModel, utt: Utterance, out: TextIO | str | Path | None = None,
                       threshold: float = 0.05, fmt: str = "tsv") -> str:
    """Rows ``frame_index, label_name, posterior`` for posteriors above ``threshold``."""
    sep = {"tsv": "\t", "csv": ","}.get(fmt)
    if sep is None:
        raise ConfigError(f"unknown dump format {fmt!r}")
    post = model.posteriors(utt.features()).data
    buf = io.StringIO()
    buf.write(sep.join(("frame_index", "label_name", "posterior")) + "\n")
    for t, row in enumerate(post):
        for lab in np.flatnonzero(row > threshold):
            buf.write(f"{t}{sep}{model.inventory.labels[lab]}{sep}{row[lab]:.6g}\n")
    text = buf.getvalue()
    if isinstance(out, (str, Path)):
        Path(out).write_text(text, encoding="utf-8")
    elif out is not None:
        out.write(text)
    return text
