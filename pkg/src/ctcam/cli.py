"""Command-line entry point: ``ctcam <subcommand> [options]``.

Every subcommand accepts ``--config FILE`` (flat ``key=value`` lines whose
keys are option names) and ``--seed``; explicit flags override the file.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import cdphone, decoder, harness, nnet
from .errors import ConfigError, CtcamError, DataError
from .frontend import STACK_PRESETS, StackConfig, compute_logmel, read_wav, write_features
from .graphs import LabelInventory, Lexicon, build_ctc_graph, viterbi_align

log = logging.getLogger("ctcam")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{message} (see '{self.prog} --help')")


def read_config(path: str | Path) -> dict[str, str]:
    """Flat ``key=value`` file; blank lines and ``#`` comments are ignored."""
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{n}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _stack_config(args) -> StackConfig:
    if args.stack_preset:
        if args.stack_preset not in STACK_PRESETS:
            raise ConfigError(f"unknown stack preset {args.stack_preset!r}")
        return STACK_PRESETS[args.stack_preset]
    return StackConfig(args.stack, args.skip)


def _load_data(args) -> list[harness.Utterance]:
    utts = harness.read_manifest(args.manifest)
    if not utts:
        raise DataError(f"{args.manifest}: no utterances")
    return utts


def _decode_graph(args, model: harness.AcousticModel) -> decoder.DecodeGraph:
    inv = model.inventory
    min_dur = cdphone.DurationStats.read(args.durations) if args.durations else None
    if not args.lexicon:
        return harness.label_loop_graph(inv, min_dur=min_dur)
    lex = Lexicon.read(args.lexicon, _phone_inventory(args, inv))
    lm = decoder.LanguageModel.read_arpa(args.lm) if args.lm else decoder.LanguageModel.uniform(lex.words)
    tree = cdphone.read_tree(args.tree) if args.tree else None
    return decoder.build_decode_graph(lex, lm, tree, allow_blank=inv.is_ctc,
                                      blank_id=inv.blank_id, min_dur=min_dur)


def _phone_inventory(args, inv: LabelInventory) -> LabelInventory:
    return LabelInventory.read(args.phones) if getattr(args, "phones", None) else inv


def _decode_params(args, model) -> decoder.DecodeParams:
    am_weight = args.am_weight
    if am_weight is None:
        am_weight = decoder.AM_WEIGHT_PRESETS.get(model.inventory.kind, 1.0)
    return decoder.DecodeParams(beam=args.beam, max_active=args.max_active, am_weight=am_weight,
                                blank_scale=args.blank_scale,
                                tokens_per_state=args.tokens_per_state, lattice_k=args.lattice_k)


def _write_lines(path: str | None, lines: list[str]) -> None:
    text = "\n".join(lines) + ("\n" if lines else "")
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# --------------------------------------------------------------------------- commands

def cmd_featurize(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    utts = _load_data(args)
    for u in utts:
        feat = compute_logmel(read_wav(u.path), args.n_mels, args.window_ms, args.shift_ms)
        dest = out_dir / f"{u.id}.feat"
        write_features(dest, feat)
        u.path = str(dest.resolve())
    harness.write_manifest(out_dir / "manifest.tsv", utts)
    log.info("wrote %d feature files to %s", len(utts), out_dir)
    return 0


def cmd_make_toy(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = harness.make_toy_corpus(args.num_utts, num_labels=args.num_labels, seed=args.seed)
    frame_inv = corpus.frame_inventory()
    alignments = {}
    for u in corpus.utterances:
        dest = out_dir / f"{u.id}.feat"
        write_features(dest, u.feats)
        u.path = dest.name
        alignments[u.id] = u.frame_labels
    harness.write_manifest(out_dir / "manifest.tsv", corpus.utterances)
    corpus.ctc_inventory().write(out_dir / "labels.txt")
    frame_inv.write(out_dir / "frame_labels.txt")
    harness.write_alignments(out_dir / "alignments.txt", alignments, frame_inv)
    return 0


def cmd_train(args) -> int:
    data = _load_data(args)
    lexicon = None
    if args.model_in:
        model_in = harness.AcousticModel.load(args.model_in)
        inv = model_in.inventory
    else:
        model_in = None
        if args.labels:
            inv = LabelInventory.read(args.labels)
        elif args.vocab_min_exemplars:
            threshold = args.vocab_min_exemplars
            threshold = int(threshold) if threshold.isdigit() else threshold
            inv = harness.build_word_inventory([u.transcript for u in data], threshold)
        else:
            raise ConfigError("train needs --labels, --vocab-min-exemplars or --model-in")
    if args.lexicon:
        lexicon = Lexicon.read(args.lexicon, _phone_inventory(args, inv))
    if inv.kind == "word" and args.criterion in ("ctc", "smbr"):
        keep = [u for u in data if all(w in inv for w in u.transcript)]
        if len(keep) < len(data):
            log.info("skipping %d utterances with out-of-vocabulary words", len(data) - len(keep))
        data = keep
    if args.alignments:
        frames = harness.read_alignments(args.alignments, inv)
        for u in data:
            if u.id not in frames:
                raise DataError(f"no alignment for {u.id}")
            u.frame_labels = frames[u.id]
    cfg = harness.TrainConfig(
        criterion=args.criterion, arch=args.arch, stack=_stack_config(args),
        learning_rate=args.learning_rate, momentum=args.momentum, batch_size=args.batch_size,
        steps=args.steps, seed=args.seed, delay=args.delay,
        halve_on_plateau=not args.constant_lr, optional_silence=args.optional_silence,
        kappa=args.kappa,
        smbr_blank_scale=args.smbr_blank_scale, lattice_k=args.lattice_k,
        lattice_beam=args.lattice_beam,
        tokens_per_state=args.tokens_per_state, checkpoint_path=args.model_out,
        checkpoint_every=args.checkpoint_every)
    graph = None
    if args.criterion == "smbr" and model_in is not None:
        graph = _decode_graph(args, model_in)
    metrics = open(args.metrics, "w", encoding="utf-8") if args.metrics else None
    try:
        def on_step(entry: harness.StepLog):
            if metrics is not None:
                metrics.write(entry.line() + "\n")
        result = harness.train(cfg, data, inv, model_in=model_in, lexicon=lexicon,
                               decode_graph=graph, on_step=on_step)
    finally:
        if metrics is not None:
            metrics.close()
    last = result.log[-1].loss if result.log else float("nan")
    log.info("trained %d steps (%d epochs), final loss %.4f", len(result.log), result.epochs, last)
    return 0


def cmd_align(args) -> int:
    model = harness.AcousticModel.load(args.model)
    inv = model.inventory
    lexicon = Lexicon.read(args.lexicon, _phone_inventory(args, inv)) if args.lexicon else None
    out = {}
    for u in _load_data(args):
        post = model.posteriors(u.features())
        ids = harness.target_ids(u, inv, lexicon)
        if inv.is_ctc:
            g = build_ctc_graph(ids, inv)
        else:
            g = harness.forced_graph(ids, inv.id(args.optional_silence) if args.optional_silence else None)
        out[u.id] = viterbi_align(g, post).labels
    harness.write_alignments(args.out, out, inv)
    return 0


def cmd_cluster_phones(args) -> int:
    phones = LabelInventory.read(args.phones)
    frames = harness.read_alignments(args.alignments, phones)
    samples = []
    for u in _load_data(args):
        if u.id not in frames:
            raise DataError(f"no alignment for {u.id}")
        samples += cdphone.collect_samples(frames[u.id], u.features())
    names = list(phones.labels)
    questions = cdphone.default_questions(names)
    max_leaves = args.max_leaves if args.max_leaves > 0 else math.inf
    tree = cdphone.grow_trees(samples, questions, min_leaf_count=args.min_leaf_count,
                              min_gain=args.min_gain, max_leaves=max_leaves, phone_names=names)
    cdphone.write_tree(args.out_tree, tree)
    if args.out_durations:
        stats = cdphone.duration_minima(cdphone.durations_by_leaf(samples, tree), args.percentile)
        stats.write(args.out_durations)
    log.info("%d samples clustered into %d CD phones", len(samples), tree.num_leaves)
    return 0


def cmd_decode(args) -> int:
    model = harness.AcousticModel.load(args.model)
    graph = _decode_graph(args, model)
    cfg = harness.DecodeConfig("beam", _decode_params(args, model))
    result = harness.evaluate(model, _load_data(args), cfg, graph)
    for r in result.utterances:
        if r.error:
            log.warning("%s: %s", r.id, r.error)
    _write_lines(args.out, [r.line() for r in result.utterances])
    return 0


def cmd_greedy_decode(args) -> int:
    model = harness.AcousticModel.load(args.model)
    if not model.inventory.is_ctc:
        raise ConfigError("greedy decoding needs a CTC model")
    lines = []
    for u in _load_data(args):
        post = model.posteriors(u.features())
        labels = decoder.greedy_ctc_decode(post, model.inventory)
        score = float(np.sum(np.log(np.max(post.data, axis=1))))
        lines.append(f"{u.id}\t{' '.join(model.inventory.names(labels))}\t{score:.6f}")
    _write_lines(args.out, lines)
    return 0


def _read_transcripts(path: str) -> dict[str, tuple[str, ...]]:
    """Words per utterance from a manifest, a decoder output or ``id<TAB>words`` lines."""
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) == 3 and not _is_number(parts[2]):
            text = parts[2]  # manifest
        else:
            text = parts[1] if len(parts) > 1 else ""
        out[parts[0]] = tuple(text.split())
    return out


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def cmd_score(args) -> int:
    refs = _read_transcripts(args.ref)
    hyps = _read_transcripts(args.hyp)
    ids = list(refs)
    vocab = None
    if args.vocab:
        inv = LabelInventory.read(args.vocab)
        vocab = {inv.labels[i] for i in inv.non_blank_ids()}
    report = harness.score_wer([refs[i] for i in ids], [hyps.get(i, ()) for i in ids],
                               args.mode, vocab)
    _write_lines(args.out, report.summary_lines())
    if args.aligned:
        Path(args.aligned).write_text(report.aligned_text(ids) + "\n", encoding="utf-8")
    return 0


def cmd_dump_posteriors(args) -> int:
    model = harness.AcousticModel.load(args.model)
    utts = _load_data(args)
    if args.utt:
        utts = [u for u in utts if u.id == args.utt]
        if not utts:
            raise DataError(f"utterance {args.utt!r} not in manifest")
    text = harness.dump_posteriorgram(model, utts[0], None, args.threshold, args.format)
    _write_lines(args.out, text.splitlines())
    return 0


def cmd_sweep_blank_scale(args) -> int:
    model = harness.AcousticModel.load(args.model)
    graph = _decode_graph(args, model)
    table = harness.sweep_blank_scale(model, _load_data(args), graph, _floats(args.scales),
                                      _decode_params(args, model))
    _write_lines(args.out, [f"{s:g}\t{wer:.4f}" for s, wer in table])
    return 0


# --------------------------------------------------------------------------- parser

def _add_decode_options(p):
    p.add_argument("--lexicon")
    p.add_argument("--phones", help="phone inventory used by the lexicon (defaults to the model's)")
    p.add_argument("--lm", help="ARPA unigram/bigram LM; uniform over lexicon words if omitted")
    p.add_argument("--tree", help="CD-phone tree file")
    p.add_argument("--durations", help="minimum-duration file")
    p.add_argument("--beam", type=float, default=math.inf)
    p.add_argument("--max-active", type=float, default=math.inf)
    p.add_argument("--am-weight", type=float, default=None)
    p.add_argument("--blank-scale", type=float, default=1.0)
    p.add_argument("--tokens-per-state", type=int, default=1)
    p.add_argument("--lattice-k", type=int, default=50)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctcam", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_text, manifest=True):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", help="flat key=value file of option defaults")
        p.add_argument("--seed", type=int, default=0)
        if manifest:
            p.add_argument("--manifest", required=True, help="id<TAB>path<TAB>transcript lines")
        return p

    p = command("featurize", cmd_featurize, "compute log-mel feature files from WAV audio")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-mels", type=int, default=80)
    p.add_argument("--window-ms", type=float, default=25.0)
    p.add_argument("--shift-ms", type=float, default=10.0)

    p = command("make-toy-corpus", cmd_make_toy, "write a synthetic corpus", manifest=False)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--num-utts", type=int, default=200)
    p.add_argument("--num-labels", type=int, default=6)

    p = command("align", cmd_align, "force-align transcripts with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--lexicon")
    p.add_argument("--phones")
    p.add_argument("--out", required=True)
    p.add_argument("--optional-silence", help="blank-free models: label that may pad both ends")

    p = command("cluster-phones", cmd_cluster_phones, "grow CD-phone trees from alignments")
    p.add_argument("--phones", required=True, help="phone inventory file")
    p.add_argument("--alignments", required=True)
    p.add_argument("--min-leaf-count", type=int, default=1)
    p.add_argument("--min-gain", type=float, default=0.0)
    p.add_argument("--max-leaves", type=int, default=0, help="0 means unlimited")
    p.add_argument("--percentile", type=float, default=0.10)
    p.add_argument("--out-tree", required=True)
    p.add_argument("--out-durations")

    p = command("train", cmd_train, "train an acoustic model")
    p.add_argument("--criterion", choices=harness.CRITERIA, default="ctc")
    p.add_argument("--arch", default="toy", choices=sorted(nnet.ARCH_PRESETS))
    p.add_argument("--stack-preset")
    p.add_argument("--stack", type=int, default=3)
    p.add_argument("--skip", type=int, default=3)
    p.add_argument("--labels", help="label inventory file")
    p.add_argument("--vocab-min-exemplars", help="build a word inventory: count or preset name")
    p.add_argument("--lexicon")
    p.add_argument("--phones")
    p.add_argument("--lm")
    p.add_argument("--tree")
    p.add_argument("--durations")
    p.add_argument("--alignments", help="frame alignments for CE training")
    p.add_argument("--model-in")
    p.add_argument("--model-out", required=True)
    p.add_argument("--metrics", help="write 'step loss grad_norm time_ms' lines here")
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--delay", type=int, default=0)
    p.add_argument("--constant-lr", action="store_true", help="disable halving on plateau")
    p.add_argument("--optional-silence", help="realign: label that may pad both ends")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--kappa", type=float, default=1.0)
    p.add_argument("--smbr-blank-scale", type=float, default=1.0)
    p.add_argument("--lattice-k", type=int, default=8)
    p.add_argument("--lattice-beam", type=float, default=math.inf)
    p.add_argument("--tokens-per-state", type=int, default=4)

    p = command("decode", cmd_decode, "beam-search decode to 'utt_id<TAB>words<TAB>score' lines")
    p.add_argument("--model", required=True)
    p.add_argument("--out")
    _add_decode_options(p)

    p = command("greedy-decode", cmd_greedy_decode, "per-frame argmax decoding without an LM")
    p.add_argument("--model", required=True)
    p.add_argument("--out")

    p = command("score", cmd_score, "word error rate of hypotheses against references",
                manifest=False)
    p.add_argument("--ref", required=True, help="manifest or 'id<TAB>words' file")
    p.add_argument("--hyp", required=True, help="decoder output")
    p.add_argument("--mode", choices=("all", "exclude_oov"), default="all")
    p.add_argument("--vocab", help="label inventory defining the vocabulary")
    p.add_argument("--out")
    p.add_argument("--aligned", help="write the aligned reference/hypothesis text here")

    p = command("dump-posteriors", cmd_dump_posteriors, "tabular posteriorgram above a threshold")
    p.add_argument("--model", required=True)
    p.add_argument("--utt", help="utterance id (default: first in manifest)")
    p.add_argument("--threshold", type=float, default=0.05)
    p.add_argument("--format", choices=("tsv", "csv"), default="tsv")
    p.add_argument("--out")

    p = command("sweep-blank-scale", cmd_sweep_blank_scale, "WER for a grid of blank scales")
    p.add_argument("--model", required=True)
    p.add_argument("--scales", default="0.5,1,2,4,8")
    p.add_argument("--out")
    _add_decode_options(p)
    return parser


def _config_path(argv: list[str]) -> str | None:
    for i, arg in enumerate(argv):
        if arg == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if arg.startswith("--config="):
            return arg.split("=", 1)[1]
    return None


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    """Parse ``argv``; values from ``--config`` become defaults that flags override."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    config = _config_path(argv)
    command = next((a for a in argv if not a.startswith("-")), None)
    subparsers = parser._subparsers._group_actions[0].choices
    if config and command in subparsers:
        sub = subparsers[command]
        actions = {a.dest: a for a in sub._actions if a.dest not in ("config", "help")}
        for key, raw in read_config(config).items():
            action = actions.get(key)
            if action is None:
                raise ConfigError(f"{config}: unknown option {key!r} for {command}")
            if action.nargs == 0:  # store_true flag
                value = raw.lower() in ("1", "true", "yes")
            else:
                try:
                    value = action.type(raw) if action.type else raw
                except ValueError:
                    raise ConfigError(f"{config}: invalid value {raw!r} for {key}") from None
            if action.choices is not None and value not in action.choices:
                raise ConfigError(f"{config}: invalid value {raw!r} for {key}")
            action.default = value
            action.required = False
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except CtcamError as exc:
        print(f"ctcam: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, KeyError, UnicodeDecodeError) as exc:
        print(f"ctcam: data error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
