from __future__ import annotations

import math

import numpy as np
import pytest

from ctcam import harness, nnet
from ctcam.decoder import DecodeParams
from ctcam.errors import ConfigError, DataError, NumericalError
from ctcam.frontend import FeatureMatrix, StackConfig
from ctcam.graphs import LabelInventory
from ctcam.harness import AcousticModel, DecodeConfig, TrainConfig, Utterance


def _spiky(ids, blank, n_labels, width=2):
    """One-hot posteriorgram: blank, then each label for ``width`` frames followed by blank."""
    frames = [blank]
    for i in ids:
        frames += [i] * width + [blank]
    return np.eye(n_labels)[frames]


def _small_corpus(n=6, seed=0):
    return harness.make_toy_corpus(n, num_labels=3, dim=6, seed=seed, max_labels=3,
                                   min_dur=3, max_dur=5)


def _params_equal(a, b):
    return all(a.tensors[k].tobytes() == b.tensors[k].tobytes() for k in a.tensors)


def test_word_inventory():
    texts = [["yes", "no"], ["yes"], ["no", "yes", "maybe"]]
    inv = harness.build_word_inventory(texts, 2)
    assert inv.labels[:2] == ("yes", "no") and inv.is_ctc and inv.kind == "word"
    assert len(harness.build_word_inventory(texts, 1)) == 4
    assert harness.WORD_VOCAB_PRESETS == {"7k-style": 150, "25k-style": 20}
    many = [["w"]] * 20 + [["v"]] * 19
    assert harness.build_word_inventory(many, "25k-style").labels[:-1] == ("w",)
    with pytest.raises(ConfigError):
        harness.build_word_inventory(texts, "huge")
    with pytest.raises(DataError):
        harness.build_word_inventory(texts, 10)


def test_toy_corpus_structure():
    corpus = harness.make_toy_corpus(20, seed=3)
    inv = corpus.frame_inventory()
    for u in corpus.utterances:
        fl = u.frame_labels
        assert fl[0] == fl[-1] == inv.id("sil")
        runs = [int(x) for k, x in enumerate(fl) if k == 0 or fl[k - 1] != x]
        assert [inv.labels[x] for x in runs if x != inv.id("sil")] == list(u.transcript)
        assert u.feats.data.shape == (len(fl), 40)
    again = harness.make_toy_corpus(20, seed=3)
    assert all(np.array_equal(a.feats.data, b.feats.data)
               for a, b in zip(corpus.utterances, again.utterances))


def test_frame_targets_by_hand():
    fl = np.array([0, 0, 0, 1, 1, 1, 2, 2])
    assert list(harness.frame_targets(fl, StackConfig(3, 3), 3)) == [0, 1, 2]
    assert list(harness.frame_targets(fl, StackConfig(3, 3), 3, delay=1)) == [0, 0, 1]
    assert list(harness.frame_targets(fl, StackConfig(1, 1), 8)) == list(fl)


def test_zero_learning_rate_leaves_parameters_unchanged():
    corpus = _small_corpus()
    cfg = TrainConfig("ctc", steps=4, learning_rate=0.0, seed=5)
    res = harness.train(cfg, corpus.utterances, corpus.ctc_inventory())
    init = nnet.init_params("toy", 18, 4, seed=5, blank_id=3)
    assert _params_equal(res.model.params, init)
    assert len(res.log) == 4 and all(e.grad_norm > 0 for e in res.log)


def test_same_seed_gives_identical_checkpoints(tmp_path):
    corpus = _small_corpus()
    for name in ("a", "b"):
        cfg = TrainConfig("ctc", steps=8, seed=2, checkpoint_path=str(tmp_path / name))
        harness.train(cfg, corpus.utterances, corpus.ctc_inventory())
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    cfg = TrainConfig("ctc", steps=8, seed=3, checkpoint_path=str(tmp_path / "c"))
    harness.train(cfg, corpus.utterances, corpus.ctc_inventory())
    assert (tmp_path / "a").read_bytes() != (tmp_path / "c").read_bytes()


def test_every_epoch_visits_each_utterance_once():
    corpus = _small_corpus(5)
    res = harness.train(TrainConfig("ctc", steps=12, batch_size=2), corpus.utterances,
                        corpus.ctc_inventory())
    assert res.epochs == 4  # 3 batches per epoch
    for order in res.visit_order:
        assert sorted(order) == list(range(5))
    assert res.visit_order[0] != res.visit_order[1] or res.visit_order[1] != res.visit_order[2]


def test_model_round_trip_is_bit_identical(tmp_path):
    corpus = _small_corpus()
    res = harness.train(TrainConfig("ctc", steps=3), corpus.utterances, corpus.ctc_inventory())
    res.model.save(tmp_path / "m")
    back = AcousticModel.load(tmp_path / "m")
    assert _params_equal(back.params, res.model.params)
    assert back.inventory == res.model.inventory and back.stack == res.model.stack
    feats = corpus.utterances[0].features()
    assert back.posteriors(feats).data.tobytes() == res.model.posteriors(feats).data.tobytes()


def test_ce_and_realign_training_reduce_the_loss():
    corpus = _small_corpus(8)
    inv = corpus.frame_inventory()
    for crit in ("ce", "realign"):
        res = harness.train(TrainConfig(crit, steps=160, learning_rate=0.05), corpus.utterances, inv)
        losses = [e.loss for e in res.log]
        assert np.mean(losses[-16:]) < np.mean(losses[:16]), crit


def test_realign_with_optional_silence_padding():
    corpus = _small_corpus(6)
    inv = corpus.frame_inventory()
    cfg = TrainConfig("realign", steps=120, learning_rate=0.05, optional_silence="sil")
    res = harness.train(cfg, corpus.utterances, inv)
    losses = [e.loss for e in res.log]
    assert np.mean(losses[-12:]) < np.mean(losses[:12])
    g = harness.forced_graph([0, 1], inv.id("sil"))
    assert g.num_states == 4 and len(g.starts) == 2


def test_criterion_inventory_mismatch():
    corpus = _small_corpus()
    with pytest.raises(ConfigError):
        harness.train(TrainConfig("ctc", steps=1), corpus.utterances, corpus.frame_inventory())
    with pytest.raises(ConfigError):
        harness.train(TrainConfig("realign", steps=1), corpus.utterances, corpus.ctc_inventory())
    with pytest.raises(ConfigError):
        harness.train(TrainConfig("smbr", steps=1), corpus.utterances, corpus.ctc_inventory())
    with pytest.raises(ConfigError):
        TrainConfig("mmi")


def test_ctc_then_smbr_recipe_via_checkpoint(tmp_path):
    corpus = _small_corpus(4)
    harness.train(TrainConfig("ctc", steps=20, checkpoint_path=str(tmp_path / "ctc")),
                  corpus.utterances, corpus.ctc_inventory())
    start = AcousticModel.load(tmp_path / "ctc")
    res = harness.train(TrainConfig("smbr", steps=4, learning_rate=0.001,
                                    checkpoint_path=str(tmp_path / "smbr")),
                        corpus.utterances, model_in=start)
    final = AcousticModel.load(tmp_path / "smbr")
    assert final.inventory == start.inventory and final.stack == start.stack
    assert _params_equal(final.params, res.model.params)
    assert all(math.isfinite(e.loss) for e in res.log)


def test_non_finite_loss_raises_and_keeps_last_good_checkpoint(tmp_path, monkeypatch):
    corpus = _small_corpus(4)
    inv = corpus.ctc_inventory()
    harness.train(TrainConfig("ctc", steps=2, checkpoint_path=str(tmp_path / "two")),
                  corpus.utterances, inv)
    real = harness.criteria.ctc_loss_grad
    calls = []

    def poisoned(logits, labels, inventory):
        calls.append(1)
        loss, grad = real(logits, labels, inventory)
        return (math.nan if len(calls) == 3 else loss), grad

    monkeypatch.setattr(harness.criteria, "ctc_loss_grad", poisoned)
    ckpt = tmp_path / "last_good"
    with pytest.raises(NumericalError, match="step 3"):
        harness.train(TrainConfig("ctc", steps=10, checkpoint_path=str(ckpt)),
                      corpus.utterances, inv)
    assert ckpt.read_bytes() == (tmp_path / "two").read_bytes()


def test_loss_reaches_toy_floor(toy_ctc):
    losses = np.array([e.loss for e in toy_ctc.result.log])
    blocks = losses[: len(losses) // 100 * 100].reshape(-1, 100).mean(axis=1)
    first = int(np.argmax(blocks < 0.1))
    assert blocks[first] < 0.1
    # block means fall strictly all the way down to the first sub-0.1 block
    assert np.all(np.diff(blocks[: first + 1]) < 0)


def _word_model():
    inv = LabelInventory.from_names(["yes", "no", "stop"], kind="word", with_blank=True)
    return AcousticModel(nnet.init_params("toy", 3, 4, blank_id=3), inv, StackConfig(1, 1))


def test_word_ctc_exclude_oov_by_hand():
    model = _word_model()
    inv = model.inventory
    cases = [("yes no", "yes no"), ("stop", "no"), ("yes zz", "yes"),
             ("no no stop", "no stop"), ("qq", "")]
    utts = [Utterance(f"u{k}", None, tuple(ref.split())) for k, (ref, _) in enumerate(cases)]
    post = {f"u{k}": _spiky(inv.ids(hyp.split()), 3, 4) for k, (_, hyp) in enumerate(cases)}
    res = harness.evaluate(model, utts, DecodeConfig(score_mode="exclude_oov"),
                           posteriors=lambda u: post[u.id])
    r = res.report
    assert r.kept == [0, 1, 3]
    assert (r.substitutions, r.deletions, r.insertions, r.ref_words) == (1, 1, 0, 6)
    assert r.wer == pytest.approx(100 / 3)
    assert r.oov_rate == pytest.approx(100 * 2 / 9)
    assert r.oov_utterance_rate == pytest.approx(40.0)
    assert [u.hyp for u in res.utterances][3] == ("no", "stop")


def test_one_hot_posteriors_decode_perfectly_both_ways():
    model = _word_model()
    inv = model.inventory
    texts = ["yes", "no no", "stop yes no"]
    utts = [Utterance(f"u{k}", None, tuple(t.split())) for k, t in enumerate(texts)]
    post = {u.id: _spiky(inv.ids(u.transcript), 3, 4) for u in utts}
    greedy = harness.evaluate(model, utts, posteriors=lambda u: post[u.id])
    assert greedy.report.wer == 0.0
    graph = harness.label_loop_graph(inv)
    beam = harness.evaluate(model, utts, DecodeConfig("beam"), graph,
                            posteriors=lambda u: np.clip(post[u.id], 1e-6, None))
    assert beam.report.wer == 0.0
    assert all(u.error is None for u in beam.utterances)


def test_blank_scale_sweep_table():
    model = _word_model()
    inv = model.inventory
    utts = [Utterance("u0", None, ("yes", "no"), FeatureMatrix(np.zeros((7, 3))))]
    post = np.clip(_spiky(inv.ids(["yes", "no"]), 3, 4), 0.05, None)
    model.posteriors = lambda feats: post / post.sum(axis=1, keepdims=True)
    table = harness.sweep_blank_scale(model, utts, harness.label_loop_graph(inv),
                                      [0.5, 1.0, 1e-6], DecodeParams(beam=20.0))
    assert [s for s, _ in table] == [0.5, 1.0, 1e-6]
    assert table[1][1] == 0.0
    # a tiny blank scale boosts blank so much that a word gets deleted
    assert table[2][1] == 50.0


def _dump_rows(text, sep="\t"):
    lines = text.splitlines()
    return lines[0], [tuple(line.split(sep)) for line in lines[1:]]


def test_dump_uniform_model_lists_every_label():
    inv = LabelInventory.from_names([f"l{k}" for k in range(9)], with_blank=True)
    params = nnet.init_params("toy", 3, 10, blank_id=9)
    params = params.with_tensors({k: np.zeros_like(v) for k, v in params.tensors.items()})
    model = AcousticModel(params, inv, StackConfig(1, 1))
    utt = Utterance("u", None, (), FeatureMatrix(np.ones((4, 3))))
    header, rows = _dump_rows(harness.dump_posteriorgram(model, utt))
    assert header == "frame_index\tlabel_name\tposterior"
    assert len(rows) == 40
    assert {r[1] for r in rows} == set(inv.labels)
    assert harness.dump_posteriorgram(model, utt, threshold=1.0) == header + "\n"
    text = harness.dump_posteriorgram(model, utt, fmt="csv")
    assert text.splitlines()[0] == "frame_index,label_name,posterior"
    with pytest.raises(ConfigError):
        harness.dump_posteriorgram(model, utt, fmt="xml")


def test_dump_threshold_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    inv = LabelInventory.from_names(["a", "b", "c"], with_blank=True)
    params = nnet.init_params("toy", 3, 4, blank_id=3)
    params = params.with_tensors({k: rng.uniform(-2, 2, size=v.shape)
                                  for k, v in params.tensors.items()})
    model = AcousticModel(params, inv, StackConfig(1, 1))
    utt = Utterance("u", None, (), FeatureMatrix(rng.normal(size=(30, 3))))
    harness.dump_posteriorgram(model, utt, tmp_path / "d.tsv")
    _, rows = _dump_rows((tmp_path / "d.tsv").read_text())
    post = model.posteriors(utt.features()).data
    want = {(t, inv.labels[k]) for t, k in zip(*np.nonzero(post > 0.05))}
    assert {(int(t), lab) for t, lab, _ in rows} == want
    for t, lab, p in rows:
        assert float(p) == pytest.approx(post[int(t), inv.id(lab)], rel=1e-5)


def test_manifest_and_alignment_files(tmp_path):
    (tmp_path / "feats").mkdir()
    utts = [Utterance("a", "feats/a.feat", ("x", "y")), Utterance("b", "/abs/b.feat", ())]
    harness.write_manifest(tmp_path / "m.tsv", utts)
    back = harness.read_manifest(tmp_path / "m.tsv")
    assert back[0].path == str(tmp_path / "feats/a.feat") and back[0].transcript == ("x", "y")
    assert back[1].path == "/abs/b.feat" and back[1].transcript == ()
    (tmp_path / "bad.tsv").write_text("only\ttwo\n")
    with pytest.raises(DataError):
        harness.read_manifest(tmp_path / "bad.tsv")
    inv = LabelInventory.from_names(["a", "sil"])
    harness.write_alignments(tmp_path / "ali", {"u": [1, 0, 0, 1]}, inv)
    assert (tmp_path / "ali").read_text() == "u\tsil a a sil\n"
    assert list(harness.read_alignments(tmp_path / "ali", inv)["u"]) == [1, 0, 0, 1]
