from __future__ import annotations

import time
from dataclasses import dataclass

import pytest

from ctcam import harness


@dataclass
class ToyRun:
    train: harness.ToyCorpus
    heldout: harness.ToyCorpus
    result: harness.TrainResult
    seconds: float
    checkpoint: str


@pytest.fixture(scope="session")
def toy_ctc(tmp_path_factory) -> ToyRun:
    """Toy CTC model (1x32 uni LSTM, stack 3 / skip 3) trained on 200 utterances."""
    train = harness.make_toy_corpus(200, seed=1)
    heldout = harness.make_toy_corpus(50, seed=2, templates=train.templates)
    ckpt = str(tmp_path_factory.mktemp("toy") / "ctc.ckpt")
    cfg = harness.TrainConfig("ctc", arch="toy", steps=3000, learning_rate=0.01, seed=0,
                              checkpoint_path=ckpt)
    t0 = time.perf_counter()
    result = harness.train(cfg, train.utterances, train.ctc_inventory())
    return ToyRun(train, heldout, result, time.perf_counter() - t0, ckpt)


def pytest_terminal_summary(terminalreporter):
    from verdicts import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES):
            terminalreporter.write_line(line)
