import os

import numpy as np
import pytest
import torch

from reidgan.data import ToyCorpusConfig, synth_toy_corpus

torch.set_num_threads(1)

_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str = "") -> None:
    _ACCEPTANCE[number] = (title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[n]
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))


@pytest.fixture(scope="session")
def toy_small():
    return synth_toy_corpus(ToyCorpusConfig(n_identities=3, n_sessions=3, samples_per_session=20), seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _quiet_plots(monkeypatch):
    monkeypatch.setenv("MPLBACKEND", "Agg")
    yield
