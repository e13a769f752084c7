from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).resolve().parent))

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

from dataeff.corpus_io import PADDED, PackedCorpus, tokenize_corpus  # noqa: E402


def random_corpus(n: int, pack_length: int, vocab: int, seed: int = 0, padded: bool = False) -> PackedCorpus:
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, vocab - 1, size=(n, pack_length)).astype(np.uint32)
    if not padded:
        return PackedCorpus(tokens, np.full(n, pack_length, dtype=np.uint32), vocab, "dense")
    lengths = rng.integers(1, pack_length + 1, size=n).astype(np.uint32)
    tokens[np.arange(pack_length)[None, :] >= lengths[:, None]] = vocab - 1
    return PackedCorpus(tokens, lengths, vocab, PADDED)


@pytest.fixture
def text_corpus() -> PackedCorpus:
    text = b"".join(f"line {i}: the cat sat on mat number {i * 7 % 13}.\n".encode() for i in range(400))
    return tokenize_corpus(text, pack_length=32)


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
