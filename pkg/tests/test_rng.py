from __future__ import annotations

import numpy as np
import pytest

from dataeff import rng


def test_same_key_same_draws():
    a = rng.stream(3, rng.LTD, 10, 2).integers(0, 1 << 30, size=16)
    b = rng.stream(3, rng.LTD, 10, 2).integers(0, 1 << 30, size=16)
    assert np.array_equal(a, b)


def test_counters_purposes_and_seeds_separate_streams():
    draws = {
        key: tuple(rng.stream(*key).integers(0, 1 << 30, size=4))
        for key in [(0, rng.LTD, 0, 0), (0, rng.LTD, 0, 1), (0, rng.LTD, 1, 0), (0, rng.DATA, 0, 0), (1, rng.LTD, 0, 0)]
    }
    assert len(set(draws.values())) == len(draws)


def test_bad_counters():
    with pytest.raises(ValueError):
        rng.stream(0, rng.DATA, 1, 2, 3, 4)
    with pytest.raises(ValueError):
        rng.stream(0, rng.DATA, -1)
