from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_corpus
from dataeff.analyzer import DISCRETE, DifficultyIndex, build_index
from dataeff.curriculum import (
    CurriculumLoader,
    CurriculumSchedule,
    DifficultyState,
    epoch_iterator,
    pace,
    resolve_percentile,
    round_to_multiple,
)


def test_pace_endpoints_and_midpoints():
    s = CurriculumSchedule("seqtru", 80, 2048, 110000)
    assert pace(0, s) == 80
    assert pace(110000, s) == 2048 and pace(10**7, s) == 2048
    assert pace(55000, s) == 1064
    pct = CurriculumSchedule("voc", 1, 100, 400, "sqrt")
    assert pace(100, pct) == pytest.approx(50.5, abs=1e-12)


def test_custom_exponent():
    s = CurriculumSchedule("voc", 10, 90, 100, 2.0)
    assert pace(50, s) == pytest.approx(10 + 80 * 0.25)


@given(
    st.sampled_from(["seqtru", "seqres", "voc", "seqreo"]),
    st.integers(8, 512),
    st.integers(0, 1000),
    st.integers(1, 500),
    st.sampled_from(["linear", "sqrt", 1.7]),
)
def test_pace_monotone_and_clamped(metric, a, b, T, pacing):
    if metric in ("seqtru", "seqres"):
        d_s, d_e = a, a + b
    else:
        d_s, d_e = min(a, 100) / 100 * 50 + 0.5, 100.0
    s = CurriculumSchedule(metric, d_s, d_e, T, pacing)
    vals = [pace(t, s) for t in range(0, 2 * T + 1)]
    assert all(x <= y for x, y in zip(vals, vals[1:]))
    assert all(d_s <= v <= d_e for v in vals)
    assert all(v == d_e for v in vals[T:])
    if s.value_based:
        assert all(v % 8 == 0 or v in (d_s, d_e) for v in vals)


def test_round_to_multiple():
    assert round_to_multiple(3) == 8
    assert round_to_multiple(12) == 16
    assert round_to_multiple(11.9) == 8
    assert round_to_multiple(1064) == 1064


def test_schedule_validation():
    with pytest.raises(ValueError):
        CurriculumSchedule("seqtru", 100, 50, 10)
    with pytest.raises(ValueError):
        CurriculumSchedule("voc", 0, 100, 10)
    with pytest.raises(ValueError):
        CurriculumSchedule("voc", 1, 101, 10)
    with pytest.raises(ValueError):
        CurriculumSchedule("seqtru", 8, 64, 0)
    with pytest.raises(ValueError, match="valid"):
        CurriculumSchedule("bogus")
    with pytest.raises(ValueError):
        CurriculumSchedule("seqtru_voc", 8, 64, 10)


def index_of(values) -> DifficultyIndex:
    return DifficultyIndex.from_values(np.asarray(values, dtype=np.float64), "voc", DISCRETE)


def test_resolve_percentile_atomic_buckets():
    idx = index_of([1] * 5 + [2] * 5)
    key, ids = resolve_percentile(idx, 50)
    assert key == 1 and sorted(ids) == [0, 1, 2, 3, 4]
    key, ids = resolve_percentile(idx, 100)
    assert len(ids) == 10
    key, ids = resolve_percentile(index_of([7] * 9 + [8]), 1)
    assert key == 7 and len(ids) == 9
    with pytest.raises(ValueError):
        resolve_percentile(index_of([]), 50)


@given(st.lists(st.integers(0, 6), min_size=1, max_size=60), st.floats(0.01, 100), st.floats(0.01, 100))
def test_resolve_percentile_brute_force(values, p, q):
    idx = index_of(values)
    n = len(values)
    need = math.ceil(round(p * n / 100, 9))
    key = min(v for v in set(values) if sum(x <= v for x in values) >= need)
    k, ids = resolve_percentile(idx, p)
    assert k == key
    assert sorted(ids.tolist()) == [i for i, v in enumerate(values) if v <= key]
    lo, hi = sorted((p, q))
    assert len(resolve_percentile(idx, lo)[1]) <= len(resolve_percentile(idx, hi)[1])


def test_seqtru_batches(text_corpus):
    loader = CurriculumLoader(text_corpus, CurriculumSchedule("seqtru", 8, 32, 10), 6, seed=0)
    for t in range(15):
        b = loader.next_batch()
        d = pace(t, loader.sched)
        assert b.tokens.shape == (6, d)
        assert b.token_count == 6 * d == int(b.lengths.sum())
        assert np.array_equal(b.tokens, np.asarray(text_corpus.tokens)[b.sample_ids, :d])


def test_seqtru_full_length_is_plain_sampling(text_corpus):
    full = CurriculumLoader(text_corpus, CurriculumSchedule("seqtru", 32, 32, 5), 4, seed=3)
    plain = CurriculumLoader(text_corpus, CurriculumSchedule(), 4, seed=3)
    for _ in range(5):
        a, b = full.next_batch(), plain.next_batch()
        assert np.array_equal(a.tokens, b.tokens)


def test_seqtru_token_count_at_scale():
    c = random_corpus(600, 128, 50, seed=0)
    loader = CurriculumLoader(c, CurriculumSchedule("seqtru", 80, 128, 1000), 512, seed=0)
    assert loader.next_batch().token_count == 40960


def test_seqres_reshapes_into_segments():
    c = random_corpus(10, 2048, 50, seed=1)
    loader = CurriculumLoader(c, CurriculumSchedule("seqres", 1024, 2048, 10**6), 4, seed=0)
    b = loader.next_batch()
    assert b.tokens.shape == (4, 1024)
    assert b.token_count == 4 * 1024
    # each drawn sample yields two consecutive rows
    assert b.sample_ids[0] == b.sample_ids[1] and b.sample_ids[2] == b.sample_ids[3]
    sid = b.sample_ids[0]
    assert np.array_equal(np.concatenate([b.tokens[0], b.tokens[1]]), np.asarray(c.tokens[sid]))


@given(st.sampled_from([8, 16, 24]), st.integers(1, 7), st.integers(0, 1000))
def test_seqres_epoch_conservation(d, B, seed):
    c = random_corpus(13, 32, 9, seed=seed)
    loader = CurriculumLoader(c, CurriculumSchedule("seqres", d, d, 1), B, seed=seed)
    seen: set[tuple[int, bytes]] = set()
    emitted = 0
    per_sample = 32 // d
    total_segments = len(c) * per_sample
    while emitted + B <= total_segments - B:
        b = loader.next_batch()
        assert loader.state.epoch == 0
        for sid, row in zip(b.sample_ids, b.tokens):
            key = (int(sid), row.tobytes())
            assert key not in seen
            seen.add(key)
        emitted += B
        pending = sum((32 - off) // d for _, off in loader.state.spillover)
        assert emitted * d + pending * d <= len(c) * 32


def test_seqres_rejects_padded_corpus():
    c = random_corpus(10, 16, 9, padded=True)
    with pytest.raises(ValueError, match="padded"):
        CurriculumLoader(c, CurriculumSchedule("seqres", 8, 16, 5), 2)


def test_index_metric_samples_from_eligible_prefix():
    c = random_corpus(200, 16, 30, seed=4, padded=True)
    idx = build_index(c, "seqreo")
    loader = CurriculumLoader(c, CurriculumSchedule("seqreo", 20, 100, 50), 8, seed=1, index=idx)
    for t in range(60):
        b = loader.next_batch()
        _, eligible = resolve_percentile(idx, pace(t, loader.sched))
        assert set(b.sample_ids.tolist()) <= set(eligible.tolist())
        assert b.token_count == int(np.asarray(c.lengths)[b.sample_ids].sum())
        assert b.tokens.shape == (8, 16)


def test_voc_full_percentile_is_uniform():
    n = 50
    c = random_corpus(n, 8, 20, seed=6)
    idx = build_index(c, "voc")
    loader = CurriculumLoader(c, CurriculumSchedule("voc", 100, 100, 1), 50, seed=2, index=idx)
    counts = np.zeros(n)
    for _ in range(2000):
        counts += np.bincount(loader.next_batch().sample_ids, minlength=n)
    expected = counts.sum() / n
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    # 99.9th percentile of chi-square with 49 degrees of freedom is about 85.4
    assert chi2 < 85.4


def test_combined_metric_filters_then_truncates():
    c = random_corpus(100, 32, 20, seed=7)
    idx = build_index(c, "voc")
    sched = CurriculumSchedule("seqtru_voc", 8, 32, 20, voc=CurriculumSchedule("voc", 10, 100, 20))
    loader = CurriculumLoader(c, sched, 4, seed=0, index=idx)
    b = loader.next_batch()
    _, eligible = resolve_percentile(idx, 10)
    assert b.tokens.shape == (4, 8)
    assert set(b.sample_ids.tolist()) <= set(eligible.tolist())


def test_eligible_smaller_than_batch_is_an_error():
    c = random_corpus(20, 8, 20, seed=7)
    idx = build_index(c, "voc")
    loader = CurriculumLoader(c, CurriculumSchedule("voc", 5, 100, 20), 8, index=idx)
    with pytest.raises(ValueError, match="too small"):
        loader.next_batch()


def test_missing_or_wrong_index():
    c = random_corpus(20, 8, 20)
    with pytest.raises(ValueError, match="needs"):
        CurriculumLoader(c, CurriculumSchedule("voc", 50, 100, 5), 2)
    with pytest.raises(ValueError, match="expected"):
        CurriculumLoader(c, CurriculumSchedule("voc", 50, 100, 5), 2, index=build_index(c, "seqreo"))


def test_small_threshold_rejected(text_corpus):
    loader = CurriculumLoader(text_corpus, CurriculumSchedule("seqtru", 8, 32, 5), 2)
    with pytest.raises(ValueError):
        loader.assemble(DifficultyState(0, 1, None))


def test_streams_deterministic_and_seed_dependent(text_corpus):
    def first(seed, k=10):
        it = epoch_iterator(text_corpus, CurriculumSchedule(), seed, 4)
        return [next(it).sample_ids.tolist() for _ in range(k)]

    assert first(0) == first(0)
    assert first(0) != first(1)


def test_none_metric_is_a_permutation_per_epoch(text_corpus):
    n = len(text_corpus)
    loader = CurriculumLoader(text_corpus, CurriculumSchedule(), 1, seed=0)
    ids = [int(loader.next_batch().sample_ids[0]) for _ in range(n)]
    assert sorted(ids) == list(range(n))


def test_loader_state_roundtrip(text_corpus):
    sched = CurriculumSchedule("seqtru", 8, 32, 10)
    a = CurriculumLoader(text_corpus, sched, 5, seed=9)
    for _ in range(7):
        a.next_batch()
    b = CurriculumLoader(text_corpus, sched, 5, seed=9)
    b.load_state_dict(a.state_dict())
    for _ in range(30):
        assert np.array_equal(a.next_batch().tokens, b.next_batch().tokens)
