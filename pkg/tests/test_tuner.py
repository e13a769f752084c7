from __future__ import annotations

import math
from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dataeff import tuner
from dataeff.curriculum import CurriculumSchedule
from dataeff.ltd_routing import LtdSchedule
from dataeff.model import ModelConfig
from dataeff.trainer import LrSchedule, RunConfig, TrainingDiverged, TrainResult
from dataeff.tuner import (
    PRESETS,
    NoFeasibleValue,
    TuneSpec,
    apply_candidate,
    binary_search,
    bisect,
    preset_spec,
    probe,
    write_history,
)

CFG = ModelConfig(n_layers=4, d_model=16, n_heads=2, vocab_size=257, max_seq_len=32, dtype="float32")


def base_run(**kw) -> RunConfig:
    budget = 8 * 32 * 400
    run = RunConfig(
        model=CFG, token_budget=budget, batch_size=8,
        ltd=LtdSchedule(16, 32, 200, mode="random_ltd"),
        lr=LrSchedule(3e-3, 1e-6, 0.02 * budget, budget),
    )
    return replace(run, **kw)


def test_synthetic_boundary_96():
    spec = TuneSpec("ltd_r_start", 8, 512)
    res = binary_search(spec, oracle=lambda v: v >= 96)
    assert res.value == 96
    assert res.n_probes <= 7 == spec.max_probes()


def test_all_pass_and_all_fail():
    assert binary_search(TuneSpec("cl_d_start", 8, 512), oracle=lambda v: True).value == 8
    assert binary_search(TuneSpec("ltd_total_steps", 0, 1.0), oracle=lambda v: True).value == 1.0
    with pytest.raises(NoFeasibleValue):
        binary_search(TuneSpec("cl_d_start", 8, 512), oracle=lambda v: False)
    with pytest.raises(NoFeasibleValue):
        binary_search(TuneSpec("cl_total_steps", 0.1, 1.0), oracle=lambda v: False)


def test_step_targets_maximize():
    res = binary_search(TuneSpec("cl_total_steps", 0.0, 1.0), oracle=lambda v: v <= 0.6 + 1e-9)
    assert res.value == pytest.approx(0.6)


@given(st.integers(1, 64), st.integers(2, 64), st.integers(0, 70))
def test_monotone_oracles_exact_within_bound(lo_k, span, cut_k):
    lo, hi = 8 * lo_k, 8 * (lo_k + span)
    cut = 8 * cut_k
    spec = TuneSpec("ltd_r_start", lo, hi)
    bound = math.ceil(math.log2((hi - lo) / 8)) + 1
    passes = lambda v: v >= cut  # noqa: E731
    feasible = [v for v in spec.candidates() if passes(v)]
    if not feasible:
        with pytest.raises(NoFeasibleValue):
            binary_search(spec, oracle=passes)
        return
    res = binary_search(spec, oracle=passes)
    assert res.value == min(feasible)
    assert res.n_probes <= bound


@given(st.lists(st.booleans(), min_size=2, max_size=80))
def test_non_monotone_result_still_passes(pattern):
    spec = TuneSpec("cl_d_start", 8, 8 * len(pattern))
    table = dict(zip(spec.candidates(), pattern))
    try:
        res = binary_search(spec, oracle=lambda v: table[v])
    except NoFeasibleValue:
        assert not pattern[-1]
        return
    assert table[res.value]


def test_bisect_probe_count():
    calls = []
    value, n = bisect(list(range(64)), lambda v: calls.append(v) or v >= 12)
    assert value == 12 and n == len(calls) <= 7


def test_spec_validation():
    with pytest.raises(ValueError):
        TuneSpec("cl_d_start", 64, 8)
    with pytest.raises(ValueError):
        TuneSpec("cl_d_start", 8, 60)
    with pytest.raises(ValueError):
        TuneSpec("cl_d_start", 8, 64, probe_fraction=0.2)
    with pytest.raises(ValueError):
        TuneSpec("cl_d_start", 8, 64, ratio=1.0)
    with pytest.raises(ValueError, match="valid"):
        TuneSpec("bogus", 8, 64)
    assert TuneSpec("ltd_total_steps", 0, 0.5).candidates() == [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]


def test_apply_candidate():
    run = base_run(curriculum=CurriculumSchedule("seqtru", 8, 32, 50))
    steps = run.baseline_steps
    assert apply_candidate(run, TuneSpec("ltd_r_start", 8, 32), 24).ltd.r_start == 24
    assert apply_candidate(run, TuneSpec("cl_d_start", 8, 32), 16).curriculum.d_start == 16
    assert apply_candidate(run, TuneSpec("ltd_total_steps", 0, 1), 0.5).ltd.total_steps == round(0.5 * steps)
    assert apply_candidate(run, TuneSpec("cl_total_steps", 0, 1), 0.7).curriculum.total_steps == round(0.7 * steps)
    assert apply_candidate(run, TuneSpec("ltd_total_steps", 0, 1), 0).ltd.mode == "off"
    assert apply_candidate(run, TuneSpec("cl_total_steps", 0, 1), 0).curriculum.metric == "none"


def fake_train(ppls):
    def _train(run, corpus, val, indexes=None, on_eval=None, **kw):
        for i, p in enumerate(ppls):
            if on_eval({"step": i, "consumed_tokens": float(i), "val_ppl": p}):
                break
        return TrainResult(None, None, [], len(ppls))
    return _train


def test_probe_ratio_rule(monkeypatch, text_corpus):
    spec = TuneSpec("ltd_r_start", 8, 32)
    monkeypatch.setattr(tuner, "train", fake_train([100.0, 50.0, 64.9, 40.0]))
    ok = probe(16, base_run(), spec, text_corpus, text_corpus)
    assert ok.passed and ok.best_ppl == 40.0
    monkeypatch.setattr(tuner, "train", fake_train([100.0, 50.0, 65.1, 40.0]))
    bad = probe(16, base_run(), spec, text_corpus, text_corpus)
    assert not bad.passed and len(bad.trace) == 3
    monkeypatch.setattr(tuner, "train", fake_train([100.0, float("nan")]))
    assert not probe(16, base_run(), spec, text_corpus, text_corpus).passed


def test_rigged_divergence_fails_probe(monkeypatch, text_corpus):
    """Fixture where any kept length under 16 tokens blows up."""
    real = tuner.train

    def rigged(run, *a, **kw):
        if run.ltd.r_start < 16:
            raise TrainingDiverged("rigged", 0)
        return real(run, *a, **kw)

    monkeypatch.setattr(tuner, "train", rigged)
    tr, va = text_corpus.split(0.1)
    spec = TuneSpec("ltd_r_start", 8, 32, probe_fraction=0.05)
    r = probe(8, base_run(), spec, tr, va)
    assert not r.passed and r.diverged
    res = binary_search(spec, base_run(), tr, va)
    assert res.value == 16


def test_real_divergence_counts_as_fail(text_corpus):
    tr, va = text_corpus.split(0.1)
    run = base_run(lr=LrSchedule(1e20, 1e-6, 0, 8 * 32 * 400))
    r = probe(8, run, TuneSpec("ltd_r_start", 8, 32, probe_fraction=0.05), tr, va)
    assert not r.passed and r.diverged


def test_baseline_equivalent_candidate_passes_and_is_deterministic(text_corpus):
    tr, va = text_corpus.split(0.1)
    spec = TuneSpec("ltd_r_start", 8, 32, probe_fraction=0.05)
    a = probe(32, base_run(), spec, tr, va)
    b = probe(32, base_run(), spec, tr, va)
    assert a.passed
    assert a.trace == b.trace and a.best_ppl == b.best_ppl
    steps = TuneSpec("ltd_total_steps", 0.0, 1.0, probe_fraction=0.05)
    assert probe(0.0, base_run(), steps, tr, va).passed


def test_history_file(tmp_path, text_corpus):
    tr, va = text_corpus.split(0.1)
    spec = TuneSpec("ltd_r_start", 8, 32, probe_fraction=0.02)
    res = binary_search(spec, base_run(), tr, va)
    write_history(tmp_path / "h.tsv", spec, res)
    text = (tmp_path / "h.tsv").read_text()
    assert text.count("# probe ") == res.n_probes
    assert f"# selected ltd_r_start={res.value}" in text


def test_presets_follow_guidelines():
    assert PRESETS["gpt_pretrain"]["cl_d_start"] == 80 and PRESETS["gpt_pretrain"]["cl_total_steps"] == 0.4
    assert PRESETS["bert_pretrain"]["cl_d_start"] == 128 and PRESETS["bert_pretrain"]["cl_total_steps"] == 0.5
    assert PRESETS["gpt2_finetune"]["cl_d_start"] == 32 and PRESETS["gpt2_finetune"]["cl_total_steps"] == 0.7
    assert [PRESETS[k]["ltd_total_steps"] for k in ("gpt_pretrain", "bert_pretrain", "gpt2_finetune")] == [0.7, 1.0, 0.3]
    assert all(p["ltd_r_start"] == 128 for p in PRESETS.values())
    spec = preset_spec("gpt_pretrain", "ltd_r_start")
    assert (spec.lo, spec.hi) == (8, 256)
