"""Low-cost bisection tuning of CL / LTD start values and durations.

Each candidate gets a short probe run (a small fraction of the token budget,
same LR schedule as the full run). A probe fails as soon as a validation
perplexity exceeds ``ratio`` times the best perplexity seen earlier in that
probe, or if training diverges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .analyzer import DifficultyIndex
from .corpus_io import PackedCorpus
from .curriculum import CurriculumSchedule, with_total_steps
from .trainer import LOG_COLUMNS, RunConfig, TrainingDiverged, format_record, train

TARGETS = ("cl_d_start", "cl_total_steps", "ltd_r_start", "ltd_total_steps")
LENGTH_TARGETS = ("cl_d_start", "ltd_r_start")
LENGTH_GRID = 8


class NoFeasibleValue(RuntimeError):
    """Every candidate in the interval failed its probe."""


@dataclass(frozen=True)
class TuneSpec:
    """Search settings.

    Length targets take ``lo``/``hi`` in tokens on a multiple-of-8 grid.
    Step targets take them as fractions of the baseline run's total steps,
    on a grid of ``grid`` (default 0.1).
    """

    target: str
    lo: float
    hi: float
    probe_fraction: float = 0.02
    ratio: float = 1.3
    eval_interval_tokens: float = 0.0  # 0 picks a tenth of the probe budget
    grid: float | None = None

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValueError(f"unknown tuning target {self.target!r}; valid: {', '.join(TARGETS)}")
        if not self.lo < self.hi:
            raise ValueError("need lo < hi")
        if not 0 < self.probe_fraction <= 0.1:
            raise ValueError("probe_fraction must be in (0, 0.1]")
        if not self.ratio > 1:
            raise ValueError("ratio must be > 1")
        if self.grid is not None and not self.grid > 0:
            raise ValueError("grid must be positive")
        if self.is_length:
            if self.lo % LENGTH_GRID or self.hi % LENGTH_GRID or self.lo < LENGTH_GRID:
                raise ValueError("length bounds must be positive multiples of 8")
            if self.grid is not None and self.grid % LENGTH_GRID:
                raise ValueError("length grid must be a multiple of 8")
        elif self.lo < 0:
            raise ValueError("step fractions must be non-negative")

    @property
    def is_length(self) -> bool:
        return self.target in LENGTH_TARGETS

    @property
    def minimize(self) -> bool:
        """Start values are pushed down, durations up."""
        return self.is_length

    @property
    def grid_step(self) -> float:
        if self.grid is not None:
            return self.grid
        return LENGTH_GRID if self.is_length else 0.1

    def candidates(self) -> list[float]:
        """Grid from lo to hi inclusive (hi appended if off-grid)."""
        n = int(math.floor((self.hi - self.lo) / self.grid_step + 1e-9))
        vals = [self.lo + k * self.grid_step for k in range(n + 1)]
        if not self.is_length:
            vals = [round(v, 12) for v in vals]
        if not math.isclose(vals[-1], self.hi, rel_tol=0, abs_tol=1e-9):
            vals.append(self.hi)
        return [int(v) for v in vals] if self.is_length else vals

    def max_probes(self) -> int:
        return math.ceil(math.log2(len(self.candidates()) + 1))


@dataclass
class ProbeResult:
    value: float
    passed: bool
    trace: list[tuple[int, float, float]] = field(default_factory=list)  # (step, tokens, ppl)
    best_ppl: float = math.inf
    diverged: bool = False
    records: list[dict] = field(default_factory=list)


def apply_candidate(base: RunConfig, spec: TuneSpec, value: float) -> RunConfig:
    """``base`` with the target parameter set to ``value``.

    Step fractions are converted with the baseline step count; a zero
    fraction switches the technique off (the degenerate baseline).
    """
    cl, ltd = base.curriculum, base.ltd
    if spec.target == "cl_d_start":
        if not cl.value_based:
            raise ValueError("cl_d_start tuning needs a length-based curriculum")
        if value > cl.d_end:
            raise ValueError(f"d_start {value} exceeds d_end {cl.d_end}")
        return replace(base, curriculum=replace(cl, d_start=int(value)))
    if spec.target == "ltd_r_start":
        if not ltd.active:
            raise ValueError("ltd_r_start tuning needs an active routing mode")
        if value > ltd.s_full:
            raise ValueError(f"r_start {value} exceeds the full length {ltd.s_full}")
        return replace(base, ltd=replace(ltd, r_start=int(value)))
    steps = round(value * base.baseline_steps)
    if spec.target == "cl_total_steps":
        if cl.metric == "none":
            raise ValueError("cl_total_steps tuning needs a curriculum metric")
        if steps < 1:
            return replace(base, curriculum=CurriculumSchedule())
        return replace(base, curriculum=with_total_steps(cl, steps))
    if not ltd.active:
        raise ValueError("ltd_total_steps tuning needs an active routing mode")
    if steps < 1:
        return replace(base, ltd=replace(ltd, mode="off"))
    return replace(base, ltd=replace(ltd, total_steps=steps))


def probe(
    value: float,
    base: RunConfig,
    spec: TuneSpec,
    corpus: PackedCorpus,
    val_corpus: PackedCorpus,
    indexes: dict[str, DifficultyIndex] | None = None,
) -> ProbeResult:
    """Short training run at ``value``; fails on the first eval above ratio x running best."""
    cands = spec.candidates()
    if not min(cands) <= value <= max(cands):
        raise ValueError(f"candidate {value} outside [{spec.lo}, {spec.hi}]")
    budget = spec.probe_fraction * base.token_budget
    interval = spec.eval_interval_tokens or budget / 10
    run = replace(apply_candidate(base, spec, value), token_budget=budget, eval_interval_tokens=interval)
    result = ProbeResult(value, True)

    def on_eval(rec: dict) -> bool:
        ppl = rec["val_ppl"]
        result.trace.append((rec["step"], rec["consumed_tokens"], ppl))
        if not math.isfinite(ppl) or ppl > spec.ratio * result.best_ppl:
            result.passed = False
            return True
        result.best_ppl = min(result.best_ppl, ppl)
        return False

    try:
        out = train(run, corpus, val_corpus, indexes, on_eval=on_eval)
        result.records = out.records
    except TrainingDiverged:
        result.passed = False
        result.diverged = True
    return result


def bisect(values: Sequence[float], passes: Callable[[float], bool]) -> tuple[float, int]:
    """Index search for the first passing value in ``values``.

    Treats a virtual slot after the last value as passing, so "nothing
    passes" costs the same number of probes as any other answer. Returns
    the value and the probe count; raises NoFeasibleValue if every probed
    value failed.
    """
    lo, hi = 0, len(values)
    n_probes = 0
    while lo < hi:
        mid = (lo + hi) // 2
        n_probes += 1
        if passes(values[mid]):
            hi = mid
        else:
            lo = mid + 1
    if hi == len(values):
        raise NoFeasibleValue("no candidate in the interval passed")
    return values[hi], n_probes


@dataclass
class SearchResult:
    value: float
    history: list[ProbeResult]

    @property
    def n_probes(self) -> int:
        return len(self.history)


def binary_search(
    spec: TuneSpec,
    base: RunConfig | None = None,
    corpus: PackedCorpus | None = None,
    val_corpus: PackedCorpus | None = None,
    indexes: dict[str, DifficultyIndex] | None = None,
    oracle: Callable[[float], bool] | None = None,
) -> SearchResult:
    """Smallest passing start value or largest passing duration.

    ``oracle`` replaces real probes (used for synthetic checks); otherwise
    ``base``, ``corpus`` and ``val_corpus`` are required.
    """
    if oracle is None and (base is None or corpus is None or val_corpus is None):
        raise ValueError("binary_search needs either an oracle or a run config with corpora")
    history: list[ProbeResult] = []
    cache: dict[float, bool] = {}

    def passes(v: float) -> bool:
        if v not in cache:
            if oracle is not None:
                res = ProbeResult(v, bool(oracle(v)))
            else:
                res = probe(v, base, spec, corpus, val_corpus, indexes)
            history.append(res)
            cache[v] = res.passed
        return cache[v]

    cands = spec.candidates()
    order = cands if spec.minimize else cands[::-1]
    try:
        value, _ = bisect(order, passes)
    except NoFeasibleValue:
        raise NoFeasibleValue(
            f"no {spec.target} value in [{spec.lo}, {spec.hi}] passed ({len(history)} probes)"
        ) from None
    return SearchResult(value, history)


def write_history(path: str | Path, spec: TuneSpec, result: SearchResult) -> None:
    """Probe history in the metrics log format, one comment line per probe."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("# " + "\t".join(LOG_COLUMNS) + "\n")
        for p in result.history:
            status = "pass" if p.passed else ("diverged" if p.diverged else "fail")
            f.write(f"# probe {spec.target}={p.value} {status} best_ppl={p.best_ppl!r}\n")
            for rec in p.records:
                f.write(format_record(rec) + "\n")
        f.write(f"# selected {spec.target}={result.value}\n")


# Recommended starting points per workload. Step values are fractions of
# the baseline step count; lengths are in tokens at a 2048 (GPT) or 512
# (BERT) full length and get clamped to the run's sequence length.
PRESETS: dict[str, dict] = {
    "gpt_pretrain": {
        "cl_metric": "seqtru_voc", "cl_d_start": 80, "cl_total_steps": 0.4,
        "ltd_r_start": 128, "ltd_total_steps": 0.7,
    },
    "bert_pretrain": {
        "cl_metric": "seqreo_voc", "cl_d_start": 128, "cl_total_steps": 0.5,
        "ltd_r_start": 128, "ltd_total_steps": 1.0,
    },
    "gpt2_finetune": {
        "cl_metric": "seqres", "cl_d_start": 32, "cl_total_steps": 0.7,
        "ltd_r_start": 128, "ltd_total_steps": 0.3,
    },
}


def preset_spec(preset: str, target: str, **overrides) -> TuneSpec:
    """Search interval around a preset: lengths from 8 up to the preset value's double, steps up to the preset."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; valid: {', '.join(PRESETS)}")
    v = PRESETS[preset][target]
    if target in LENGTH_TARGETS:
        kw = {"lo": LENGTH_GRID, "hi": int(2 * v)}
    else:
        kw = {"lo": 0.0, "hi": float(v)}
    kw.update(overrides)
    return TuneSpec(target=target, **kw)


def preset_value(preset: str, target: str, full_length: int) -> float:
    """Preset value for ``target``, with lengths clamped into [8, full_length]."""
    v = PRESETS[preset][target]
    if target in LENGTH_TARGETS:
        return int(np.clip(v, LENGTH_GRID, full_length))
    return float(v)
