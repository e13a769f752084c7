"""Curriculum pacing and batch assembly.

Length metrics (seqtru, seqres) pace an integer sequence length; index
metrics (seqreo, voc, seqreo_voc) pace a percentile of the difficulty index
and sample from the eligible prefix. seqtru_voc / seqres_voc pace both: the
voc percentile picks the pool and the length schedule post-processes rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import rng as rng_streams
from .analyzer import DifficultyIndex
from .corpus_io import PADDED, PackedCorpus

LENGTH_METRICS = ("seqtru", "seqres")
INDEX_METRICS = ("seqreo", "voc", "seqreo_voc")
COMBINED_METRICS = ("seqtru_voc", "seqres_voc")
METRIC_NAMES = ("none",) + LENGTH_METRICS + INDEX_METRICS + COMBINED_METRICS

LENGTH_MULTIPLE = 8


def round_to_multiple(x: float, multiple: int = LENGTH_MULTIPLE) -> int:
    """Nearest multiple (halves round up), floored at ``multiple``."""
    return max(multiple, int(math.floor(x / multiple + 0.5)) * multiple)


def _pacing_exponent(pacing: str | float) -> float:
    if pacing == "linear":
        return 1.0
    if pacing == "sqrt":
        return 0.5
    if isinstance(pacing, (int, float)) and not isinstance(pacing, bool) and pacing > 0:
        return float(pacing)
    raise ValueError(f"pacing must be 'linear', 'sqrt' or a positive exponent, got {pacing!r}")


@dataclass(frozen=True)
class CurriculumSchedule:
    """One pacing schedule.

    For seqtru/seqres (and the length half of seqtru_voc/seqres_voc) the
    difficulties are sequence lengths; otherwise they are percentiles in
    (0, 100]. Combined metrics carry their voc percentile schedule in ``voc``.
    """

    metric: str = "none"
    d_start: float = 100.0
    d_end: float = 100.0
    total_steps: int = 1
    pacing: str | float = "linear"
    voc: "CurriculumSchedule | None" = None

    def __post_init__(self):
        if self.metric not in METRIC_NAMES:
            raise ValueError(f"unknown curriculum metric {self.metric!r}; valid: {', '.join(METRIC_NAMES)}")
        _pacing_exponent(self.pacing)
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.d_start > self.d_end:
            raise ValueError("d_start must not exceed d_end")
        if self.value_based:
            if self.d_start < 2:
                raise ValueError("length schedules need d_start >= 2")
        elif not 0 < self.d_start <= self.d_end <= 100:
            raise ValueError("percentile schedules need 0 < d_start <= d_end <= 100")
        if self.metric in COMBINED_METRICS:
            if self.voc is None or self.voc.metric != "voc":
                raise ValueError(f"{self.metric} needs a voc percentile schedule")
        elif self.voc is not None:
            raise ValueError(f"{self.metric} takes no secondary voc schedule")

    @property
    def value_based(self) -> bool:
        return self.metric in LENGTH_METRICS + COMBINED_METRICS

    @property
    def index_metric(self) -> str | None:
        """Name of the difficulty index this schedule samples from, if any."""
        if self.metric in INDEX_METRICS:
            return self.metric
        if self.metric in COMBINED_METRICS:
            return "voc"
        return None

    @property
    def length_mode(self) -> str | None:
        if self.metric in ("seqtru", "seqtru_voc"):
            return "seqtru"
        if self.metric in ("seqres", "seqres_voc"):
            return "seqres"
        return None


def pace(t: int, sched: CurriculumSchedule) -> float | int:
    """Difficulty threshold at step ``t``."""
    if t < 0:
        raise ValueError("step must be non-negative")
    if t >= sched.total_steps:
        return int(sched.d_end) if sched.value_based else sched.d_end
    T, span = sched.total_steps, sched.d_end - sched.d_start
    exponent = _pacing_exponent(sched.pacing)
    if exponent == 1.0:
        # one rounding step, so values that land exactly on a rounding tie stay exact
        d = (sched.d_start * T + span * t) / T
    else:
        d = sched.d_start + span * (t / T) ** exponent
    if sched.value_based:
        return int(min(max(round_to_multiple(d), sched.d_start), sched.d_end))
    return min(max(d, sched.d_start), sched.d_end)


@dataclass(frozen=True)
class DifficultyState:
    step: int
    length: int | None  # paced sequence length, length metrics only
    percentile: float | None  # paced percentile, index metrics only

    @property
    def threshold(self) -> float | int | None:
        return self.length if self.length is not None else self.percentile


def difficulty_state(t: int, sched: CurriculumSchedule) -> DifficultyState:
    if sched.metric == "none":
        return DifficultyState(t, None, None)
    if sched.metric in INDEX_METRICS:
        return DifficultyState(t, None, pace(t, sched))
    pct = pace(t, sched.voc) if sched.voc is not None else None
    return DifficultyState(t, int(pace(t, sched)), pct)


def resolve_percentile(index: DifficultyIndex, pct: float) -> tuple[float, np.ndarray]:
    """Smallest bucket key whose cumulative size reaches ``pct`` of the samples.

    Returns that key and the eligible ids (all buckets up to and including
    it; buckets are never split).
    """
    if not 0 < pct <= 100:
        raise ValueError("percentile must be in (0, 100]")
    n = len(index)
    if n == 0:
        raise ValueError("difficulty index is empty")
    need = max(1, math.ceil(round(pct * n / 100.0, 9)))
    cum = np.cumsum(np.asarray(index.sizes, dtype=np.int64))
    j = int(np.searchsorted(cum, need, side="left"))
    return float(index.keys[j]), np.asarray(index.pool[: int(cum[j])]).astype(np.int64)


@dataclass
class Batch:
    tokens: np.ndarray  # (batch_size, seq_len) int64
    lengths: np.ndarray  # real tokens per row
    sample_ids: np.ndarray  # origin sample of each row
    token_count: int
    state: DifficultyState

    @property
    def seq_len(self) -> int:
        return int(self.tokens.shape[1])

    @property
    def batch_size(self) -> int:
        return int(self.tokens.shape[0])


@dataclass
class LoaderState:
    step: int = 0
    epoch: int = 0
    cursor: int = 0
    # seqres leftovers: (sample_id, first unused token offset)
    spillover: list[tuple[int, int]] = field(default_factory=list)


class CurriculumLoader:
    """Deterministic curriculum batch stream.

    Length and baseline metrics walk a per-epoch permutation of the corpus
    (no sample repeats within an epoch); index metrics draw uniformly with
    replacement from the currently eligible prefix of the index. Every draw
    comes from a counter-based stream keyed by step or epoch, so the loader
    state is just a few integers plus the seqres spillover.
    """

    def __init__(
        self,
        corpus: PackedCorpus,
        sched: CurriculumSchedule,
        batch_size: int,
        seed: int = 0,
        index: DifficultyIndex | None = None,
    ):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if sched.length_mode == "seqres" and corpus.mode == PADDED:
            raise ValueError("seqres cannot be applied to a padded corpus")
        if sched.value_based and sched.d_end > corpus.pack_length:
            raise ValueError(f"d_end={sched.d_end} exceeds pack_length={corpus.pack_length}")
        want = sched.index_metric
        if want is not None:
            if index is None:
                raise ValueError(f"metric {sched.metric} needs a {want} difficulty index")
            if index.metric_name != want:
                raise ValueError(f"expected a {want} index, got {index.metric_name}")
            if len(index) != len(corpus):
                raise ValueError("index and corpus disagree on the sample count")
        self.corpus = corpus
        self.sched = sched
        self.batch_size = batch_size
        self.seed = seed
        self.index = index
        self.state = LoaderState()
        self._perm_epoch = -1
        self._perm: np.ndarray | None = None

    # -- sample sources ---------------------------------------------------

    def _permutation(self, epoch: int) -> np.ndarray:
        if self._perm_epoch != epoch:
            self._perm = rng_streams.stream(self.seed, rng_streams.DATA, 0, epoch).permutation(len(self.corpus))
            self._perm_epoch = epoch
        return self._perm

    def _next_sequential(self) -> int:
        st = self.state
        if st.cursor >= len(self.corpus):
            st.epoch += 1
            st.cursor = 0
        sid = int(self._permutation(st.epoch)[st.cursor])
        st.cursor += 1
        return sid

    def _eligible(self, state: DifficultyState) -> np.ndarray | None:
        if state.percentile is None:
            return None
        _, eligible = resolve_percentile(self.index, state.percentile)
        if len(eligible) < self.batch_size:
            raise ValueError(
                f"only {len(eligible)} samples eligible at {state.percentile:.3f}% "
                f"for batch_size={self.batch_size}; d_start is too small"
            )
        return eligible

    # -- assembly ---------------------------------------------------------

    def assemble(self, state: DifficultyState) -> Batch:
        eligible = self._eligible(state)
        draw_rng = rng_streams.stream(self.seed, rng_streams.DATA, 1, state.step)

        def draw(k: int) -> np.ndarray:
            if eligible is None:
                return np.array([self._next_sequential() for _ in range(k)], dtype=np.int64)
            return eligible[draw_rng.integers(0, len(eligible), size=k)]

        mode = self.sched.length_mode
        if mode == "seqres":
            return self._assemble_seqres(state, draw)
        ids = draw(self.batch_size)
        tokens = np.asarray(self.corpus.tokens[ids]).astype(np.int64)
        lengths = np.asarray(self.corpus.lengths[ids]).astype(np.int64)
        if mode == "seqtru":
            d_t = state.length
            if d_t < 2:
                raise ValueError("sequence length threshold must be >= 2")
            tokens = tokens[:, :d_t]
            lengths = np.minimum(lengths, d_t)
        return Batch(tokens, lengths, ids, int(lengths.sum()), state)

    def _assemble_seqres(self, state: DifficultyState, draw) -> Batch:
        d_t = state.length
        if d_t < 2:
            raise ValueError("sequence length threshold must be >= 2")
        rows: list[np.ndarray] = []
        origins: list[int] = []
        pending = list(self.state.spillover)
        while len(rows) < self.batch_size:
            sid, start = pending.pop(0) if pending else (int(draw(1)[0]), 0)
            n_seg = (int(self.corpus.lengths[sid]) - start) // d_t
            take = min(n_seg, self.batch_size - len(rows))
            row = np.asarray(self.corpus.tokens[sid])
            for k in range(take):
                off = start + k * d_t
                rows.append(row[off : off + d_t])
                origins.append(sid)
            if take < n_seg:
                pending.insert(0, (sid, start + take * d_t))
        self.state.spillover = pending
        tokens = np.stack(rows).astype(np.int64)
        lengths = np.full(self.batch_size, d_t, dtype=np.int64)
        return Batch(tokens, lengths, np.array(origins, dtype=np.int64), self.batch_size * d_t, state)

    def next_batch(self) -> Batch:
        state = difficulty_state(self.state.step, self.sched)
        batch = self.assemble(state)
        self.state.step += 1
        return batch

    def __iter__(self) -> Iterator[Batch]:
        while True:
            yield self.next_batch()

    # -- checkpointing ----------------------------------------------------

    def state_dict(self) -> dict:
        st = self.state
        return {"step": st.step, "epoch": st.epoch, "cursor": st.cursor, "spillover": [list(s) for s in st.spillover]}

    def load_state_dict(self, d: dict) -> None:
        self.state = LoaderState(int(d["step"]), int(d["epoch"]), int(d["cursor"]), [tuple(s) for s in d["spillover"]])


def epoch_iterator(
    corpus: PackedCorpus,
    sched: CurriculumSchedule,
    seed: int,
    batch_size: int,
    index: DifficultyIndex | None = None,
) -> Iterator[Batch]:
    """Endless stream of curriculum batches; the threshold is updated before each batch."""
    return iter(CurriculumLoader(corpus, sched, batch_size, seed, index))


def with_total_steps(sched: CurriculumSchedule, total_steps: int) -> CurriculumSchedule:
    """Copy of ``sched`` (and its voc part) with a new CL duration."""
    voc = replace(sched.voc, total_steps=total_steps) if sched.voc is not None else None
    return replace(sched, total_steps=total_steps, voc=voc)
