"""Offline difficulty indexing of a packed corpus.

The map stage splits the corpus into contiguous shards and scores every
sample with a difficulty metric; the reduce stage merges the per-shard
results into one :class:`DifficultyIndex` holding both directions of the
mapping (sample -> difficulty, difficulty -> samples). Indexes persist as a
flat little-endian file that :func:`load_index` memory-maps.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .corpus_io import FormatError, PackedCorpus, Sample, read_header

CONTINUOUS = "continuous"
DISCRETE = "discrete"
VALUE_KINDS = (CONTINUOUS, DISCRETE)

QUANT_DIGITS = 6

INDEX_MAGIC = b"DFIDX1"
INDEX_VERSION = 1
# magic, u32 version, u64 N, u8 value_kind, u32 metric-name byte length
_HEADER = struct.Struct("<6sIQBI")
_BUCKET = np.dtype([("key", "<f8"), ("offset", "<u8"), ("len", "<u8")])
_KIND_CODES = {CONTINUOUS: 0, DISCRETE: 1}


@dataclass(frozen=True)
class UnigramTable:
    counts: np.ndarray  # int64, one entry per vocabulary id
    total: int

    def prob(self, token_id: int) -> float:
        c = int(self.counts[token_id])
        if c == 0:
            raise KeyError(f"token id {token_id} never occurs in the corpus")
        return c / self.total

    def log_probs(self) -> np.ndarray:
        """Natural-log probabilities; ids absent from the corpus map to -inf."""
        with np.errstate(divide="ignore"):
            return np.log(self.counts.astype(np.float64)) - math.log(self.total)


def build_unigram_table(corpus: PackedCorpus) -> UnigramTable:
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    counts = np.zeros(corpus.vocab_size, dtype=np.int64)
    cols = np.arange(corpus.pack_length)
    for start in range(0, len(corpus), 4096):
        tok = np.asarray(corpus.tokens[start : start + 4096])
        real = cols[None, :] < np.asarray(corpus.lengths[start : start + 4096])[:, None]
        counts += np.bincount(tok[real].astype(np.int64), minlength=corpus.vocab_size)
    return UnigramTable(counts, int(counts.sum()))


def quantize(value: float) -> float:
    # np.round, not builtin round: must agree with the batched map-stage path
    return float(np.round(value, QUANT_DIGITS))


# -- per-sample metrics -------------------------------------------------------


def metric_voc(sample: Sample, table: UnigramTable) -> float:
    """Vocabulary rarity: -sum of ln p(token) over the sample's real tokens."""
    logp = table.log_probs()
    ids = sample.real_tokens.astype(np.int64)
    vals = logp[ids]
    if not np.all(np.isfinite(vals)):
        bad = int(ids[~np.isfinite(vals)][0])
        raise KeyError(f"sample {sample.sample_id}: token id {bad} absent from unigram table")
    return float(-vals.sum())


def metric_effective_seqlen(sample: Sample) -> int:
    return int(sample.effective_length)


def _composite(voc_q: np.ndarray, lengths: np.ndarray, pack_length: int) -> np.ndarray:
    micro = np.rint(voc_q * 10**QUANT_DIGITS).astype(np.int64)
    key = micro * (pack_length + 1) + lengths.astype(np.int64)
    if key.size and int(key.max()) >= 2**53:
        raise OverflowError("composite seqreo_voc key exceeds exact f64 range")
    return key.astype(np.float64)


def metric_seqreo_voc(sample: Sample, table: UnigramTable) -> float:
    """Single key ordering by quantized voc first, effective length second."""
    voc = np.array([quantize(metric_voc(sample, table))])
    return float(_composite(voc, np.array([sample.effective_length]), len(sample.tokens))[0])


# -- batched metrics used by the map stage ------------------------------------


def _batch_voc(tokens: np.ndarray, lengths: np.ndarray, table: UnigramTable, first_id: int) -> np.ndarray:
    logp = table.log_probs()
    vals = logp[tokens.astype(np.int64)]
    real = np.arange(tokens.shape[1])[None, :] < lengths[:, None]
    bad = real & ~np.isfinite(vals)
    if bad.any():
        row = int(np.argmax(bad.any(axis=1)))
        raise KeyError(f"sample {first_id + row}: token absent from unigram table")
    return -np.where(real, vals, 0.0).sum(axis=1)


def _score_voc(tokens, lengths, table, first_id):
    return np.round(_batch_voc(tokens, lengths, table, first_id), QUANT_DIGITS)


def _score_seqlen(tokens, lengths, table, first_id):
    return lengths.astype(np.float64)


def _score_seqreo_voc(tokens, lengths, table, first_id):
    voc = np.round(_batch_voc(tokens, lengths, table, first_id), QUANT_DIGITS)
    return _composite(voc, lengths, tokens.shape[1])


@dataclass(frozen=True)
class Metric:
    name: str
    value_kind: str
    needs_table: bool
    score: Callable[[np.ndarray, np.ndarray, UnigramTable | None, int], np.ndarray]


METRICS: dict[str, Metric] = {
    "voc": Metric("voc", CONTINUOUS, True, _score_voc),
    "seqreo": Metric("seqreo", DISCRETE, False, _score_seqlen),
    "seqreo_voc": Metric("seqreo_voc", DISCRETE, True, _score_seqreo_voc),
}


def get_metric(name: str) -> Metric:
    try:
        return METRICS[name]
    except KeyError:
        raise ValueError(f"unknown metric {name!r}; valid metrics: {', '.join(sorted(METRICS))}") from None


# -- index structures ---------------------------------------------------------


class DifficultyIndex:
    """Both directions of the sample/difficulty mapping as flat arrays.

    ``keys[j]`` is the j-th smallest distinct difficulty; its samples are
    ``pool[offsets[j] : offsets[j] + sizes[j]]`` in ascending id order.
    """

    def __init__(
        self,
        sample_to_difficulty: np.ndarray,
        keys: np.ndarray,
        offsets: np.ndarray,
        sizes: np.ndarray,
        pool: np.ndarray,
        metric_name: str,
        value_kind: str,
    ):
        if value_kind not in VALUE_KINDS:
            raise ValueError(f"unknown value kind {value_kind!r}")
        self.sample_to_difficulty = sample_to_difficulty
        self.keys = keys
        self.offsets = offsets
        self.sizes = sizes
        self.pool = pool
        self.metric_name = metric_name
        self.value_kind = value_kind

    @classmethod
    def from_values(cls, values: np.ndarray, metric_name: str, value_kind: str) -> "DifficultyIndex":
        values = np.ascontiguousarray(values, dtype=np.float64)
        order = np.argsort(values, kind="stable").astype(np.uint64)
        keys, sizes = np.unique(values, return_counts=True)
        sizes = sizes.astype(np.uint64)
        offsets = np.cumsum(sizes) - sizes
        return cls(values, keys, offsets, sizes, order, metric_name, value_kind)

    def __len__(self) -> int:
        return int(self.sample_to_difficulty.shape[0])

    @property
    def num_buckets(self) -> int:
        return int(self.keys.shape[0])

    def bucket(self, j: int) -> np.ndarray:
        off = int(self.offsets[j])
        return np.asarray(self.pool[off : off + int(self.sizes[j])])

    def buckets(self) -> Iterator[tuple[float, np.ndarray]]:
        for j in range(self.num_buckets):
            yield float(self.keys[j]), self.bucket(j)

    def difficulty_to_samples(self) -> dict[float, list[int]]:
        return {k: ids.tolist() for k, ids in self.buckets()}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DifficultyIndex):
            return NotImplemented
        return (
            self.metric_name == other.metric_name
            and self.value_kind == other.value_kind
            and np.array_equal(self.sample_to_difficulty, other.sample_to_difficulty)
            and np.array_equal(self.keys, other.keys)
            and np.array_equal(self.offsets, other.offsets)
            and np.array_equal(self.sizes, other.sizes)
            and np.array_equal(self.pool, other.pool)
        )

    def validate(self) -> None:
        n = len(self)
        if np.any(np.diff(self.keys) <= 0):
            raise ValueError("bucket keys must be strictly increasing")
        if int(np.sum(self.sizes)) != n:
            raise ValueError("bucket sizes do not sum to the sample count")
        if np.any(self.offsets != np.cumsum(self.sizes) - self.sizes):
            raise ValueError("bucket offsets are not contiguous")
        pool = np.asarray(self.pool)
        if not np.array_equal(np.sort(pool), np.arange(n, dtype=pool.dtype)):
            raise ValueError("buckets do not partition the sample ids")
        expanded = np.repeat(self.keys, self.sizes.astype(np.int64))
        if not np.array_equal(np.asarray(self.sample_to_difficulty)[pool.astype(np.int64)], expanded):
            raise ValueError("sample_to_difficulty disagrees with bucket membership")
        for j in range(self.num_buckets):
            if np.any(np.diff(self.bucket(j).astype(np.int64)) <= 0):
                raise ValueError(f"bucket {j} ids are not sorted")


@dataclass
class PartialIndex:
    shard_id: int
    begin: int
    end: int
    values: np.ndarray  # difficulty of samples begin..end-1
    keys: np.ndarray
    sizes: np.ndarray
    pool: np.ndarray  # global sample ids grouped by key, ascending within a key
    metric_name: str
    value_kind: str


def shard_ranges(n: int, workers: int) -> list[tuple[int, int]]:
    if workers < 1:
        raise ValueError("workers must be >= 1")
    bounds = np.linspace(0, n, workers + 1).round().astype(np.int64)
    return [(int(bounds[i]), int(bounds[i + 1])) for i in range(workers)]


def map_shard(
    tokens: np.ndarray,
    lengths: np.ndarray,
    begin: int,
    metric: Metric | str,
    table: UnigramTable | None = None,
    shard_id: int = 0,
    batch_size: int = 1024,
) -> PartialIndex:
    """Score one contiguous shard (rows ``begin..begin+len(tokens)``)."""
    metric = get_metric(metric) if isinstance(metric, str) else metric
    if metric.needs_table and table is None:
        raise ValueError(f"metric {metric.name} needs a unigram table")
    n = int(tokens.shape[0])
    values = np.empty(n, dtype=np.float64)
    for s in range(0, n, batch_size):
        values[s : s + batch_size] = metric.score(
            np.asarray(tokens[s : s + batch_size]), np.asarray(lengths[s : s + batch_size]), table, begin + s
        )
    order = np.argsort(values, kind="stable")
    keys, sizes = np.unique(values, return_counts=True)
    return PartialIndex(
        shard_id, begin, begin + n, values, keys, sizes.astype(np.uint64),
        (order + begin).astype(np.uint64), metric.name, metric.value_kind,
    )


def reduce_merge(partials: Sequence[PartialIndex]) -> DifficultyIndex:
    if not partials:
        raise ValueError("nothing to merge")
    parts = sorted(partials, key=lambda p: (p.begin, p.end))
    names = {(p.metric_name, p.value_kind) for p in parts}
    if len(names) != 1:
        raise ValueError("partials come from different metrics")
    cursor = 0
    for p in parts:
        if p.begin < cursor:
            raise ValueError(f"shard {p.shard_id} overlaps the previous shard at {p.begin}")
        if p.begin > cursor:
            raise ValueError(f"samples {cursor}..{p.begin - 1} are not covered by any shard")
        cursor = p.end
    values = np.concatenate([p.values for p in parts]) if parts else np.empty(0)
    # merge bucket directories: every (key, id) pair, ordered by key then id
    pair_keys = np.concatenate([np.repeat(p.keys, p.sizes.astype(np.int64)) for p in parts])
    pair_ids = np.concatenate([p.pool for p in parts]).astype(np.uint64)
    order = np.lexsort((pair_ids, pair_keys))
    pool = pair_ids[order]
    keys, sizes = np.unique(pair_keys, return_counts=True)
    sizes = sizes.astype(np.uint64)
    offsets = np.cumsum(sizes) - sizes
    name, kind = names.pop()
    return DifficultyIndex(values, keys, offsets, sizes, pool, name, kind)


def _map_job(args) -> PartialIndex:
    tokens, lengths, begin, metric_name, table, shard_id = args
    return map_shard(tokens, lengths, begin, metric_name, table, shard_id)


def build_index(
    corpus: PackedCorpus,
    metric: str,
    table: UnigramTable | None = None,
    workers: int = 1,
) -> DifficultyIndex:
    """Map over ``workers`` shards (in separate processes when > 1), then reduce."""
    m = get_metric(metric)
    if m.needs_table and table is None:
        table = build_unigram_table(corpus)
    jobs = [
        (np.asarray(corpus.tokens[b:e]), np.asarray(corpus.lengths[b:e]), b, metric, table, i)
        for i, (b, e) in enumerate(shard_ranges(len(corpus), workers))
    ]
    if workers == 1:
        partials = [_map_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(_map_job, jobs))
    return reduce_merge(partials)


# -- persistence --------------------------------------------------------------


def write_index(index: DifficultyIndex, path: str | Path) -> None:
    name = index.metric_name.encode("utf-8")
    n = len(index)
    buckets = np.empty(index.num_buckets, dtype=_BUCKET)
    buckets["key"] = index.keys
    buckets["offset"] = index.offsets
    buckets["len"] = index.sizes
    with open(path, "wb") as f:
        f.write(_HEADER.pack(INDEX_MAGIC, INDEX_VERSION, n, _KIND_CODES[index.value_kind], len(name)))
        f.write(name)
        f.write(np.ascontiguousarray(index.sample_to_difficulty, dtype="<f8").tobytes())
        f.write(struct.pack("<Q", index.num_buckets))
        f.write(buckets.tobytes())
        f.write(np.ascontiguousarray(index.pool, dtype="<u8").tobytes())


def load_index(path: str | Path) -> DifficultyIndex:
    """Open an index file; only the header and bucket count are parsed eagerly."""
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as f:
        _, _, n, kind_code, name_len = read_header(f, _HEADER, INDEX_MAGIC, INDEX_VERSION)
        name_raw = f.read(name_len)
        if len(name_raw) < name_len:
            raise FormatError("file truncated inside metric name")
        values_off = _HEADER.size + name_len
        count_off = values_off + 8 * n
        if size < count_off + 8:
            raise FormatError("file truncated before bucket directory")
        f.seek(count_off)
        (n_buckets,) = struct.unpack("<Q", f.read(8))
    kinds = {v: k for k, v in _KIND_CODES.items()}
    if kind_code not in kinds:
        raise FormatError(f"unknown value kind code {kind_code}")
    dir_off = count_off + 8
    pool_off = dir_off + _BUCKET.itemsize * n_buckets
    expected = pool_off + 8 * n
    if size != expected:
        raise FormatError(f"index file is {size} bytes, expected {expected}")

    def _map(dtype, offset, count):
        if count == 0:
            return np.empty(0, dtype=dtype)
        return np.memmap(path, dtype=dtype, mode="r", offset=offset, shape=(count,))

    values = _map("<f8", values_off, n)
    buckets = _map(_BUCKET, dir_off, n_buckets)
    pool = _map("<u8", pool_off, n)
    return DifficultyIndex(
        values, buckets["key"], buckets["offset"], buckets["len"], pool,
        name_raw.decode("utf-8"), kinds[kind_code],
    )
