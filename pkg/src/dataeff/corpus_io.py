"""Tokenization, fixed-length packing and the packed-corpus file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Protocol, Sequence

import numpy as np

DENSE = "dense"
PADDED = "padded"
PACK_MODES = (DENSE, PADDED)

CORPUS_MAGIC = b"DFCPK1"
CORPUS_VERSION = 1
# magic, u32 version, u64 count, u32 pack_length, u32 vocab_size, u8 mode
_HEADER = struct.Struct("<6sIQIIB")
_MODE_CODES = {DENSE: 0, PADDED: 1}


class FormatError(ValueError):
    """Raised when a binary artifact is malformed, truncated or of the wrong kind."""


class VersionMismatch(FormatError):
    pass


class Tokenizer(Protocol):
    vocab_size: int
    pad_id: int

    def encode(self, data: bytes) -> list[int]: ...


class ByteTokenizer:
    """One id per byte; id 256 is padding."""

    vocab_size = 257
    pad_id = 256

    def encode(self, data: bytes) -> list[int]:
        return list(data)

    def decode(self, ids: Sequence[int]) -> bytes:
        return bytes(i for i in ids if i != self.pad_id)


class WhitespaceTokenizer:
    """Word-level tokenizer with a vocabulary fixed at construction.

    Unknown words map to ``unk_id``; ``pad_id`` is the last id.
    """

    def __init__(self, words: Sequence[str]):
        uniq = sorted(set(words))
        self.vocab = {w: i for i, w in enumerate(uniq)}
        self.unk_id = len(uniq)
        self.pad_id = len(uniq) + 1
        self.vocab_size = len(uniq) + 2

    @classmethod
    def fit(cls, data: bytes) -> "WhitespaceTokenizer":
        return cls(data.decode("utf-8", errors="replace").split())

    def encode(self, data: bytes) -> list[int]:
        text = data.decode("utf-8", errors="replace")
        return [self.vocab.get(w, self.unk_id) for w in text.split()]


@dataclass(frozen=True)
class Sample:
    tokens: np.ndarray
    effective_length: int
    sample_id: int

    @property
    def real_tokens(self) -> np.ndarray:
        return self.tokens[: self.effective_length]


class PackedCorpus:
    """Fixed-stride token matrix plus per-row effective lengths.

    ``tokens`` has shape (N, pack_length); rows shorter than pack_length are
    right-padded with ``pad_id`` (only in padded mode).
    """

    def __init__(self, tokens: np.ndarray, lengths: np.ndarray, vocab_size: int, mode: str = DENSE):
        tokens = np.asarray(tokens)
        lengths = np.asarray(lengths)
        if tokens.ndim != 2:
            raise ValueError("tokens must be a 2-D array")
        if mode not in PACK_MODES:
            raise ValueError(f"unknown pack mode {mode!r}")
        if lengths.shape != (tokens.shape[0],):
            raise ValueError("one effective length per sample is required")
        self.tokens = tokens
        self.lengths = lengths
        self.vocab_size = int(vocab_size)
        self.mode = mode

    @property
    def pack_length(self) -> int:
        return int(self.tokens.shape[1])

    @property
    def pad_id(self) -> int:
        return self.vocab_size - 1

    def __len__(self) -> int:
        return int(self.tokens.shape[0])

    def __getitem__(self, i: int) -> Sample:
        i = int(i)
        if not 0 <= i < len(self):
            raise IndexError(i)
        return Sample(np.asarray(self.tokens[i]), int(self.lengths[i]), i)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PackedCorpus):
            return NotImplemented
        return (
            self.vocab_size == other.vocab_size
            and self.mode == other.mode
            and self.tokens.shape == other.tokens.shape
            and np.array_equal(self.lengths, other.lengths)
            and np.array_equal(self.tokens, other.tokens)
        )

    def subset(self, ids: Sequence[int] | np.ndarray) -> "PackedCorpus":
        ids = np.asarray(ids, dtype=np.int64)
        return PackedCorpus(np.array(self.tokens[ids]), np.array(self.lengths[ids]), self.vocab_size, self.mode)

    def split(self, val_fraction: float) -> tuple["PackedCorpus", "PackedCorpus"]:
        """Hold out the trailing ``val_fraction`` of samples (at least one)."""
        if not 0.0 < val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        n_val = max(1, int(round(len(self) * val_fraction)))
        if n_val >= len(self):
            raise ValueError("corpus too small to split")
        cut = len(self) - n_val
        return self.subset(np.arange(cut)), self.subset(np.arange(cut, len(self)))

    def validate(self) -> None:
        if len(self) == 0:
            raise ValueError("corpus is empty")
        if np.any(self.lengths < 1) or np.any(self.lengths > self.pack_length):
            raise ValueError("effective lengths out of range")
        if self.tokens.size and int(self.tokens.max()) >= self.vocab_size:
            raise ValueError("token id outside vocabulary")
        if self.mode == DENSE and np.any(self.lengths != self.pack_length):
            raise ValueError("dense corpora cannot contain padding")
        cols = np.arange(self.pack_length)[None, :]
        pad_region = cols >= self.lengths[:, None]
        if np.any(self.tokens[pad_region] != self.pad_id):
            raise ValueError("padding must occupy only the suffix")


def tokenize_corpus(
    raw_text: bytes,
    tokenizer: Tokenizer | None = None,
    pack_length: int = 256,
    mode: str = DENSE,
) -> PackedCorpus:
    """Tokenize ``raw_text`` and pack it into rows of ``pack_length`` tokens.

    Dense mode concatenates every id and slices consecutive windows, dropping
    the final partial window. Padded mode treats each non-blank line as a
    document, chunks it to ``pack_length`` and right-pads each chunk.
    """
    if pack_length < 2:
        raise ValueError("pack_length must be >= 2")
    if mode not in PACK_MODES:
        raise ValueError(f"unknown pack mode {mode!r}")
    if not raw_text:
        raise ValueError("raw text is empty")
    tok = tokenizer if tokenizer is not None else ByteTokenizer()
    if tok.pad_id != tok.vocab_size - 1:
        raise ValueError("tokenizer must reserve its last id for padding")

    if mode == DENSE:
        ids = np.asarray(tok.encode(raw_text), dtype=np.uint32)
        n = len(ids) // pack_length
        if n == 0:
            raise ValueError(f"corpus has {len(ids)} tokens, fewer than pack_length={pack_length}")
        tokens = ids[: n * pack_length].reshape(n, pack_length)
        lengths = np.full(n, pack_length, dtype=np.uint32)
        return PackedCorpus(tokens, lengths, tok.vocab_size, DENSE)

    rows: list[np.ndarray] = []
    for line in raw_text.splitlines():
        ids = tok.encode(line)
        for start in range(0, len(ids), pack_length):
            rows.append(np.asarray(ids[start : start + pack_length], dtype=np.uint32))
    if not rows:
        raise ValueError("corpus is empty after tokenization")
    tokens = np.full((len(rows), pack_length), tok.pad_id, dtype=np.uint32)
    lengths = np.empty(len(rows), dtype=np.uint32)
    for i, row in enumerate(rows):
        tokens[i, : len(row)] = row
        lengths[i] = len(row)
    return PackedCorpus(tokens, lengths, tok.vocab_size, PADDED)


def _row_dtype(pack_length: int) -> np.dtype:
    return np.dtype([("length", "<u4"), ("tokens", "<u4", (pack_length,))])


def save_corpus(corpus: PackedCorpus, path: str | Path) -> None:
    header = _HEADER.pack(
        CORPUS_MAGIC, CORPUS_VERSION, len(corpus), corpus.pack_length, corpus.vocab_size, _MODE_CODES[corpus.mode]
    )
    body = np.empty(len(corpus), dtype=_row_dtype(corpus.pack_length))
    body["length"] = corpus.lengths
    body["tokens"] = corpus.tokens
    with open(path, "wb") as f:
        f.write(header)
        f.write(body.tobytes())


def read_header(f, struct_: struct.Struct, magic: bytes, version: int) -> tuple:
    raw = f.read(struct_.size)
    if len(raw) < struct_.size:
        raise FormatError("file truncated inside header")
    fields = struct_.unpack(raw)
    if fields[0] != magic:
        raise FormatError(f"bad magic {fields[0]!r}, expected {magic!r}")
    if fields[1] != version:
        raise VersionMismatch(f"unsupported format version {fields[1]} (expected {version})")
    return fields


def load_corpus(path: str | Path, mmap: bool = False) -> PackedCorpus:
    """Load a packed corpus; with ``mmap=True`` the token matrix stays on disk."""
    path = Path(path)
    with open(path, "rb") as f:
        _, _, n, pack_length, vocab_size, mode_code = read_header(f, _HEADER, CORPUS_MAGIC, CORPUS_VERSION)
    modes = {v: k for k, v in _MODE_CODES.items()}
    if mode_code not in modes:
        raise FormatError(f"unknown mode code {mode_code}")
    row = _row_dtype(pack_length)
    expected = _HEADER.size + n * row.itemsize
    actual = path.stat().st_size
    if actual < expected:
        raise FormatError(f"file truncated: {actual} bytes, expected {expected}")
    if actual > expected:
        raise FormatError(f"trailing bytes: {actual} bytes, expected {expected}")
    if n == 0:
        body = np.empty(0, dtype=row)
    elif mmap:
        body = np.memmap(path, dtype=row, mode="r", offset=_HEADER.size, shape=(n,))
    else:
        body = np.fromfile(path, dtype=row, offset=_HEADER.size, count=n)
    return PackedCorpus(body["tokens"], body["length"], vocab_size, modes[mode_code])
