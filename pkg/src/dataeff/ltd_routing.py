"""Random layerwise token dropping and the TokenBypass baseline.

A routed layer sees only a kept subset of the sequence: the kept rows are
gathered (order preserved), run through the layer, and scattered back over
the layer input so dropped rows pass through bitwise unchanged. Random-LTD
draws an independent subset for every routed layer; TokenBypass draws one
subset per step and sends the dropped rows around the whole middle block.

Kept indices are always sorted ascending, so a causal mask over the
gathered subsequence is exactly the causal mask over original positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from . import rng as rng_streams
from .curriculum import round_to_multiple

MODES = ("off", "random_ltd", "token_bypass_random", "token_bypass_loss")
SCHEDULES = ("mslg_linear", "constant")
BYPASS_MODES = ("token_bypass_random", "token_bypass_loss")

Layer = Callable[[torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class LtdSchedule:
    r_start: int = 128
    s_full: int = 2048
    total_steps: int = 1
    schedule: str = "mslg_linear"
    mode: str = "off"
    # None selects the mode default; indices are 0-based layer positions
    no_drop_layers: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown routing mode {self.mode!r}; valid: {', '.join(MODES)}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown kept-length schedule {self.schedule!r}")
        if not 8 <= self.r_start <= self.s_full:
            raise ValueError("need 8 <= r_start <= s_full")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.no_drop_layers is not None:
            object.__setattr__(self, "no_drop_layers", tuple(sorted(set(int(i) for i in self.no_drop_layers))))

    @property
    def active(self) -> bool:
        return self.mode != "off"

    def full_layers(self, n_layers: int) -> tuple[int, ...]:
        """Layers that always process the full sequence."""
        if self.no_drop_layers is not None:
            full = tuple(i for i in self.no_drop_layers if 0 <= i < n_layers)
        elif self.mode in BYPASS_MODES:
            # sandwich rule: layers 1..ceil(l/2)-1 (1-based) and the last layer
            head = math.ceil(n_layers / 2) - 1
            full = tuple(range(head)) + (n_layers - 1,)
        else:
            full = (0, n_layers - 1)
        full = tuple(sorted(set(full)))
        if self.mode in BYPASS_MODES:
            middle = [i for i in range(n_layers) if i not in full]
            if middle and middle != list(range(middle[0], middle[-1] + 1)):
                raise ValueError("TokenBypass needs a contiguous block of middle layers")
        return full

    def routed_layers(self, n_layers: int) -> tuple[int, ...]:
        full = self.full_layers(n_layers)
        return tuple(i for i in range(n_layers) if i not in full)


def kept_len(t: int, sched: LtdSchedule) -> int:
    """Kept sequence length for routed layers at step ``t``."""
    if t < 0:
        raise ValueError("step must be non-negative")
    if not sched.active or t >= sched.total_steps:
        return sched.s_full
    if sched.schedule == "constant":
        return sched.r_start if t < sched.total_steps else sched.s_full
    T = sched.total_steps
    r = (sched.r_start * T + (sched.s_full - sched.r_start) * t) / T
    return int(min(max(round_to_multiple(r), sched.r_start), sched.s_full))


@dataclass(frozen=True)
class TokenPartition:
    kept: np.ndarray  # (rows, r) ascending
    dropped: np.ndarray  # (rows, s - r) ascending
    layer: int = -1

    @property
    def seq_len(self) -> int:
        return self.kept.shape[-1] + self.dropped.shape[-1]

    def check(self) -> None:
        s = self.seq_len
        both = np.concatenate([self.kept, self.dropped], axis=-1)
        if not np.array_equal(np.sort(both, axis=-1), np.broadcast_to(np.arange(s), both.shape)):
            raise AssertionError("kept and dropped do not partition the sequence")
        if self.kept.shape[-1] > 1 and np.any(np.diff(self.kept, axis=-1) <= 0):
            raise AssertionError("kept indices are not strictly increasing")


def select_kept(s: int, r: int, rng: np.random.Generator, rows: int = 1, layer: int = -1) -> TokenPartition:
    """Uniform size-``r`` subset of range(s) per row via a partial Fisher-Yates shuffle."""
    if not 1 <= r <= s:
        raise ValueError(f"kept length {r} must be in [1, {s}]")
    perm = np.tile(np.arange(s, dtype=np.int64), (rows, 1))
    ar = np.arange(rows)
    for i in range(min(r, s - 1)):
        j = rng.integers(i, s, size=rows)
        tmp = perm[ar, i].copy()
        perm[ar, i] = perm[ar, j]
        perm[ar, j] = tmp
    return TokenPartition(np.sort(perm[:, :r], axis=1), np.sort(perm[:, r:], axis=1), layer)


def _index_tensor(kept, x: torch.Tensor) -> torch.Tensor:
    idx = torch.as_tensor(np.asarray(kept), dtype=torch.long, device=x.device)
    if idx.ndim == 1:
        idx = idx.unsqueeze(0)
    s = x.shape[-2]
    if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= s):
        raise IndexError(f"kept index out of range for sequence length {s}")
    if idx.shape[-1] > 1 and bool((idx[:, 1:] <= idx[:, :-1]).any()):
        raise ValueError("kept indices must be strictly increasing")
    return idx


def gather(x: torch.Tensor, kept) -> torch.Tensor:
    """Rows ``kept`` of ``x`` in order; x is (s, d) or (B, s, d)."""
    squeeze = x.ndim == 2
    xb = x.unsqueeze(0) if squeeze else x
    idx = _index_tensor(kept, xb)
    if idx.shape[0] == 1 and xb.shape[0] > 1:
        idx = idx.expand(xb.shape[0], -1)
    out = torch.gather(xb, 1, idx.unsqueeze(-1).expand(-1, -1, xb.shape[-1]))
    return out.squeeze(0) if squeeze else out


def combine(layer_out: torch.Tensor, x_in: torch.Tensor, kept) -> torch.Tensor:
    """Scatter ``layer_out`` into the kept rows of ``x_in``; other rows pass through."""
    squeeze = x_in.ndim == 2
    xb = x_in.unsqueeze(0) if squeeze else x_in
    yb = layer_out.unsqueeze(0) if layer_out.ndim == 2 else layer_out
    idx = _index_tensor(kept, xb)
    if idx.shape[0] == 1 and xb.shape[0] > 1:
        idx = idx.expand(xb.shape[0], -1)
    if yb.shape[:2] != idx.shape or yb.shape[-1] != xb.shape[-1]:
        raise ValueError(f"layer output {tuple(yb.shape)} does not match partition {tuple(idx.shape)}")
    out = xb.scatter(1, idx.unsqueeze(-1).expand(-1, -1, xb.shape[-1]), yb)
    return out.squeeze(0) if squeeze else out


def effective_tokens(
    sched: LtdSchedule,
    t: int,
    batch_size: int,
    seq_len: int,
    n_layers: int,
    token_count: int | None = None,
) -> float:
    """Layer-averaged tokens processed at step ``t``.

    Routed layers count r_t tokens per row and full layers count seq_len,
    averaged over all layers. ``token_count`` (real tokens in the batch)
    replaces batch_size * seq_len for padded batches.
    """
    base = batch_size * seq_len if token_count is None else token_count
    r = min(kept_len(t, sched), seq_len)
    if not sched.active or r >= seq_len:
        return float(base)
    n_full = len(sched.full_layers(n_layers))
    n_drop = n_layers - n_full
    if token_count is None:
        return batch_size * (n_full * seq_len + n_drop * r) / n_layers
    return token_count * (n_full * seq_len + n_drop * r) / (n_layers * seq_len)


def route_forward(
    x0: torch.Tensor,
    layers: Sequence[Layer],
    sched: LtdSchedule,
    t: int,
    seed: int,
) -> tuple[torch.Tensor, float]:
    """Random-LTD forward through ``layers``; returns final hidden states and effective tokens."""
    B, s, _ = x0.shape
    n = len(layers)
    r = min(kept_len(t, sched), s)
    routed = set(sched.routed_layers(n)) if sched.active and r < s else set()
    x = x0
    for i, layer in enumerate(layers):
        if i not in routed:
            x = layer(x)
            continue
        part = select_kept(s, r, rng_streams.stream(seed, rng_streams.LTD, t, i), rows=B, layer=i)
        x = combine(layer(gather(x, part.kept)), x, part.kept)
    return x, effective_tokens(sched, t, B, s, n)


class TokenLossTable:
    """Per-vocabulary-id running mean of observed token losses (EMA)."""

    def __init__(self, vocab_size: int, decay: float = 0.99):
        self.decay = decay
        self.means = np.zeros(vocab_size, dtype=np.float64)
        self.counts = np.zeros(vocab_size, dtype=np.int64)

    def update(self, token_ids: np.ndarray, losses: np.ndarray) -> None:
        """Fold in one step's losses; ``losses[k]`` is the loss of predicting ``token_ids[k]``."""
        ids = np.asarray(token_ids, dtype=np.int64).ravel()
        vals = np.asarray(losses, dtype=np.float64).ravel()
        if ids.shape != vals.shape:
            raise ValueError("one loss per token id is required")
        ok = np.isfinite(vals)
        ids, vals = ids[ok], vals[ok]
        n = np.bincount(ids, minlength=len(self.means))
        seen = np.nonzero(n)[0]
        batch_mean = np.bincount(ids, weights=vals, minlength=len(self.means))[seen] / n[seen]
        fresh = self.counts[seen] == 0
        self.means[seen] = np.where(fresh, batch_mean, self.decay * self.means[seen] + (1 - self.decay) * batch_mean)
        self.counts[seen] += n[seen]

    def scores(self, token_ids: np.ndarray) -> np.ndarray:
        """Mean loss per position; ids never observed score +inf (dropped last)."""
        ids = np.asarray(token_ids, dtype=np.int64)
        return np.where(self.counts[ids] > 0, self.means[ids], np.inf)

    def state_dict(self) -> dict:
        return {"decay": self.decay, "means": self.means.copy(), "counts": self.counts.copy()}

    def load_state_dict(self, d: dict) -> None:
        self.decay = float(d["decay"])
        self.means = np.asarray(d["means"], dtype=np.float64).copy()
        self.counts = np.asarray(d["counts"], dtype=np.int64).copy()


def bypass_partition(
    s: int,
    r: int,
    rng: np.random.Generator,
    rows: int,
    token_ids: np.ndarray | None = None,
    loss_table: TokenLossTable | None = None,
) -> TokenPartition:
    """One partition per row for the whole middle block.

    With a loss table, the ``s - r`` positions whose token ids have the lowest
    running loss are dropped; ties break randomly.
    """
    if loss_table is None:
        return select_kept(s, r, rng, rows=rows)
    if token_ids is None:
        raise ValueError("the loss criterion needs the batch token ids")
    scores = loss_table.scores(np.asarray(token_ids)[:, :s])
    tiebreak = rng.random(scores.shape)
    order = np.lexsort((tiebreak, scores), axis=-1)  # ascending loss
    dropped = np.sort(order[:, : s - r], axis=1)
    kept = np.sort(order[:, s - r :], axis=1)
    return TokenPartition(kept, dropped)


def bypass_forward(
    x0: torch.Tensor,
    layers: Sequence[Layer],
    sched: LtdSchedule,
    t: int,
    seed: int,
    token_ids: np.ndarray | None = None,
    loss_table: TokenLossTable | None = None,
) -> tuple[torch.Tensor, float]:
    """TokenBypass forward: dropped rows skip every middle layer and rejoin before the tail."""
    if sched.mode not in BYPASS_MODES:
        raise ValueError(f"bypass_forward needs a TokenBypass mode, got {sched.mode!r}")
    if sched.mode == "token_bypass_loss" and loss_table is None:
        raise ValueError("token_bypass_loss needs a TokenLossTable")
    B, s, _ = x0.shape
    n = len(layers)
    r = min(kept_len(t, sched), s)
    middle = sched.routed_layers(n)
    x = x0
    if r >= s or not middle:
        for layer in layers:
            x = layer(x)
        return x, effective_tokens(sched, t, B, s, n)
    for i in range(middle[0]):
        x = layers[i](x)
    part = bypass_partition(
        s, r, rng_streams.stream(seed, rng_streams.BYPASS, t), B,
        token_ids, loss_table if sched.mode == "token_bypass_loss" else None,
    )
    h = gather(x, part.kept)
    for i in middle:
        h = layers[i](h)
    x = combine(h, x, part.kept)
    for i in range(middle[-1] + 1, n):
        x = layers[i](x)
    return x, effective_tokens(sched, t, B, s, n)


def forward_layers(
    x0: torch.Tensor,
    layers: Sequence[Layer],
    sched: LtdSchedule,
    t: int,
    seed: int,
    token_ids: np.ndarray | None = None,
    loss_table: TokenLossTable | None = None,
) -> tuple[torch.Tensor, float]:
    """Dispatch on the routing mode."""
    if sched.mode in BYPASS_MODES:
        return bypass_forward(x0, layers, sched, t, seed, token_ids, loss_table)
    return route_forward(x0, layers, sched, t, seed)
