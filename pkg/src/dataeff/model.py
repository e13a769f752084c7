"""Minimal pre-norm decoder-only transformer that the routing module drives."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus_io import FormatError, read_header
from .ltd_routing import LtdSchedule, TokenLossTable, forward_layers

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class NonFiniteLoss(FloatingPointError):
    """The loss or gradient left the finite range (training diverged)."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    ffn_ratio: int = 4
    vocab_size: int = 257
    max_seq_len: int = 256
    dtype: str = "float64"
    zero_init_head: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_layers < 2:
            raise ValueError("need at least 2 layers (distinct first and last)")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]


class Block(nn.Module):
    """MHA + FFC with pre-norm residuals. Causal over its input order."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, cfg.ffn_ratio * d)
        self.fc2 = nn.Linear(cfg.ffn_ratio * d, d)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        B, T, d = x.shape
        q, k, v = self.qkv(x).split(d, dim=-1)
        shape = (B, T, self.n_heads, d // self.n_heads)
        q, k, v = (z.view(shape).transpose(1, 2) for z in (q, k, v))
        y = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        return self.proj(y.transpose(1, 2).reshape(B, T, d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attention(self.ln1(x))
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


@dataclass
class RoutingContext:
    sched: LtdSchedule
    step: int
    seed: int
    loss_table: TokenLossTable | None = None


class GPT(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_seq_len, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size)
        self.to(cfg.torch_dtype)
        self.reset_parameters(seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if p.ndim >= 2:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * 0.02)
            elif name.endswith("weight"):  # LayerNorm gains
                p.fill_(1.0)
            else:
                p.zero_()
        if self.cfg.zero_init_head:
            self.head.weight.zero_()
            self.head.bias.zero_()

    def forward(
        self, tokens: torch.Tensor, routing: RoutingContext | None = None
    ) -> tuple[torch.Tensor, float]:
        """Logits (B, T, V) and the step's effective token count."""
        B, T = tokens.shape
        if T > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {T} exceeds max_seq_len {self.cfg.max_seq_len}")
        x = self.tok_emb(tokens) + self.pos_emb(torch.arange(T, device=tokens.device))
        if routing is None or not routing.sched.active:
            for block in self.blocks:
                x = block(x)
            n_tok = float(B * T)
        else:
            x, n_tok = forward_layers(
                x, list(self.blocks), routing.sched, routing.step, routing.seed,
                tokens.cpu().numpy(), routing.loss_table,
            )
        return self.head(self.ln_f(x)), n_tok


def _as_tensor(a) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a), dtype=torch.long)


def token_losses(model: GPT, tokens, lengths, routing: RoutingContext | None = None):
    """Per-position next-token losses (B, T-1) in float64, the target mask, and effective tokens.

    Position j predicts token j+1; it counts only if token j+1 is a real token.
    """
    tok = _as_tensor(tokens)
    lens = _as_tensor(lengths)
    logits, n_tok = model(tok, routing)
    logits = logits[:, :-1].to(torch.float64)
    targets = tok[:, 1:]
    mask = (torch.arange(1, tok.shape[1])[None, :] < lens[:, None])
    losses = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none")
    losses = losses.view(targets.shape) * mask
    return losses, mask, n_tok


def forward_loss(model: GPT, tokens, lengths, routing: RoutingContext | None = None):
    """Mean next-token loss over real targets and the per-position losses."""
    losses, mask, _ = token_losses(model, tokens, lengths, routing)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("batch has no real target positions")
    loss = losses.sum() / n
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"non-finite loss {loss.item()}")
    return loss, losses


def flat_params(model: nn.Module) -> np.ndarray:
    return torch.cat([p.detach().reshape(-1).to(torch.float64) for p in model.parameters()]).numpy()


@torch.no_grad()
def set_flat_params(model: nn.Module, flat: np.ndarray) -> None:
    flat = np.asarray(flat, dtype=np.float64)
    total = sum(p.numel() for p in model.parameters())
    if flat.shape != (total,):
        raise ValueError(f"expected {total} parameters, got {flat.shape}")
    pos = 0
    for p in model.parameters():
        n = p.numel()
        p.copy_(torch.from_numpy(flat[pos : pos + n].copy()).view(p.shape).to(p.dtype))
        pos += n


def backward(model: GPT, tokens, lengths, routing: RoutingContext | None = None) -> np.ndarray:
    """Gradient of the mean loss as a flat float64 vector (parameter order)."""
    model.zero_grad(set_to_none=True)
    loss, _ = forward_loss(model, tokens, lengths, routing)
    loss.backward()
    grads = []
    for p in model.parameters():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        grads.append(g.reshape(-1).to(torch.float64))
    flat = torch.cat(grads).numpy()
    if not np.all(np.isfinite(flat)):
        raise NonFiniteLoss("non-finite gradient")
    return flat


# -- checkpoint file ----------------------------------------------------------

CKPT_MAGIC = b"DFCKP1"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<6sI")


def _write_block(f, payload: bytes) -> None:
    f.write(struct.pack("<Q", len(payload)))
    f.write(payload)


def _read_block(f) -> bytes:
    raw = f.read(8)
    if len(raw) < 8:
        raise FormatError("checkpoint truncated")
    (n,) = struct.unpack("<Q", raw)
    data = f.read(n)
    if len(data) < n:
        raise FormatError("checkpoint truncated")
    return data


def save_checkpoint(
    path: str | Path,
    cfg: ModelConfig,
    model: GPT,
    state: dict | None = None,
    arrays: dict[str, np.ndarray] | None = None,
) -> None:
    """Header, config JSON, f64 parameter vector, state JSON, named f64 arrays."""
    arrays = arrays or {}
    names = sorted(arrays)
    meta = {"state": state or {}, "arrays": [[k, int(np.asarray(arrays[k]).size)] for k in names]}
    with open(path, "wb") as f:
        f.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION))
        _write_block(f, json.dumps(asdict(cfg), sort_keys=True).encode("utf-8"))
        _write_block(f, flat_params(model).astype("<f8").tobytes())
        _write_block(f, json.dumps(meta, sort_keys=True).encode("utf-8"))
        for k in names:
            _write_block(f, np.ascontiguousarray(arrays[k], dtype="<f8").ravel().tobytes())


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, GPT, dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        read_header(f, _CKPT_HEADER, CKPT_MAGIC, CKPT_VERSION)
        try:
            cfg = ModelConfig(**json.loads(_read_block(f)))
        except (TypeError, ValueError) as e:
            raise FormatError(f"bad model config block: {e}") from None
        params = np.frombuffer(_read_block(f), dtype="<f8")
        meta = json.loads(_read_block(f))
        arrays = {}
        for name, size in meta["arrays"]:
            arr = np.frombuffer(_read_block(f), dtype="<f8")
            if arr.size != size:
                raise FormatError(f"array {name} has {arr.size} values, expected {size}")
            arrays[name] = arr
        if f.read(1):
            raise FormatError("trailing bytes after checkpoint")
    model = GPT(cfg)
    set_flat_params(model, params)
    return cfg, model, meta["state"], arrays


def uniform_loss(vocab_size: int) -> float:
    return math.log(vocab_size)
