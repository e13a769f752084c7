"""Central finite-difference check of model gradients."""

from __future__ import annotations

import numpy as np
import torch

from dataeff.ltd_routing import LtdSchedule
from dataeff.model import GPT, ModelConfig, RoutingContext, backward, flat_params, forward_loss, set_flat_params

TINY = ModelConfig(n_layers=2, d_model=16, n_heads=2, vocab_size=64, max_seq_len=16, dtype="float64")


def routing_for(mode: str, seq: int = 16) -> RoutingContext | None:
    if mode == "off":
        return None
    # a 2-layer model has no middle layer under the default rules, so route layer 0
    no_drop = (1,)
    return RoutingContext(LtdSchedule(8, seq, 1000, mode=mode, no_drop_layers=no_drop), step=3, seed=7)


def max_relative_error(
    mode: str, n_coords: int = 25, h: float = 1e-4, seed: int = 0, coords: np.ndarray | None = None
) -> float:
    g = np.random.default_rng(seed)
    model = GPT(TINY, seed=seed)
    tokens = g.integers(0, TINY.vocab_size, size=(3, TINY.max_seq_len))
    lengths = np.full(3, TINY.max_seq_len)
    ctx = routing_for(mode)
    theta = flat_params(model)
    grad = backward(model, tokens, lengths, ctx)
    if coords is None:
        coords = g.choice(theta.size, size=n_coords, replace=False)

    def loss_at(vec):
        set_flat_params(model, vec)
        with torch.no_grad():
            return forward_loss(model, tokens, lengths, ctx)[0].item()

    worst = 0.0
    for i in coords:
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        fd = (loss_at(up) - loss_at(dn)) / (2 * h)
        denom = max(abs(fd), abs(grad[i]), 1e-8)
        worst = max(worst, abs(fd - grad[i]) / denom)
    set_flat_params(model, theta)
    return worst


def param_slice(model: GPT, name: str) -> np.ndarray:
    pos = 0
    for n, p in model.named_parameters():
        if n == name:
            return np.arange(pos, pos + p.numel())
        pos += p.numel()
    raise KeyError(name)
