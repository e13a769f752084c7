"""Training loop: curriculum batches, routed forward/backward, token-based LR decay."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .analyzer import DifficultyIndex
from .corpus_io import PackedCorpus
from .curriculum import CurriculumLoader, CurriculumSchedule
from .ltd_routing import LtdSchedule, TokenLossTable, effective_tokens, kept_len
from .model import GPT, ModelConfig, NonFiniteLoss, RoutingContext, load_checkpoint, save_checkpoint, token_losses

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.95)
ADAM_EPS = 1e-8
GRAD_CLIP = 1.0
LOG_COLUMNS = ("step", "consumed_tokens", "d_t", "r_t", "lr", "train_loss", "val_ppl")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, step: int, checkpoint: Path | None = None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TokenLedger:
    consumed_tokens: float = 0.0
    # (step, d_t, r_t, tokens_this_step)
    entries: list[tuple[int, float, int, float]] = field(default_factory=list)

    def add(self, step: int, d_t: float, r_t: int, tokens: float) -> None:
        if not tokens > 0:
            raise ValueError("every step must consume a positive number of tokens")
        self.consumed_tokens += tokens
        self.entries.append((step, d_t, r_t, tokens))

    def state_dict(self) -> dict:
        return {"consumed_tokens": self.consumed_tokens, "entries": [list(e) for e in self.entries]}

    @classmethod
    def from_state(cls, d: dict) -> "TokenLedger":
        return cls(float(d["consumed_tokens"]), [tuple(e) for e in d["entries"]])


@dataclass(frozen=True)
class LrSchedule:
    peak_lr: float = 1e-3
    min_lr: float = 1e-6
    warmup_tokens: float = 0.0
    decay_tokens: float = 1.0
    shape: str = "cosine"

    def __post_init__(self):
        if not 0 < self.min_lr <= self.peak_lr:
            raise ValueError("need 0 < min_lr <= peak_lr")
        if not 0 <= self.warmup_tokens < self.decay_tokens:
            raise ValueError("need 0 <= warmup_tokens < decay_tokens")
        if self.shape not in ("cosine", "linear"):
            raise ValueError("shape must be 'cosine' or 'linear'")


def lr_at(consumed: float, sched: LrSchedule) -> float:
    """Learning rate after ``consumed`` tokens: linear warmup, then cosine/linear decay to min_lr."""
    if consumed < 0:
        raise ValueError("consumed tokens must be non-negative")
    if consumed < sched.warmup_tokens:
        return sched.peak_lr * consumed / sched.warmup_tokens
    if consumed >= sched.decay_tokens:
        return sched.min_lr
    x = (consumed - sched.warmup_tokens) / (sched.decay_tokens - sched.warmup_tokens)
    shape = 0.5 * (1.0 + math.cos(math.pi * x)) if sched.shape == "cosine" else 1.0 - x
    return sched.min_lr + (sched.peak_lr - sched.min_lr) * shape


def scaled_peak_lr(base_lr: float, data_fraction: float, halvings: int = 0) -> float:
    """Peak LR for a reduced data budget: scaled up by 1/fraction, halved per divergence."""
    if not 0 < data_fraction <= 1:
        raise ValueError("data_fraction must be in (0, 1]")
    return base_lr / data_fraction / 2**halvings


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    token_budget: float = 1e6
    batch_size: int = 16
    seed: int = 0
    curriculum: CurriculumSchedule = field(default_factory=CurriculumSchedule)
    ltd: LtdSchedule = field(default_factory=lambda: LtdSchedule(r_start=256, s_full=256))
    lr: LrSchedule = field(default_factory=LrSchedule)
    eval_interval_tokens: float = 0.0  # 0 evaluates only at the end
    eval_at_start: bool = False
    checkpoint_interval: int = 0  # steps; 0 disables periodic checkpoints
    max_eval_samples: int = 0  # 0 uses the whole held-out corpus

    def __post_init__(self):
        if not self.token_budget > 0:
            raise ValueError("token_budget must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def validate_against(self, corpus: PackedCorpus) -> None:
        L = corpus.pack_length
        if self.model.max_seq_len < L:
            raise ValueError(f"model max_seq_len {self.model.max_seq_len} < pack_length {L}")
        if self.model.vocab_size != corpus.vocab_size:
            raise ValueError("model and corpus vocabularies differ")
        if self.ltd.active and self.ltd.s_full != L:
            raise ValueError(f"ltd.s_full {self.ltd.s_full} != pack_length {L}")

    @property
    def baseline_steps(self) -> int:
        """Steps a no-CL, no-LTD run needs to spend the budget."""
        return math.ceil(self.token_budget / (self.batch_size * self.model.max_seq_len))


def _build(cls, d):
    if not isinstance(d, dict):
        raise ValueError(f"{cls.__name__} must be an object")
    names = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for k, v in d.items():
        if cls is CurriculumSchedule and k == "voc" and v is not None:
            v = _build(CurriculumSchedule, v)
        elif cls is LtdSchedule and k == "no_drop_layers" and v is not None:
            v = tuple(v)
        kwargs[k] = v
    return cls(**kwargs)


_NESTED = {"model": ModelConfig, "curriculum": CurriculumSchedule, "ltd": LtdSchedule, "lr": LrSchedule}


def run_config_from_dict(d: dict) -> RunConfig:
    """Inverse of ``run_config_to_dict``; unknown keys are rejected."""
    d = dict(d)
    for key, cls in _NESTED.items():
        if key in d:
            d[key] = _build(cls, d[key])
    return _build(RunConfig, d)


def run_config_to_dict(run: RunConfig) -> dict:
    out = asdict(run)
    nd = out["ltd"]["no_drop_layers"]
    out["ltd"]["no_drop_layers"] = list(nd) if nd is not None else None
    return out


# -- evaluation ---------------------------------------------------------------


@torch.no_grad()
def evaluate(model: GPT, corpus: PackedCorpus, batch_size: int = 32, max_samples: int = 0) -> float:
    """Perplexity of full-length, unrouted forward passes over ``corpus``."""
    n = len(corpus) if max_samples <= 0 else min(max_samples, len(corpus))
    if n == 0:
        raise ValueError("evaluation corpus is empty")
    total, count = 0.0, 0
    for s in range(0, n, batch_size):
        tok = np.asarray(corpus.tokens[s : min(n, s + batch_size)]).astype(np.int64)
        lens = np.asarray(corpus.lengths[s : min(n, s + batch_size)]).astype(np.int64)
        losses, mask, _ = token_losses(model, tok, lens, None)
        total += float(losses.sum())
        count += int(mask.sum())
    if count == 0:
        raise ValueError("evaluation corpus has no target tokens")
    return math.exp(total / count)


# -- training -----------------------------------------------------------------


@dataclass
class TrainResult:
    model: GPT
    ledger: TokenLedger
    records: list[dict]
    steps: int

    @property
    def evals(self) -> list[tuple[int, float, float]]:
        """(step, consumed tokens, val ppl) for every evaluation."""
        return [(r["step"], r["consumed_tokens"], r["val_ppl"]) for r in self.records if r.get("val_ppl") is not None]

    @property
    def final_val_ppl(self) -> float | None:
        ev = self.evals
        return ev[-1][2] if ev else None


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_record(rec: dict) -> str:
    return "\t".join(_fmt(rec.get(c)) for c in LOG_COLUMNS)


def parse_log(path: str | Path) -> list[dict]:
    """Read a metrics log back into records (comment lines skipped)."""
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        rec = {}
        for col, raw in zip(LOG_COLUMNS, parts):
            if raw == "-":
                rec[col] = None
            elif col == "step":
                rec[col] = int(raw)
            else:
                rec[col] = float(raw)
        out.append(rec)
    return out


def _optimizer_arrays(opt: torch.optim.Adam, params: list[torch.nn.Parameter]) -> tuple[dict, int]:
    ms, vs, step = [], [], 0
    for p in params:
        st = opt.state.get(p)
        if not st:
            ms.append(torch.zeros(p.numel(), dtype=torch.float64))
            vs.append(torch.zeros(p.numel(), dtype=torch.float64))
            continue
        step = int(st["step"])
        ms.append(st["exp_avg"].reshape(-1).to(torch.float64))
        vs.append(st["exp_avg_sq"].reshape(-1).to(torch.float64))
    return {"adam_m": torch.cat(ms).numpy(), "adam_v": torch.cat(vs).numpy()}, step


def _restore_optimizer(opt: torch.optim.Adam, params, arrays: dict, step: int) -> None:
    if step == 0:
        return
    pos = 0
    for p in params:
        n = p.numel()
        opt.state[p] = {
            "step": torch.tensor(float(step), dtype=torch.float32),
            "exp_avg": torch.from_numpy(arrays["adam_m"][pos : pos + n].copy()).view(p.shape).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(arrays["adam_v"][pos : pos + n].copy()).view(p.shape).to(p.dtype),
        }
        pos += n


def save_training_state(path, run, model, opt, loader, ledger, loss_table, records) -> None:
    params = list(model.parameters())
    arrays, opt_step = _optimizer_arrays(opt, params)
    state = {
        "run": run_config_to_dict(run),
        "ledger": ledger.state_dict(),
        "loader": loader.state_dict(),
        "optimizer_step": opt_step,
        "records": records,
    }
    if loss_table is not None:
        arrays["loss_means"] = loss_table.means
        arrays["loss_counts"] = loss_table.counts.astype(np.float64)
        state["loss_decay"] = loss_table.decay
    save_checkpoint(path, run.model, model, state, arrays)


def _crossed(before: float, after: float, interval: float) -> bool:
    return interval > 0 and math.floor(after / interval) > math.floor(before / interval)


def train(
    run: RunConfig,
    corpus: PackedCorpus,
    val_corpus: PackedCorpus | None = None,
    indexes: dict[str, DifficultyIndex] | None = None,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    resume_from: str | Path | None = None,
    max_steps: int | None = None,
    on_eval: Callable[[dict], bool] | None = None,
) -> TrainResult:
    """Train until the token ledger reaches ``run.token_budget``.

    ``on_eval`` sees every evaluation record and may return True to stop
    early. ``max_steps`` caps the number of optimizer steps taken in this call.
    """
    run.validate_against(corpus)
    if val_corpus is not None and val_corpus.pack_length > run.model.max_seq_len:
        raise ValueError("validation rows are longer than the model context")
    indexes = indexes or {}
    want = run.curriculum.index_metric
    index = indexes.get(want) if want else None

    model = GPT(run.model, seed=run.seed)
    params = list(model.parameters())
    opt = torch.optim.Adam(params, lr=0.0, betas=ADAM_BETAS, eps=ADAM_EPS)
    loader = CurriculumLoader(corpus, run.curriculum, run.batch_size, run.seed, index)
    loss_table = TokenLossTable(run.model.vocab_size) if run.ltd.mode == "token_bypass_loss" else None
    ledger = TokenLedger()
    records: list[dict] = []

    if resume_from is not None:
        cfg, loaded, state, arrays = load_checkpoint(resume_from)
        if cfg != run.model:
            raise ValueError("checkpoint model config differs from the run config")
        model.load_state_dict(loaded.state_dict())
        _restore_optimizer(opt, params, arrays, int(state["optimizer_step"]))
        loader.load_state_dict(state["loader"])
        ledger = TokenLedger.from_state(state["ledger"])
        records = [dict(r) for r in state["records"]]
        if loss_table is not None:
            loss_table.load_state_dict(
                {"decay": state["loss_decay"], "means": arrays["loss_means"], "counts": arrays["loss_counts"]}
            )

    log_file = None
    if log_path is not None:
        log_file = open(log_path, "w", encoding="utf-8")
        log_file.write("# " + "\t".join(LOG_COLUMNS) + "\n")
        for rec in records:
            log_file.write(format_record(rec) + "\n")

    def emit(rec: dict) -> None:
        records.append(rec)
        if log_file is not None:
            log_file.write(format_record(rec) + "\n")
            log_file.flush()

    def val_ppl() -> float | None:
        if val_corpus is None:
            return None
        return evaluate(model, val_corpus, max_samples=run.max_eval_samples)

    def wants_stop(rec: dict) -> bool:
        return on_eval is not None and rec.get("val_ppl") is not None and bool(on_eval(rec))

    n_layers = run.model.n_layers
    steps_taken = 0
    try:
        if resume_from is None and run.eval_at_start and val_corpus is not None:
            rec = {"step": 0, "consumed_tokens": 0.0, "val_ppl": val_ppl()}
            emit(rec)
            if wants_stop(rec):
                return TrainResult(model, ledger, records, loader.state.step)
        while ledger.consumed_tokens < run.token_budget:
            if max_steps is not None and steps_taken >= max_steps:
                break
            t = loader.state.step
            batch = loader.next_batch()
            s = batch.seq_len
            r_t = min(kept_len(t, run.ltd), s)
            lr = lr_at(ledger.consumed_tokens, run.lr)
            for g in opt.param_groups:
                g["lr"] = lr
            ctx = RoutingContext(run.ltd, t, run.seed, loss_table)
            opt.zero_grad(set_to_none=True)
            losses, mask, _ = token_losses(model, batch.tokens, batch.lengths, ctx)
            loss = losses.sum() / mask.sum()
            if not torch.isfinite(loss):
                ckpt = None
                if checkpoint_path is not None:
                    ckpt = Path(checkpoint_path)
                    save_training_state(ckpt, run, model, opt, loader, ledger, loss_table, records)
                raise TrainingDiverged(f"non-finite loss at step {t}", t, ckpt)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, GRAD_CLIP)
            opt.step()
            steps_taken += 1

            dense = batch.token_count == batch.batch_size * s
            tokens = effective_tokens(
                run.ltd, t, batch.batch_size, s, n_layers, None if dense else batch.token_count
            )
            if loss_table is not None:
                target_mask = mask.numpy()
                loss_table.update(batch.tokens[:, 1:][target_mask], losses.detach().numpy()[target_mask])
            before = ledger.consumed_tokens
            d_t = batch.state.threshold if batch.state.threshold is not None else s
            ledger.add(t, d_t, r_t, tokens)
            rec = {
                "step": t, "consumed_tokens": ledger.consumed_tokens, "d_t": d_t, "r_t": r_t,
                "lr": lr, "train_loss": loss.item(), "val_ppl": None,
            }
            done = ledger.consumed_tokens >= run.token_budget
            if _crossed(before, ledger.consumed_tokens, run.eval_interval_tokens) or done:
                rec["val_ppl"] = val_ppl()
            emit(rec)
            stop = wants_stop(rec)
            if checkpoint_path is not None and run.checkpoint_interval > 0 and (t + 1) % run.checkpoint_interval == 0:
                save_training_state(checkpoint_path, run, model, opt, loader, ledger, loss_table, records)
            if stop:
                break
    except NonFiniteLoss as e:
        raise TrainingDiverged(str(e), loader.state.step) from e
    finally:
        if log_file is not None:
            log_file.close()
    if checkpoint_path is not None:
        save_training_state(checkpoint_path, run, model, opt, loader, ledger, loss_table, records)
    return TrainResult(model, ledger, records, loader.state.step)
