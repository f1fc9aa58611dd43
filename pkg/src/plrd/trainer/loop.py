"""Recovery training and held-out evaluation."""

import fnmatch
import math
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import numpy as np

from ..errors import DivergenceError, InputError, ValidationError
from ..model.checkpoint import Checkpoint
from ..model.transformer import loss_and_grads, token_nll
from .corpus import Corpus, pack
from .optim import AdamW, clip_global_norm, linear_schedule


@dataclass(frozen=True)
class TrainConfig:
    """Defaults follow the recovery recipe: AdamW, 3% warmup, linear decay,
    one epoch, lr 2e-5, no weight decay, 512-token sequences.  Only the token
    budget is scaled down for desk-sized runs."""

    learning_rate: float = 2e-5
    warmup_ratio: float = 0.03
    schedule: str = "linear"
    epochs: int = 1
    weight_decay: float = 0.0
    max_seq_len: int = 512
    seed: int = 0
    token_budget: int = 50_000
    batch_size: int = 8
    optimizer: str = "adamw"
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    max_grad_norm: Optional[float] = 1.0
    frozen: Tuple[str, ...] = ()
    factored_only: bool = False
    data_offset: int = 0

    def __post_init__(self):
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValidationError("warmup_ratio must be in [0, 1)")
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be non-negative")
        if self.max_seq_len < 2:
            raise ValidationError("max_seq_len must be at least 2")
        if self.schedule != "linear":
            raise ValidationError(f"unknown schedule {self.schedule!r}")
        if self.optimizer != "adamw":
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be positive")
        if self.token_budget <= 0:
            raise ValidationError("token_budget must be positive")
        object.__setattr__(self, "frozen", tuple(self.frozen))
        object.__setattr__(self, "betas", tuple(self.betas))

    def is_frozen(self, name: str) -> bool:
        if self.factored_only and not name.endswith((".w0", ".w1")):
            return True
        return any(fnmatch.fnmatchcase(name, pat) for pat in self.frozen)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["frozen"] = list(self.frozen)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown train-config keys: {sorted(extra)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        if "frozen" in d:
            d["frozen"] = tuple(d["frozen"])
        return cls(**d)


@dataclass(frozen=True)
class EvalReport:
    cross_entropy: float
    perplexity: float
    tokens: int

    def to_dict(self) -> dict:
        return asdict(self)


def _window_order(n_windows: int, seed: int, start: int, count: int) -> np.ndarray:
    """Indices ``start .. start + count`` of an endless stream of seeded
    permutations of ``range(n_windows)``."""
    out = np.empty(count, dtype=np.int64)
    j, cycle_cache = start, {}
    for i in range(count):
        c, r = divmod(j, n_windows)
        if c not in cycle_cache:
            cycle_cache[c] = np.random.default_rng([seed, c]).permutation(n_windows)
        out[i] = cycle_cache[c][r]
        j += 1
    return out


def training_batches(corpus: Corpus, cfg: TrainConfig) -> List[np.ndarray]:
    """Packed ``(batch, seq_len + 1)`` windows for one call of :func:`train`.

    The budget buys ``token_budget // max_seq_len`` windows, taken from a
    seeded shuffle starting at ``data_offset`` windows in; incomplete batches
    are dropped.  Each epoch repeats the same windows in a new order.
    """
    windows = pack(corpus.stream("train"), cfg.max_seq_len)
    if len(windows) == 0:
        raise InputError("training split is shorter than one sequence")
    n_take = (cfg.token_budget // cfg.max_seq_len) // cfg.batch_size * cfg.batch_size
    if n_take == 0:
        raise InputError(
            f"token budget {cfg.token_budget} is smaller than one batch "
            f"({cfg.batch_size} x {cfg.max_seq_len})"
        )
    chosen = windows[_window_order(len(windows), cfg.seed, cfg.data_offset, n_take)]
    batches = []
    for epoch in range(cfg.epochs):
        order = np.arange(n_take)
        if epoch:
            order = np.random.default_rng([cfg.seed, 10_000 + epoch]).permutation(n_take)
        for i in range(0, n_take, cfg.batch_size):
            batches.append(chosen[order[i:i + cfg.batch_size]])
    return batches


def train(ckpt: Checkpoint, cfg: TrainConfig, corpus: Corpus) -> Tuple[Checkpoint, List[dict]]:
    """Run AdamW over the configured budget.  Returns the trained checkpoint
    and one record per optimizer step (step, lr, loss, grad_norm, tokens)."""
    graph = ckpt.graph
    if corpus.vocab_size > graph.vocab:
        raise InputError(f"corpus vocab {corpus.vocab_size} exceeds model vocab {graph.vocab}")
    if cfg.max_seq_len > graph.max_seq_len:
        raise InputError(
            f"max_seq_len {cfg.max_seq_len} exceeds the model context {graph.max_seq_len}"
        )
    batches = training_batches(corpus, cfg)
    params = {k: np.array(v) for k, v in ckpt.tensors.items()}
    trainable = [k for k in params if not cfg.is_frozen(k)]
    opt = AdamW({k: params[k] for k in trainable}, cfg.betas, cfg.eps, cfg.weight_decay)
    total = len(batches)
    trace, seen = [], 0
    for step, batch in enumerate(batches, start=1):
        loss, grads = loss_and_grads(graph, params, batch[:, :-1], batch[:, 1:])
        if not math.isfinite(loss):
            raise DivergenceError(step, loss)
        grads = {k: grads[k] for k in trainable}
        norm = clip_global_norm(grads, cfg.max_grad_norm)
        lr = linear_schedule(step, total, cfg.warmup_ratio, cfg.learning_rate)
        if trainable:
            opt.step(params, grads, lr)
        seen += batch[:, 1:].size
        trace.append({"step": step, "lr": lr, "loss": loss, "grad_norm": norm, "tokens": seen})
    for k in trainable:
        if not np.isfinite(params[k]).all():
            raise DivergenceError(total, float("nan"))
    return Checkpoint(graph, params), trace


def eval_windows(stream: np.ndarray, seq_len: int) -> List[np.ndarray]:
    """Non-overlapping windows covering every token; the tail is kept."""
    out = []
    for start in range(0, len(stream) - 1, seq_len):
        w = stream[start:start + seq_len + 1]
        if len(w) >= 2:
            out.append(w)
    return out


def evaluate(ckpt: Checkpoint, corpus, max_seq_len: Optional[int] = None,
             batch_size: int = 16) -> EvalReport:
    """Mean next-token cross-entropy over the held-out split (or over a raw
    token stream) and its exponential."""
    stream = corpus.stream("heldout") if isinstance(corpus, Corpus) else np.asarray(corpus)
    seq_len = min(max_seq_len or ckpt.graph.max_seq_len, ckpt.graph.max_seq_len)
    windows = eval_windows(stream, seq_len)
    if not windows:
        raise InputError("evaluation corpus is empty")
    total, count = 0.0, 0
    full = [w for w in windows if len(w) == seq_len + 1]
    tail = [w for w in windows if len(w) != seq_len + 1]
    for i in range(0, len(full), batch_size):
        chunk = np.stack(full[i:i + batch_size])
        nll = token_nll(ckpt, chunk[:, :-1], chunk[:, 1:])
        total += float(nll.sum())
        count += nll.size
    for w in tail:
        nll = token_nll(ckpt, w[None, :-1], w[None, 1:])
        total += float(nll.sum())
        count += nll.size
    ce = total / count
    return EvalReport(ce, math.exp(ce), count)
