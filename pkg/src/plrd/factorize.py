"""Truncated SVD factorization of a single FC weight and the progressive
re-factor-and-merge step.

A dense ``d_in x d_out`` weight ``W`` is replaced by ``W0 @ W1`` with
``W0 = U' sqrt(S')`` (``d_in x R``) and ``W1 = sqrt(S') V'^T`` (``R x d_out``).
A progressive step never adds a third factor: it factors ``W1`` again at a
smaller rank and folds the left half into ``W0``.
"""

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from .errors import RankError, ShapeError, ValidationError
from .linalg import DenseMatrix, SvdFactors, as_matrix, svd


@dataclass(frozen=True)
class FactoredPair:
    w0: DenseMatrix
    w1: DenseMatrix

    def __post_init__(self):
        w0 = as_matrix(self.w0, "w0")
        w1 = as_matrix(self.w1, "w1")
        if w0.shape[1] != w1.shape[0]:
            raise ShapeError(f"inner dimensions differ: {w0.shape} vs {w1.shape}")
        r = w0.shape[1]
        if r > min(w0.shape[0], w1.shape[1]):
            raise RankError(
                f"rank {r} exceeds min(d_in, d_out) = {min(w0.shape[0], w1.shape[1])}"
            )
        object.__setattr__(self, "w0", w0)
        object.__setattr__(self, "w1", w1)

    @property
    def rank(self) -> int:
        return self.w0.shape[1]

    @property
    def d_in(self) -> int:
        return self.w0.shape[0]

    @property
    def d_out(self) -> int:
        return self.w1.shape[1]

    @property
    def n_params(self) -> int:
        return self.rank * (self.d_in + self.d_out)

    def product(self) -> DenseMatrix:
        return self.w0 @ self.w1


def _check_rank(rank, d_in, d_out):
    if isinstance(rank, bool) or not isinstance(rank, (int, np.integer)):
        raise RankError(f"rank must be an integer, got {rank!r}")
    if not 1 <= rank <= min(d_in, d_out):
        raise RankError(
            f"rank {rank} outside [1, {min(d_in, d_out)}] for a {d_in}x{d_out} layer"
        )


def truncated_factor(w, rank: int, factors: Optional[SvdFactors] = None) -> FactoredPair:
    """Best rank-``rank`` approximation of ``w`` split as ``U' sqrt(S')``,
    ``sqrt(S') V'^T``.

    Zero singular values inside the kept block give zero columns; the rank is
    never reduced silently.  Pass ``factors = svd(w)`` to truncate one matrix
    at several ranks without repeating the decomposition.
    """
    w = as_matrix(w, "w")
    _check_rank(rank, *w.shape)
    f = svd(w) if factors is None else factors
    if f.left.shape[0] != w.shape[0] or f.right.shape[0] != w.shape[1]:
        raise ShapeError("factors do not belong to a matrix of this shape")
    root = np.sqrt(f.singular[:rank])
    w0 = f.left[:, :rank] * root
    w1 = root[:, None] * f.right[:, :rank].T
    return FactoredPair(w0, w1)


def progressive_step(pair: FactoredPair, new_rank: int) -> FactoredPair:
    """Factor ``pair.w1`` at ``new_rank`` and merge its left half into ``w0``."""
    if new_rank > pair.rank:
        raise RankError(f"new rank {new_rank} exceeds current rank {pair.rank}")
    _check_rank(new_rank, pair.d_in, pair.d_out)
    inner = truncated_factor(pair.w1, new_rank)
    return FactoredPair(pair.w0 @ inner.w0, inner.w1)


@dataclass(frozen=True)
class ProgressiveConfig:
    """``initial_rank`` R0 and shrink factor ``0 < alpha < 1``.

    The loop stops once the rank reaches ``target_rank`` (ranks are clamped so
    the target is hit exactly) or the layer compression ratio reaches
    ``target_ratio``; with neither set it runs down to rank 1.
    """

    initial_rank: int
    alpha: float
    target_rank: Optional[int] = None
    target_ratio: Optional[float] = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.initial_rank < 1:
            raise RankError(f"initial rank must be positive, got {self.initial_rank}")
        if self.target_rank is not None and self.target_rank < 1:
            raise RankError(f"target rank must be positive, got {self.target_rank}")
        if self.target_ratio is not None and self.target_ratio <= 0:
            raise ValidationError(f"target ratio must be positive, got {self.target_ratio}")

    def satisfied(self, rank, d_in, d_out) -> bool:
        if self.target_rank is not None and rank <= self.target_rank:
            return True
        if self.target_ratio is not None:
            return d_in * d_out >= self.target_ratio * rank * (d_in + d_out)
        return False

    def next_rank(self, rank) -> int:
        # guard against alpha * R landing a hair below an integer
        r = max(1, math.floor(self.alpha * rank + 1e-9))
        if self.target_rank is not None:
            r = max(r, self.target_rank)
        return r


@dataclass(frozen=True)
class TraceEntry:
    step: int
    rank: int
    error: float
    n_params: int


Recover = Callable[[FactoredPair, int], FactoredPair]


def _identity(pair, step):
    return pair


def run_progressive(
    w, cfg: ProgressiveConfig, recover: Recover = _identity
) -> Tuple[FactoredPair, List[TraceEntry]]:
    """Decompose ``w`` at ``cfg.initial_rank``, then shrink ``R <- floor(alpha R)``
    until ``R == 1`` or the stop condition holds, calling ``recover`` after
    every factorization.

    Returns the final pair and a trace of (step, rank, Frobenius error of the
    pair against ``w``, parameter count), recorded after each recovery.
    """
    w = as_matrix(w, "w")
    d_in, d_out = w.shape

    def record(step, p):
        err = float(np.linalg.norm(w - p.product()))
        trace.append(TraceEntry(step, p.rank, err, p.n_params))

    trace: List[TraceEntry] = []
    pair = recover(truncated_factor(w, cfg.initial_rank), 0)
    record(0, pair)
    rank = pair.rank
    step = 0
    while rank > 1 and not cfg.satisfied(rank, d_in, d_out):
        step += 1
        rank = cfg.next_rank(rank)
        pair = recover(progressive_step(pair, rank), step)
        record(step, pair)
    return pair, trace
