"""Deterministic dense linear algebra.

Matrices are plain 2-D ``float64`` numpy arrays.  :func:`as_matrix` is the
single entry point that enforces the shape and finiteness rules, so the rest
of the package can assume well-formed input.

The SVD is a one-sided (Hestenes) Jacobi iteration with a fixed round-robin
pair ordering.  It is slower than LAPACK but fully deterministic, accurate to
working precision for the small matrices used here, and comes with a fixed
sign convention so checkpoints produced from the same weights are
byte-identical.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ShapeError, SvdConvergenceError, ValidationError

DenseMatrix = np.ndarray

MAX_SWEEPS = 100
OFFDIAG_TOL = 1e-12
RANK_RTOL = 1e-12
NEGLIGIBLE = 1e-15


def as_matrix(w, name="matrix") -> DenseMatrix:
    """Return ``w`` as a C-contiguous float64 2-D array, validating it."""
    a = np.ascontiguousarray(w, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"{name} must have positive dimensions, got {a.shape}")
    if not np.isfinite(a).all():
        raise ValidationError(f"{name} contains NaN or Inf")
    return a


def matmul(a, b) -> DenseMatrix:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius_norm(w) -> float:
    a = as_matrix(w)
    return float(np.sqrt(np.sum(a * a)))


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``w = left @ diag(singular) @ right.T``.

    ``left`` is ``d_in x k`` and ``right`` is ``d_out x k`` with
    ``k = min(d_in, d_out)``.
    """

    left: DenseMatrix
    singular: np.ndarray
    right: DenseMatrix
    numerical_rank: int

    def reconstruct(self, rank=None) -> DenseMatrix:
        k = len(self.singular) if rank is None else rank
        return (self.left[:, :k] * self.singular[:k]) @ self.right[:, :k].T


@lru_cache(maxsize=64)
def _round_robin(n):
    """Pair schedule for ``n`` (even) columns: ``n - 1`` rounds of ``n / 2``
    disjoint pairs covering every pair exactly once (circle method)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        p = np.array([min(players[i], players[n - 1 - i]) for i in range(n // 2)])
        q = np.array([max(players[i], players[n - 1 - i]) for i in range(n // 2)])
        rounds.append((p, q))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _jacobi(a):
    """One-sided Jacobi on a tall matrix. Returns (A V, V, residual, sweeps)."""
    m, n = a.shape
    a = a.copy()
    if n % 2:
        a = np.hstack([a, np.zeros((m, 1))])
    n_even = a.shape[1]
    v = np.eye(n_even)
    if n_even == 1:
        return a, v, 0.0, 0
    rounds = _round_robin(n_even)
    # columns this small are rounding noise of a rank-deficient input; their
    # direction is arbitrary, so they are left alone rather than chased
    floor = (NEGLIGIBLE * n_even) ** 2 * float(np.einsum("ij,ij->", a, a))
    residual = np.inf
    for sweep in range(1, MAX_SWEEPS + 1):
        residual = 0.0
        for p, q in rounds:
            ap, aq = a[:, p], a[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            scale = np.sqrt(alpha * beta)
            with np.errstate(divide="ignore", invalid="ignore"):
                rel = np.where(scale > 0, np.abs(gamma) / scale, 0.0)
            active = (rel > OFFDIAG_TOL) & (np.minimum(alpha, beta) > floor)
            if not active.any():
                continue
            residual = max(residual, float(rel.max()))
            g = np.where(active, gamma, 1.0)
            zeta = np.where(active, (beta - alpha) / (2.0 * g), 0.0)
            t = np.sign(zeta) / (np.abs(zeta) + np.hypot(1.0, zeta))
            t[zeta == 0.0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)
            a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if residual == 0.0:
            return a[:, :n], v[:n, :n], 0.0, sweep
    raise SvdConvergenceError(MAX_SWEEPS, residual)


def _complete_orthonormal(u, k):
    """Replace columns ``k:`` of ``u`` with an orthonormal completion built
    deterministically from the standard basis."""
    m, n = u.shape
    basis = [u[:, j] for j in range(k)]
    out = [*basis]
    e = 0
    while len(out) < n:
        x = np.zeros(m)
        x[e] = 1.0
        e += 1
        for _ in range(2):
            for b in out:
                x = x - (b @ x) * b
        nrm = np.linalg.norm(x)
        if nrm > 1e-8:
            out.append(x / nrm)
    return np.stack(out, axis=1)


def _fix_signs(left, right):
    idx = np.argmax(np.abs(left), axis=0)
    signs = np.where(left[idx, np.arange(left.shape[1])] < 0, -1.0, 1.0)
    return left * signs, right * signs


def svd(w) -> SvdFactors:
    """Thin SVD with singular values sorted non-increasing.

    Sign convention: in every left singular vector the entry of largest
    magnitude (lowest index on ties) is non-negative.
    """
    a = as_matrix(w, "w")
    rows, cols = a.shape
    transposed = rows < cols
    if transposed:
        a = a.T
    # work at unit scale so column inner products cannot under/overflow
    amax = float(np.max(np.abs(a)))
    if amax > 0:
        a = a / amax
    q = None
    if a.shape[0] > a.shape[1]:
        # Jacobi on the square triangular factor is cheaper per sweep
        q, a = np.linalg.qr(a)
    av, v, _, _ = _jacobi(a)
    if q is not None:
        av = q @ av
    sigma = np.sqrt(np.einsum("ij,ij->j", av, av))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    av = av[:, order]
    v = v[:, order]
    if amax > 0:
        sigma = sigma * amax

    tol = max(rows, cols) * (sigma[0] if sigma.size else 0.0) * RANK_RTOL
    r = int(np.count_nonzero(sigma > tol))
    u = np.zeros_like(av)
    u[:, :r] = av[:, :r] / (sigma[:r] / amax)
    if r < u.shape[1]:
        u = _complete_orthonormal(u, r)

    left, right = _fix_signs(*((v, u) if transposed else (u, v)))
    return SvdFactors(
        left=np.ascontiguousarray(left),
        singular=sigma,
        right=np.ascontiguousarray(right),
        numerical_rank=r,
    )
