"""Independent reference computations used to derive frozen test values.

None of these touch the package's SVD; they work on the Gram matrix
``w.T @ w`` through its characteristic polynomial or power iteration.
"""

import numpy as np


def charpoly_3x3(a):
    """Coefficients of ``det(lambda I - a)`` for a 3x3 matrix, highest first."""
    tr = a[0, 0] + a[1, 1] + a[2, 2]
    minors = (a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
              + a[0, 0] * a[2, 2] - a[0, 2] * a[2, 0]
              + a[1, 1] * a[2, 2] - a[1, 2] * a[2, 1])
    det = (a[0, 0] * (a[1, 1] * a[2, 2] - a[1, 2] * a[2, 1])
           - a[0, 1] * (a[1, 0] * a[2, 2] - a[1, 2] * a[2, 0])
           + a[0, 2] * (a[1, 0] * a[2, 1] - a[1, 1] * a[2, 0]))
    return np.array([1.0, -tr, minors, -det])


def newton_polish(coeffs, x, iters=50):
    p = np.poly1d(coeffs)
    dp = p.deriv()
    for _ in range(iters):
        d = dp(x)
        if d == 0:
            break
        x = x - p(x) / d
    return x


def singular_values_charpoly(w):
    """Singular values of a matrix with 3 columns via the Gram charpoly."""
    g = w.T @ w
    roots = np.roots(charpoly_3x3(g)).real
    roots = np.array([newton_polish(charpoly_3x3(g), r) for r in roots])
    return np.sqrt(np.clip(np.sort(roots)[::-1], 0.0, None))


def gram_eigs_power(w, iters=20000, seed=0):
    """Eigenvalues of ``w.T @ w`` by power iteration with deflation."""
    g = w.T @ w
    n = g.shape[0]
    rng = np.random.default_rng(seed)
    vals, vecs = [], []
    for _ in range(n):
        x = rng.standard_normal(n)
        for _ in range(iters):
            for v in vecs:
                x = x - (v @ x) * v
            y = g @ x
            nrm = np.linalg.norm(y)
            if nrm == 0:
                break
            x = y / nrm
        vals.append(float(x @ g @ x))
        vecs.append(x)
    return np.sort(np.array(vals))[::-1]


def eckart_young_error(w, rank):
    """Optimal rank-``rank`` Frobenius error from the Gram spectrum."""
    eig = np.sort(np.linalg.eigvalsh(w.T @ w if w.shape[0] >= w.shape[1] else w @ w.T))[::-1]
    return float(np.sqrt(np.clip(eig[rank:], 0.0, None).sum()))
