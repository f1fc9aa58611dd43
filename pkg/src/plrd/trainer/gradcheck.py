"""Analytic gradients versus central finite differences."""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..model.checkpoint import Checkpoint
from ..model.transformer import loss_and_grads

LossFn = Callable[[Dict[str, np.ndarray]], Tuple[float, Dict[str, np.ndarray]]]


@dataclass(frozen=True)
class Probe:
    tensor: str
    index: Tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    probes: Tuple[Probe, ...]
    frozen: Tuple[str, ...] = ()
    frozen_grads: Dict[str, Optional[np.ndarray]] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    @property
    def worst(self) -> List[Probe]:
        """Probes above tolerance, worst first."""
        bad = [p for p in self.probes if p.rel_error > self.tolerance]
        return sorted(bad, key=lambda p: -p.rel_error)

    def worst_tensors(self) -> List[str]:
        seen = []
        for p in self.worst:
            if p.tensor not in seen:
                seen.append(p.tensor)
        return seen

    def summary(self) -> str:
        status = "ok" if self.passed else "FAILED"
        line = (f"gradcheck {status}: {len(self.probes)} probes, "
                f"max rel error {self.max_rel_error:.3e} (tol {self.tolerance:.0e})")
        if not self.passed:
            line += "; worst tensors: " + ", ".join(self.worst_tensors())
        return line


def relative_error(a: float, n: float) -> float:
    """``|a - n| / max(|a|, |n|)``; 0 when both vanish."""
    scale = max(abs(a), abs(n))
    return 0.0 if scale == 0.0 else abs(a - n) / scale


def check_gradients(
    fn: LossFn,
    params: Dict[str, np.ndarray],
    n_params: int = 200,
    h: float = 1e-5,
    seed: int = 0,
    frozen: Sequence[str] = (),
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Probe ``n_params`` scalars drawn uniformly from the non-frozen tensors.

    ``fn(params)`` must return ``(loss, grads)`` and may omit frozen tensors
    from ``grads``; those are reported in ``frozen_grads`` as returned.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, grads = fn(params)
    frozen = tuple(k for k in params if k in set(frozen))
    live = [k for k in params if k not in frozen]
    sizes = np.array([params[k].size for k in live])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat = np.sort(rng.choice(total, size=min(n_params, total), replace=False))
    bounds = np.cumsum(sizes)
    probes = []
    for f in flat:
        t = int(np.searchsorted(bounds, f, side="right"))
        name = live[t]
        local = int(f - (bounds[t - 1] if t else 0))
        idx = np.unravel_index(local, params[name].shape)
        p = params[name]
        old = p[idx]
        p[idx] = old + h
        lp, _ = fn(params)
        p[idx] = old - h
        lm, _ = fn(params)
        p[idx] = old
        numeric = (lp - lm) / (2.0 * h)
        analytic = float(grads[name][idx])
        probes.append(Probe(name, tuple(int(i) for i in idx), analytic, numeric,
                            relative_error(analytic, numeric)))
    worst = max((p.rel_error for p in probes), default=0.0)
    return GradCheckReport(worst, tolerance, tuple(probes), frozen,
                           {k: grads.get(k) for k in frozen})


def grad_check(ckpt: Checkpoint, sample, tolerance: float = 1e-4, n_params: int = 200,
               seed: int = 0, frozen: Sequence[str] = (), h: float = 1e-5) -> GradCheckReport:
    """Finite-difference check of the micro-transformer on one batch.

    ``sample`` is ``(inputs, targets)`` token arrays.  Frozen tensors get no
    analytic gradient, matching what the trainer would update.
    """
    inputs, targets = sample
    frozen_set = set(frozen)

    def fn(params):
        loss, grads = loss_and_grads(ckpt.graph, params, inputs, targets)
        return loss, {k: v for k, v in grads.items() if k not in frozen_set}

    return check_gradients(fn, dict(ckpt.tensors), n_params=n_params, h=h, seed=seed,
                           frozen=tuple(frozen), tolerance=tolerance)
