"""Layer surgery: dense <-> factored slot rewrites and parameter accounting."""

from typing import Dict

import numpy as np

from ..errors import CorruptionError
from ..factorize import FactoredPair, progressive_step, truncated_factor
from ..planner import PlanStep, validate_step
from .checkpoint import Checkpoint


def _check_consistent(ckpt: Checkpoint):
    shapes = ckpt.graph.tensor_shapes()
    for name, arr in ckpt.tensors.items():
        if shapes.get(name) != arr.shape:
            raise CorruptionError(f"{name}: tensor shape {arr.shape} vs graph {shapes.get(name)}")


def factor_slots(ckpt: Checkpoint, ranks: Dict[str, int]) -> Checkpoint:
    """Factor dense slots with a truncated SVD and advance already-factored
    slots by one progressive step.  Other tensors are passed through as-is."""
    _check_consistent(ckpt)
    graph = ckpt.graph
    updates = {}
    for name, rank in ranks.items():
        if name in graph.ranks:
            pair = FactoredPair(ckpt[name + ".w0"], ckpt[name + ".w1"])
            pair = progressive_step(pair, rank)
        else:
            pair = truncated_factor(ckpt[name], rank)
        updates[name + ".w0"] = pair.w0
        updates[name + ".w1"] = pair.w1
    return ckpt.with_tensors(updates, graph=graph.with_ranks(ranks))


def apply_plan_step(ckpt: Checkpoint, step: PlanStep) -> Checkpoint:
    """Apply one schedule step to every targeted slot of every block."""
    targets = validate_step(ckpt.graph, step)
    return factor_slots(ckpt, targets)


def densify(ckpt: Checkpoint) -> Checkpoint:
    """Replace every factored slot by the dense product ``w0 @ w1``."""
    updates = {
        name: ckpt[name + ".w0"] @ ckpt[name + ".w1"] for name in ckpt.graph.ranks
    }
    return ckpt.with_tensors(updates, graph=ckpt.graph.dense())


def count_params(ckpt: Checkpoint) -> int:
    return int(sum(np.prod(a.shape, dtype=np.int64) for a in ckpt.tensors.values()))
