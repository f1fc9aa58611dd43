"""Compression-ratio arithmetic and model-level rank schedules.

A schedule is a list of :class:`PlanStep`; each step names one rank for all
attention matrices and one for all MLP matrices, applied to every block.  A
missing rank means that module kind is left untouched in that step.  Under
shared-K/V attention (multi-query, and grouped-query by extension) only Q and
O are ever targeted.
"""

import hashlib
import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from .errors import InfeasibleBudgetError, PlanValidationError, RankError
from .graph import LayerSpec, ModelGraph

PLAN_FORMAT = "plrd-plan"
PLAN_VERSION = 1


def _check_rank(d_in, d_out, rank):
    if not 1 <= rank <= min(d_in, d_out):
        raise RankError(
            f"rank {rank} outside [1, {min(d_in, d_out)}] for a {d_in}x{d_out} layer"
        )


def compression_ratio_exact(d_in: int, d_out: int, rank: int) -> Fraction:
    _check_rank(d_in, d_out, rank)
    return Fraction(d_in * d_out, rank * (d_in + d_out))


def compression_ratio(d_in: int, d_out: int, rank: int) -> float:
    """``d_in * d_out / (rank * (d_in + d_out))``."""
    return float(compression_ratio_exact(d_in, d_out, rank))


def rank_for_budget(d_in: int, d_out: int, max_params: int) -> int:
    """Largest rank whose factored pair fits in ``max_params`` parameters."""
    if max_params < d_in + d_out:
        raise InfeasibleBudgetError(
            f"budget {max_params} below rank-1 cost {d_in + d_out} "
            f"for a {d_in}x{d_out} layer"
        )
    return max(1, min(max_params // (d_in + d_out), d_in, d_out))


@dataclass(frozen=True)
class PlanStep:
    step_index: int
    r_attn: Optional[int] = None
    r_mlp: Optional[int] = None
    token_budget: int = 0

    def __post_init__(self):
        if self.r_attn is None and self.r_mlp is None:
            raise PlanValidationError(
                f"step {self.step_index} sets neither r_attn nor r_mlp"
            )
        for r in (self.r_attn, self.r_mlp):
            if r is not None and r < 1:
                raise PlanValidationError(f"step {self.step_index} has rank {r} < 1")
        if self.token_budget < 0:
            raise PlanValidationError(f"step {self.step_index} has a negative token budget")

    def rank_for(self, layer: LayerSpec) -> Optional[int]:
        if not layer.compressible:
            return None
        if layer.module_kind.is_attention:
            return self.r_attn
        if layer.module_kind.is_mlp:
            return self.r_mlp
        return None

    def targets(self, graph: ModelGraph) -> Dict[str, int]:
        """Slot name -> rank for every slot this step touches on ``graph``."""
        out = {}
        for layer in graph.layers():
            r = self.rank_for(layer)
            if r is not None:
                out[layer.name] = r
        return out

    def describe(self) -> Dict[str, Union[int, str]]:
        return {
            "attention": "untouched" if self.r_attn is None else self.r_attn,
            "mlp": "untouched" if self.r_mlp is None else self.r_mlp,
        }

    def to_dict(self) -> dict:
        return {
            "step": self.step_index,
            "r_attn": self.r_attn,
            "r_mlp": self.r_mlp,
            "token_budget": self.token_budget,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlanStep":
        def opt(v):
            return None if v is None or v == "NA" else int(v)

        return cls(
            step_index=int(d["step"]),
            r_attn=opt(d.get("r_attn")),
            r_mlp=opt(d.get("r_mlp")),
            token_budget=int(d.get("token_budget", 0)),
        )


def validate_step(graph: ModelGraph, step: PlanStep) -> Dict[str, int]:
    """Targets of ``step`` on ``graph``; raises naming every offending layer."""
    targets = step.targets(graph)
    too_big, growing = [], []
    for layer in graph.layers():
        r = targets.get(layer.name)
        if r is None:
            continue
        if r > min(layer.d_in, layer.d_out):
            too_big.append(layer.name)
        elif layer.rank is not None and r > layer.rank:
            growing.append(layer.name)
    if too_big:
        raise PlanValidationError(
            f"step {step.step_index}: rank exceeds min(d_in, d_out)", too_big
        )
    if growing:
        raise PlanValidationError(
            f"step {step.step_index}: rank larger than current factored rank", growing
        )
    return targets


@dataclass(frozen=True)
class CompressionPlan:
    graph: ModelGraph
    steps: Tuple[PlanStep, ...]
    targets: Tuple[Dict[str, int], ...]
    predicted_params: Tuple[int, ...]
    notes: Tuple[str, ...] = ()

    @property
    def initial_params(self) -> int:
        return self.graph.param_count()

    def graph_after(self, k: int) -> ModelGraph:
        """Graph after the first ``k`` steps (``k = 0`` is the input graph)."""
        g = self.graph
        for t in self.targets[:k]:
            g = g.with_ranks(t)
        return g

    @property
    def final_graph(self) -> ModelGraph:
        return self.graph_after(len(self.steps))

    def to_dict(self) -> dict:
        return {
            "format": PLAN_FORMAT,
            "version": PLAN_VERSION,
            "graph": self.graph.to_dict(),
            "notes": list(self.notes),
            "steps": [s.to_dict() for s in self.steps],
            "predicted": [
                {
                    "step": s.step_index,
                    "params": p,
                    "aggregate_cr": float(flops_estimate(self.graph_after(i + 1)).aggregate_cr),
                    **s.describe(),
                }
                for i, (s, p) in enumerate(zip(self.steps, self.predicted_params))
            ],
        }

    def digest(self) -> str:
        """Hash over graph and steps only (predictions are derived)."""
        core = {"graph": self.graph.to_dict(), "steps": [s.to_dict() for s in self.steps]}
        return hashlib.sha256(
            json.dumps(core, sort_keys=True, separators=(",", ":")).encode()
        ).hexdigest()


def build_plan(graph: ModelGraph, steps: Sequence[PlanStep]) -> CompressionPlan:
    steps = tuple(steps)
    if not steps:
        raise PlanValidationError("plan has no steps")
    for i, s in enumerate(steps, start=1):
        if s.step_index != i:
            raise PlanValidationError(f"step indices must run 1..n, got {s.step_index} at {i}")
    last = {"r_attn": None, "r_mlp": None}
    for s in steps:
        for key in last:
            r = getattr(s, key)
            if r is None:
                continue
            if last[key] is not None and r > last[key]:
                raise PlanValidationError(
                    f"step {s.step_index}: {key} increases from {last[key]} to {r}"
                )
            last[key] = r

    notes = []
    if graph.attention_mode == "grouped":
        notes.append(
            "grouped-query attention treated like multi-query: K and V left dense"
        )
    g = graph
    all_targets, predicted = [], []
    for s in steps:
        t = validate_step(g, s)
        g = g.with_ranks(t)
        all_targets.append(t)
        predicted.append(g.param_count())
    return CompressionPlan(graph, steps, tuple(all_targets), tuple(predicted), tuple(notes))


def plan_from_dict(d: dict) -> CompressionPlan:
    if d.get("format") != PLAN_FORMAT:
        raise PlanValidationError(f"not a plan file (format={d.get('format')!r})")
    if d.get("version") != PLAN_VERSION:
        raise PlanValidationError(
            f"plan version {d.get('version')} unsupported (expected {PLAN_VERSION})"
        )
    graph = ModelGraph.from_dict(d["graph"])
    return build_plan(graph, [PlanStep.from_dict(s) for s in d["steps"]])


def save_plan(plan: CompressionPlan, path) -> None:
    Path(path).write_text(json.dumps(plan.to_dict(), indent=2) + "\n")


def load_plan(path) -> CompressionPlan:
    return plan_from_dict(json.loads(Path(path).read_text()))


def resolve_symbolic(value, d_model: int) -> Optional[int]:
    """Turn ``"3/8"`` (a fraction of ``d_model``) or an int into a rank."""
    if value is None or value == "NA":
        return None
    if isinstance(value, int):
        return value
    r = Fraction(value) * d_model
    if r.denominator != 1:
        raise PlanValidationError(f"{value} of d_model={d_model} is not an integer rank")
    return int(r)


def steps_from_schedule(schedule: dict, d_model: int) -> List[PlanStep]:
    """Steps from a schedule fixture whose ranks are fractions of ``d_model``."""
    return [
        PlanStep(
            step_index=int(s["step"]),
            r_attn=resolve_symbolic(s.get("r_attn"), d_model),
            r_mlp=resolve_symbolic(s.get("r_mlp"), d_model),
            token_budget=int(s.get("token_budget", 0)),
        )
        for s in schedule["steps"]
    ]


@dataclass(frozen=True)
class LayerStats:
    name: str
    d_in: int
    d_out: int
    rank: Optional[int]
    cr: Fraction
    params: int
    flops_dense: int
    flops: int


@dataclass(frozen=True)
class CompressionStats:
    """Parameter and per-token forward-cost accounting.

    FLOPs cover the FC slots only (``2 d_in d_out`` dense, ``2 R (d_in + d_out)``
    factored); the tied output head, embeddings and attention scores are shared
    by both forms and reported separately as ``head_flops``.
    """

    layers: Tuple[LayerStats, ...]
    params_before: int
    params_after: int
    aggregate_cr: Fraction
    flops_dense: int
    flops_factored: int
    head_flops: int

    @property
    def flops_ratio(self) -> float:
        if not self.flops_factored:
            return 1.0
        return float(Fraction(self.flops_dense, self.flops_factored))

    def to_dict(self) -> dict:
        return {
            "params_before": self.params_before,
            "params_after": self.params_after,
            "aggregate_cr": float(self.aggregate_cr),
            "flops_dense_per_token": self.flops_dense,
            "flops_factored_per_token": self.flops_factored,
            "flops_ratio": self.flops_ratio,
            "head_flops_per_token": self.head_flops,
            "layers": [
                {"name": l.name, "rank": l.rank, "cr": float(l.cr), "params": l.params}
                for l in self.layers
            ],
        }


def flops_estimate(graph_or_plan: Union[ModelGraph, CompressionPlan]) -> CompressionStats:
    """Accounting for a graph, or for a plan's final graph."""
    if isinstance(graph_or_plan, CompressionPlan):
        graph = graph_or_plan.final_graph
    else:
        graph = graph_or_plan
    stats = []
    for layer in graph.layers():
        dense_params = layer.d_in * layer.d_out
        if layer.rank is None:
            cr = Fraction(1)
        else:
            cr = compression_ratio_exact(layer.d_in, layer.d_out, layer.rank)
        stats.append(
            LayerStats(layer.name, layer.d_in, layer.d_out, layer.rank, cr,
                       layer.n_params, 2 * dense_params, 2 * layer.n_params)
        )
    dense_fc = sum(l.d_in * l.d_out for l in stats)
    now_fc = sum(l.params for l in stats)
    return CompressionStats(
        layers=tuple(stats),
        params_before=graph.dense().param_count(),
        params_after=graph.param_count(),
        aggregate_cr=Fraction(dense_fc, now_fc) if now_fc else Fraction(1),
        flops_dense=sum(l.flops_dense for l in stats),
        flops_factored=sum(l.flops for l in stats),
        head_flops=2 * graph.d_model * graph.vocab,
    )
