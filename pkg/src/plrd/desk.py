"""Desk-scale recovery experiment: progressive versus single-shot compression.

A ~0.5M-parameter model is pretrained on the synthetic corpus, then compressed
to the same final ranks two ways with the same total recovery budget:

* progressive: two plan steps, each followed by recovery training;
* single-shot: one truncation straight to the final ranks, then recovery
  training on all of the tokens the progressive run used.

Both recoveries read the same training windows in the same order.
"""

import statistics
from dataclasses import asdict, dataclass, replace
from typing import List, Optional, Sequence

from .graph import ModelGraph, desk_graph
from .model import apply_plan_step, count_params, factor_slots, init_checkpoint
from .model.checkpoint import Checkpoint
from .planner import PlanStep, build_plan, flops_estimate
from .trainer import Corpus, TrainConfig, evaluate, make_corpus, train

# final ranks halve every compressible matrix of the desk graph:
# 128x128 at 32 and 128x384 / 384x128 at 48
DESK_STEPS = (PlanStep(1, r_mlp=64), PlanStep(2, r_attn=32, r_mlp=48))


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 1000
    batch_size: int = 8
    seq_len: int = 128
    learning_rate: float = 3e-3
    corpus_tokens: int = 1_200_000

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, max_seq_len=self.seq_len,
            batch_size=self.batch_size, seed=seed,
            token_budget=self.steps * self.batch_size * self.seq_len,
        )


@dataclass(frozen=True)
class DeskResult:
    seed: int
    dense_ppl: float
    progressive_ppl: float
    single_shot_ppl: float
    progressive_untrained_ppl: float
    single_shot_untrained_ppl: float
    params_dense: int
    params_final: int
    compressible_reduction: float

    @property
    def relative_gap(self) -> float:
        return self.progressive_ppl / self.dense_ppl - 1.0

    def to_dict(self) -> dict:
        return {**asdict(self), "relative_gap": self.relative_gap}


def pretrain(graph: ModelGraph, corpus: Corpus, seed: int,
             cfg: PretrainConfig = PretrainConfig()) -> Checkpoint:
    ckpt, _ = train(init_checkpoint(graph, seed), cfg.train_config(seed), corpus)
    return ckpt


def compare(base: Checkpoint, corpus: Corpus, recovery: TrainConfig,
            steps: Sequence[PlanStep] = DESK_STEPS, seed: int = 0) -> DeskResult:
    """Run both arms from ``base``; ``recovery.token_budget`` is per step."""
    seq = recovery.max_seq_len
    plan = build_plan(base.graph, steps)
    per_step = (recovery.token_budget // seq) // recovery.batch_size * recovery.batch_size

    ckpt = base
    offset = recovery.data_offset
    untrained = None
    for step in plan.steps:
        ckpt = apply_plan_step(ckpt, step)
        untrained = ckpt
        ckpt, _ = train(ckpt, replace(recovery, data_offset=offset), corpus)
        offset += per_step
    progressive = ckpt

    final = plan.final_graph
    single = factor_slots(base, final.ranks)
    single_trained, _ = train(single, replace(
        recovery, token_budget=per_step * seq * len(plan.steps)), corpus)

    stats = flops_estimate(final)
    fc_dense = sum(l.d_in * l.d_out for l in stats.layers)
    fc_now = sum(l.params for l in stats.layers)

    def ppl(c):
        return evaluate(c, corpus, max_seq_len=seq).perplexity

    return DeskResult(
        seed=seed,
        dense_ppl=ppl(base),
        progressive_ppl=ppl(progressive),
        single_shot_ppl=ppl(single_trained),
        progressive_untrained_ppl=ppl(untrained),
        single_shot_untrained_ppl=ppl(single),
        params_dense=count_params(base),
        params_final=count_params(progressive),
        compressible_reduction=1.0 - fc_now / fc_dense,
    )


def run_seed(seed: int, recovery: Optional[TrainConfig] = None,
             pre: PretrainConfig = PretrainConfig(), graph: Optional[ModelGraph] = None,
             steps: Sequence[PlanStep] = DESK_STEPS) -> DeskResult:
    """Pretrain on a fresh corpus for ``seed`` and compare both arms.

    Recovery defaults to the standard recipe at the pretraining sequence
    length, reading the windows that follow the pretraining ones.
    """
    graph = graph or desk_graph(max_seq_len=pre.seq_len)
    corpus = make_corpus(seed, pre.corpus_tokens, vocab_size=graph.vocab)
    base = pretrain(graph, corpus, seed, pre)
    if recovery is None:
        recovery = TrainConfig(max_seq_len=pre.seq_len, batch_size=pre.batch_size, seed=seed)
    # continue the pretraining stream instead of replaying it
    recovery = replace(recovery, data_offset=pre.steps * pre.batch_size)
    return compare(base, corpus, recovery, steps, seed)


def summarize(results: List[DeskResult]) -> dict:
    return {
        "median_dense_ppl": statistics.median(r.dense_ppl for r in results),
        "median_progressive_ppl": statistics.median(r.progressive_ppl for r in results),
        "median_single_shot_ppl": statistics.median(r.single_shot_ppl for r in results),
        "median_relative_gap": statistics.median(r.relative_gap for r in results),
    }
