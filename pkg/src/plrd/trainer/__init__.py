from .corpus import EOS, Corpus, Grammar, make_corpus, pack
from .gradcheck import GradCheckReport, check_gradients, grad_check
from .loop import EvalReport, TrainConfig, evaluate, train, training_batches
from .optim import AdamW, linear_schedule

__all__ = [
    "EOS",
    "AdamW",
    "Corpus",
    "EvalReport",
    "GradCheckReport",
    "Grammar",
    "TrainConfig",
    "check_gradients",
    "evaluate",
    "grad_check",
    "linear_schedule",
    "make_corpus",
    "pack",
    "train",
    "training_batches",
]
