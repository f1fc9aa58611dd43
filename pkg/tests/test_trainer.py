import math

import numpy as np
import pytest

from plrd.errors import DivergenceError, InputError, ValidationError
from plrd.graph import toy_graph
from plrd.model import factor_slots, init_checkpoint, zero_checkpoint
from plrd.trainer import (
    Corpus,
    TrainConfig,
    check_gradients,
    evaluate,
    grad_check,
    linear_schedule,
    make_corpus,
    pack,
    train,
    training_batches,
)
from plrd.trainer.loop import eval_windows


@pytest.fixture(scope="module")
def corpus():
    return make_corpus(0, 60_000, vocab_size=64)


@pytest.fixture(scope="module")
def toy():
    return init_checkpoint(toy_graph(), seed=1)


def small_cfg(**kw):
    base = dict(max_seq_len=32, token_budget=4096, batch_size=8, learning_rate=1e-3)
    base.update(kw)
    return TrainConfig(**base)


# -- corpus -----------------------------------------------------------------

def test_corpus_deterministic():
    a, b = make_corpus(5, 5000), make_corpus(5, 5000)
    assert np.array_equal(a.stream("train"), b.stream("train"))
    assert np.array_equal(a.stream("heldout"), b.stream("heldout"))
    assert not np.array_equal(make_corpus(6, 5000).stream("train")[:200], a.stream("train")[:200])


def test_corpus_splits_disjoint(corpus):
    train = {s.tobytes() for s in corpus.train}
    assert not any(s.tobytes() in train for s in corpus.heldout)
    assert corpus.n_tokens("heldout") >= 6000


def test_corpus_vocabulary_is_rich(corpus):
    counts = np.bincount(corpus.stream("train"), minlength=64)
    assert np.count_nonzero(counts) > 10
    assert corpus.stream("train").max() < 64
    # Zipfian, not uniform: the top symbol is much more frequent than the median
    assert counts.max() > 5 * np.median(counts[counts > 0])


def test_corpus_bad_size():
    with pytest.raises(InputError):
        make_corpus(0, 0)


def test_pack_drops_tail():
    w = pack(np.arange(11), 4)
    assert w.tolist() == [[0, 1, 2, 3, 4], [4, 5, 6, 7, 8]]


def test_eval_windows_keep_tail():
    ws = eval_windows(np.arange(11), 4)
    assert [len(w) for w in ws] == [5, 5, 3]


def test_batches_cover_budget_and_shift_with_offset(corpus):
    cfg = small_cfg(token_budget=4096)
    batches = training_batches(corpus, cfg)
    assert len(batches) == 16 and batches[0].shape == (8, 33)
    shifted = training_batches(corpus, small_cfg(token_budget=4096, data_offset=128))
    assert not any(np.array_equal(a, b) for a, b in zip(batches, shifted))


# -- config -----------------------------------------------------------------

def test_defaults_follow_recovery_recipe():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.warmup_ratio, cfg.schedule, cfg.epochs,
            cfg.weight_decay, cfg.max_seq_len, cfg.optimizer) == (
        2e-5, 0.03, "linear", 1, 0.0, 512, "adamw")
    assert cfg.token_budget == 50_000


@pytest.mark.parametrize("kw", [dict(warmup_ratio=1.0), dict(warmup_ratio=-0.1),
                                dict(max_seq_len=1), dict(learning_rate=-1.0),
                                dict(token_budget=0)])
def test_config_validation(kw):
    with pytest.raises(ValidationError):
        TrainConfig(**kw)


def test_config_round_trip():
    cfg = TrainConfig(frozen=("tok_emb",), betas=(0.8, 0.9))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValidationError):
        TrainConfig.from_dict({"lr": 1.0})


# -- training ---------------------------------------------------------------

def test_zero_lr_is_identity(toy, corpus):
    out, trace = train(toy, small_cfg(learning_rate=0.0), corpus)
    assert len(trace) == 16
    for name in toy.tensors:
        assert out[name].tobytes() == toy[name].tobytes()


def test_all_frozen_keeps_weights_and_trace(toy, corpus):
    out, trace = train(toy, small_cfg(frozen=("*",)), corpus)
    assert all(out[n].tobytes() == toy[n].tobytes() for n in toy.tensors)
    assert len(trace) == 16 and all(math.isfinite(r["loss"]) for r in trace)


def test_partial_freeze(toy, corpus):
    out, _ = train(toy, small_cfg(frozen=("tok_emb", "*norm")), corpus)
    assert out["tok_emb"].tobytes() == toy["tok_emb"].tobytes()
    assert out["final_norm"].tobytes() == toy["final_norm"].tobytes()
    assert out["blocks.0.attn.q"].tobytes() != toy["blocks.0.attn.q"].tobytes()


def test_factored_only(corpus):
    c = factor_slots(init_checkpoint(toy_graph(), seed=2), {"blocks.0.mlp.up": 8})
    out, _ = train(c, small_cfg(factored_only=True), corpus)
    for name in c.tensors:
        changed = out[name].tobytes() != c[name].tobytes()
        assert changed == name.startswith("blocks.0.mlp.up.")


def test_loss_decreases_median_of_three_seeds():
    # default recipe (lr 2e-5), 50k tokens on the toy model
    drops = []
    for seed in range(3):
        corpus = make_corpus(seed, 60_000, vocab_size=64)
        ckpt = init_checkpoint(toy_graph(), seed=seed)
        before = evaluate(ckpt, corpus).cross_entropy
        out, trace = train(ckpt, TrainConfig(max_seq_len=32, seed=seed), corpus)
        assert trace[-1]["tokens"] <= 50_000
        drops.append(before - evaluate(out, corpus).cross_entropy)
    assert np.median(drops) > 0


def test_seeded_traces_bit_identical(toy, corpus):
    _, a = train(toy, small_cfg(seed=4), corpus)
    _, b = train(toy, small_cfg(seed=4), corpus)
    assert a == b
    _, c = train(toy, small_cfg(seed=5), corpus)
    assert [r["loss"] for r in a] != [r["loss"] for r in c]


def test_trace_follows_warmup_and_decay(toy, corpus):
    cfg = small_cfg(token_budget=32 * 8 * 100, warmup_ratio=0.03, learning_rate=2e-5)
    _, trace = train(toy, cfg, corpus)
    total = len(trace)
    warm = math.ceil(0.03 * total)
    assert (total, warm) == (100, 3)
    for r in trace:
        t = r["step"]
        want = 2e-5 * t / warm if t <= warm else 2e-5 * (total - t) / (total - warm)
        assert r["lr"] == pytest.approx(want, rel=1e-12, abs=1e-20)
    assert trace[-1]["lr"] == 0.0
    assert max(r["lr"] for r in trace) == pytest.approx(2e-5)


def test_schedule_function():
    assert linear_schedule(1, 10, 0.2, 1.0) == 0.5
    assert linear_schedule(2, 10, 0.2, 1.0) == 1.0
    assert linear_schedule(6, 10, 0.2, 1.0) == 0.5
    assert linear_schedule(10, 10, 0.2, 1.0) == 0.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_step(toy, corpus):
    with pytest.raises(DivergenceError) as err:
        train(toy, small_cfg(learning_rate=1e300, max_grad_norm=None), corpus)
    assert err.value.step >= 1


def test_budget_smaller_than_batch(toy, corpus):
    with pytest.raises(InputError):
        train(toy, small_cfg(token_budget=100), corpus)


def test_vocab_mismatch(toy):
    with pytest.raises(InputError):
        train(toy, small_cfg(), make_corpus(0, 5000, vocab_size=96))


# -- evaluation -------------------------------------------------------------

def test_uniform_logits_give_log_vocab(corpus):
    report = evaluate(zero_checkpoint(toy_graph()), corpus)
    assert report.cross_entropy == pytest.approx(math.log(64), abs=1e-12)
    assert report.perplexity == pytest.approx(64.0, rel=1e-12)
    assert report.tokens == corpus.n_tokens("heldout") - 1


def test_eval_repeatable(toy, corpus):
    assert evaluate(toy, corpus) == evaluate(toy, corpus)


def test_eval_full_rank_clone(toy, corpus):
    full = {l.name: min(l.d_in, l.d_out) for l in toy.graph.layers()}
    a = evaluate(toy, corpus).perplexity
    b = evaluate(factor_slots(toy, full), corpus).perplexity
    assert abs(a - b) <= 1e-6


def test_eval_empty(toy):
    with pytest.raises(InputError):
        evaluate(toy, Corpus((), (), 64))


# -- gradient checks --------------------------------------------------------

def test_gradcheck_linear_model():
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((20, 5)), rng.standard_normal((20, 3))

    def fn(p):
        r = x @ p["w"] + p["b"] - y
        return 0.5 * float(np.sum(r * r)), {"w": x.T @ r, "b": r.sum(axis=0)}

    params = {"w": rng.standard_normal((5, 3)), "b": rng.standard_normal(3)}
    report = check_gradients(fn, params, n_params=18, tolerance=1e-7)
    assert report.passed and report.max_rel_error <= 1e-7
    assert len(report.probes) == 18


def test_gradcheck_micro_transformer():
    from plrd.graph import ModelGraph

    g = ModelGraph(vocab=24, d_model=16, n_heads=2, d_ff=40, n_layers=2, max_seq_len=8,
                   ranks={"blocks.0.mlp.up": 4, "blocks.1.attn.q": 3})
    ckpt = init_checkpoint(g, seed=0, std=0.3)
    rng = np.random.default_rng(1)
    seq = rng.integers(0, 24, (2, 9))
    report = grad_check(ckpt, (seq[:, :-1], seq[:, 1:]), tolerance=1e-4, n_params=200)
    assert len(report.probes) == 200
    assert report.passed, report.summary()


def test_gradcheck_frozen_tensors_absent():
    g = toy_graph(vocab=16, d_model=8, n_heads=2, d_ff=12, n_layers=1, max_seq_len=6)
    ckpt = init_checkpoint(g, seed=0, std=0.3)
    seq = np.random.default_rng(0).integers(0, 16, (1, 7))
    report = grad_check(ckpt, (seq[:, :-1], seq[:, 1:]), n_params=50,
                        frozen=("tok_emb", "final_norm"))
    assert report.frozen_grads == {"tok_emb": None, "final_norm": None}
    assert all(p.tensor not in ("tok_emb", "final_norm") for p in report.probes)


def test_gradcheck_failure_lists_tensors():
    def fn(p):
        return float(np.sum(p["a"] ** 2) + np.sum(p["b"] ** 2)), {"a": 2 * p["a"], "b": 3 * p["b"]}

    report = check_gradients(fn, {"a": np.ones(4), "b": np.ones(4)}, n_params=8)
    assert not report.passed
    assert report.worst_tensors() == ["b"]
    assert "b" in report.summary()
