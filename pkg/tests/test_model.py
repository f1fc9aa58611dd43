import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import pytest

from plrd.errors import (
    ChecksumError,
    CorruptionError,
    FormatError,
    InputError,
    PayloadLengthError,
    PlanValidationError,
    VersionError,
)
from plrd.graph import ModelGraph, toy_graph
from plrd.model import (
    Checkpoint,
    apply_plan_step,
    count_params,
    densify,
    factor_slots,
    forward,
    init_checkpoint,
    load,
    save,
    zero_checkpoint,
)
from plrd.planner import PlanStep, build_plan

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN_SHA256 = "77c4da8bfa89281d139c89e57413d77e19ceeabdd4522ac7783d61ce45b2b6bc"


def tiny_graph(**kw):
    cfg = dict(vocab=3, d_model=4, n_heads=1, d_ff=6, n_layers=1, max_seq_len=2)
    cfg.update(kw)
    return ModelGraph(**cfg)


def golden_tensors(graph):
    return {
        n: ((np.arange(int(np.prod(s))) + i) % 7 - 3).reshape(s) * 0.125
        for i, (n, s) in enumerate(graph.tensor_shapes().items())
    }


@pytest.fixture(scope="module")
def toy():
    return init_checkpoint(toy_graph(), seed=3)


# -- checkpoint format ------------------------------------------------------

def test_round_trip_byte_identical(tmp_path, toy):
    path = tmp_path / "a.plrd"
    digest = save(toy, path)
    again = load(path)
    assert hashlib.sha256(again.to_bytes()).hexdigest() == digest
    for name in toy.tensors:
        assert np.array_equal(again[name], toy[name].astype(np.float32))


def test_float64_round_trip_is_exact(tmp_path, toy):
    save(toy, tmp_path / "a.plrd", dtype="float64")
    again = load(tmp_path / "a.plrd")
    assert all(np.array_equal(again[n], toy[n]) for n in toy.tensors)
    assert again.to_bytes("float64") == toy.to_bytes("float64")


def test_factored_round_trip(tmp_path, toy):
    c = apply_plan_step(toy, PlanStep(1, r_mlp=8))
    save(c, tmp_path / "f.plrd", dtype="float64")
    again = load(tmp_path / "f.plrd")
    assert again.graph == c.graph
    assert np.array_equal(again["blocks.1.mlp.down.w1"], c["blocks.1.mlp.down.w1"])


def test_truncated_file(tmp_path, toy):
    data = toy.to_bytes()
    with pytest.raises(PayloadLengthError) as err:
        Checkpoint.from_bytes(data[:-100])
    assert err.value.expected == len(data)
    with pytest.raises(PayloadLengthError):
        Checkpoint.from_bytes(data[:10])


def test_unknown_version(toy):
    data = bytearray(toy.to_bytes())
    struct.pack_into("<I", data, 8, 99)
    with pytest.raises(VersionError) as err:
        Checkpoint.from_bytes(bytes(data))
    assert "99" in str(err.value) and "1" in str(err.value)


def test_bad_magic(toy):
    with pytest.raises(FormatError):
        Checkpoint.from_bytes(b"NOTPLRD!" + toy.to_bytes()[8:])


def test_flipped_payload_byte(toy):
    data = bytearray(toy.to_bytes())
    data[len(data) // 2] ^= 0x01
    with pytest.raises(ChecksumError):
        Checkpoint.from_bytes(bytes(data))


def test_trailing_bytes(toy):
    with pytest.raises(FormatError):
        Checkpoint.from_bytes(toy.to_bytes() + b"\0")


def test_missing_tensor_rejected(toy):
    tensors = dict(toy.tensors)
    del tensors["final_norm"]
    with pytest.raises(CorruptionError):
        Checkpoint(toy.graph, tensors)


def test_nonfinite_rejected(toy):
    bad = np.array(toy["final_norm"])
    bad[0] = np.nan
    with pytest.raises(CorruptionError):
        toy.replace(final_norm=bad)


def test_tensors_are_read_only(toy):
    with pytest.raises(ValueError):
        toy["final_norm"][0] = 2.0


def test_golden_fixture_decodes():
    raw = (FIXTURES / "golden.plrd").read_bytes()
    assert hashlib.sha256(raw).hexdigest() == GOLDEN_SHA256
    # decode the prefix by hand, independent of the reader
    magic, version, hlen = struct.unpack_from("<8sIQ", raw)
    assert magic == b"PLRDCKPT" and version == 1
    header = json.loads(raw[20:20 + hlen])
    assert header["graph"]["ranks"] == {"blocks.0.mlp.up": 2}
    assert all(e["offset"] % 64 == 0 and e["dtype"] == "float32" for e in header["tensors"])
    assert hashlib.sha256(raw[:-32]).digest() == raw[-32:]

    ckpt = load(FIXTURES / "golden.plrd")
    expected = golden_tensors(ckpt.graph)
    assert list(ckpt.tensors) == list(expected)
    for name, arr in expected.items():
        assert np.array_equal(ckpt[name], arr)
    assert ckpt.to_bytes() == raw


def test_golden_fixture_writer_is_stable():
    g = tiny_graph(ranks={"blocks.0.mlp.up": 2})
    data = Checkpoint(g, golden_tensors(g)).to_bytes()
    assert hashlib.sha256(data).hexdigest() == GOLDEN_SHA256


# -- surgery ----------------------------------------------------------------

def test_apply_step_targets_and_untouched(toy):
    c = apply_plan_step(toy, PlanStep(1, r_mlp=16))
    assert set(c.graph.ranks) == {f"blocks.{i}.mlp.{s}" for i in range(2)
                                  for s in ("gate", "up", "down")}
    for name in toy.tensors:
        if ".mlp." not in name:
            assert c[name].tobytes() == toy[name].tobytes()
    assert c["blocks.0.mlp.up.w0"].shape == (64, 16)
    assert c["blocks.0.mlp.up.w1"].shape == (16, 256)


def test_apply_same_step_twice_is_noop(toy):
    step = PlanStep(1, r_attn=16, r_mlp=16)
    once = apply_plan_step(toy, step)
    twice = apply_plan_step(once, step)
    for name in once.graph.ranks:
        a = once[name + ".w0"] @ once[name + ".w1"]
        b = twice[name + ".w0"] @ twice[name + ".w1"]
        assert np.linalg.norm(a - b) / np.linalg.norm(a) <= 1e-9


def test_mqa_step_leaves_kv(tmp_path):
    c = init_checkpoint(toy_graph(n_kv_heads=1), seed=0)
    after = apply_plan_step(c, PlanStep(1, r_attn=8))
    for i in range(2):
        for s in ("k", "v"):
            name = f"blocks.{i}.attn.{s}"
            assert name not in after.graph.ranks
            assert after[name].tobytes() == c[name].tobytes()
        assert after.graph.ranks[f"blocks.{i}.attn.q"] == 8


def test_rank_too_big_rejected(toy):
    with pytest.raises(PlanValidationError):
        apply_plan_step(toy, PlanStep(1, r_attn=65))


def test_count_params_small_layer():
    g = ModelGraph(vocab=1, d_model=8, n_heads=1, d_ff=8, n_layers=1, max_seq_len=1)
    c = init_checkpoint(g, seed=0)
    assert c["blocks.0.mlp.up"].size == 64
    f = factor_slots(c, {"blocks.0.mlp.up": 2})
    assert f["blocks.0.mlp.up.w0"].size + f["blocks.0.mlp.up.w1"].size == 32
    assert count_params(c) - count_params(f) == 32


@pytest.mark.parametrize("steps", [
    [PlanStep(1, r_mlp=32), PlanStep(2, r_attn=32, r_mlp=16)],
    [PlanStep(1, r_attn=16), PlanStep(2, r_attn=8, r_mlp=8)],
])
def test_count_matches_plan(toy, steps):
    plan = build_plan(toy.graph, steps)
    c = toy
    for s, predicted in zip(steps, plan.predicted_params):
        c = apply_plan_step(c, s)
        assert count_params(c) == predicted == c.graph.param_count()


def test_densify_inverts_full_rank(toy):
    full = {l.name: min(l.d_in, l.d_out) for l in toy.graph.layers()}
    back = densify(factor_slots(toy, full))
    for name in toy.tensors:
        assert np.allclose(back[name], toy[name], atol=1e-10)


# -- forward ----------------------------------------------------------------

def test_forward_shapes(toy):
    tokens = np.arange(10) % 64
    assert forward(toy, tokens).shape == (10, 64)
    assert forward(toy, np.stack([tokens, tokens])).shape == (2, 10, 64)


def test_full_rank_forward_equivalence(toy):
    tokens = np.random.default_rng(0).integers(0, 64, (3, 32))
    full = {l.name: min(l.d_in, l.d_out) for l in toy.graph.layers()}
    fac = factor_slots(toy, full)
    assert np.max(np.abs(forward(fac, tokens) - forward(toy, tokens))) <= 1e-5


def test_zero_model_gives_zero_logits():
    logits = forward(zero_checkpoint(toy_graph()), [1, 2, 3])
    assert np.array_equal(logits, np.zeros((3, 64)))


def test_batch_invariance(toy):
    rng = np.random.default_rng(1)
    batch = rng.integers(0, 64, (4, 20))
    together = forward(toy, batch)
    for i in range(4):
        assert np.max(np.abs(forward(toy, batch[i]) - together[i])) <= 1e-10


def test_causality(toy):
    a = np.array([5, 6, 7, 8, 9])
    b = a.copy()
    b[-1] = 1
    la, lb = forward(toy, a), forward(toy, b)
    assert np.allclose(la[:-1], lb[:-1], atol=1e-12)
    assert not np.allclose(la[-1], lb[-1])


@pytest.mark.parametrize("tokens", [[0, 64], [-1], [[]], np.zeros(33, dtype=int), [0.5, 1.0]])
def test_bad_tokens(toy, tokens):
    with pytest.raises(InputError):
        forward(toy, tokens)


def test_init_is_seeded():
    a, b = init_checkpoint(toy_graph(), seed=5), init_checkpoint(toy_graph(), seed=5)
    assert a.to_bytes("float64") == b.to_bytes("float64")
    assert init_checkpoint(toy_graph(), seed=6).digest() != a.digest()
