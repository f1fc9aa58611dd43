"""Command-line pipeline: init, plan, apply, train, eval, run, bench, report, verify.

Exit codes: 0 success, 1 runtime error, 2 validation error.
"""

import argparse
import hashlib
import json
import logging
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import PLRDError, PlanValidationError, ValidationError
from .graph import ModelGraph, desk_graph, toy_graph
from .manifest import (
    chain_problems,
    load_manifest,
    new_manifest,
    render_csv,
    render_table,
    save_manifest,
    verify_manifest,
)
from .model import (
    apply_plan_step,
    count_params,
    densify,
    file_digest,
    forward,
    init_checkpoint,
    load,
    save,
)
from .planner import (
    PlanStep,
    build_plan,
    flops_estimate,
    load_plan,
    rank_for_budget,
    save_plan,
    steps_from_schedule,
)
from .trainer import TrainConfig, evaluate, make_corpus, train

log = logging.getLogger("plrd")

OUTPUT_ROOT_ENV = "PLRD_OUTPUT_ROOT"
PRESETS = {"toy": toy_graph, "desk": desk_graph}


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except ValueError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc


def _load_graph(args) -> ModelGraph:
    if getattr(args, "ckpt", None):
        return load(args.ckpt).graph
    if getattr(args, "graph", None):
        d = _read_json(args.graph)
        return ModelGraph.from_dict(d.get("graph", d))
    raise ValidationError("need --graph or --ckpt")


def _load_config(path, seed, graph) -> TrainConfig:
    """Config file over recipe defaults; the sequence length defaults to the
    model context when that is shorter than the recipe's."""
    d = _read_json(path) if path else {}
    if seed is not None:
        d["seed"] = seed
    d.setdefault("max_seq_len", min(TrainConfig.max_seq_len, graph.max_seq_len))
    return TrainConfig.from_dict(d)


def _corpus(args, graph):
    vocab = min(graph.vocab, 256)
    seed = args.corpus_seed if args.corpus_seed is not None else (args.seed or 0)
    return make_corpus(seed, args.corpus_tokens, vocab_size=vocab), {
        "seed": seed, "tokens": args.corpus_tokens, "vocab": vocab,
    }


def _emit(record):
    sys.stdout.write(json.dumps(record, sort_keys=True) + "\n")


def parse_steps(text):
    """``"r_mlp=32; r_attn=32,r_mlp=16"`` -> PlanSteps (``NA`` leaves a kind untouched)."""
    steps = []
    for i, chunk in enumerate([c for c in text.split(";") if c.strip()], start=1):
        kw = {}
        for item in chunk.split(","):
            key, _, value = item.partition("=")
            key, value = key.strip(), value.strip()
            if key not in ("r_attn", "r_mlp", "token_budget"):
                raise ValidationError(f"unknown step key {key!r}")
            kw[key] = None if value.upper() == "NA" else int(value)
        steps.append(PlanStep(step_index=i, **kw))
    return steps


# -- commands -----------------------------------------------------------------


def cmd_init(args):
    graph = PRESETS[args.preset]() if args.preset else _load_graph(args)
    ckpt = init_checkpoint(graph, seed=args.seed or 0)
    digest = save(ckpt, args.out, dtype=args.dtype)
    if args.graph_out:
        Path(args.graph_out).write_text(json.dumps(graph.to_dict(), indent=2) + "\n")
    _emit({"checkpoint": str(args.out), "hash": digest, "params": count_params(ckpt)})
    return 0


def cmd_plan(args):
    graph = _load_graph(args)
    if args.steps:
        steps = parse_steps(args.steps)
    elif args.schedule:
        steps = steps_from_schedule(_read_json(args.schedule), graph.d_model)
    elif args.budget is not None:
        steps = [_budget_step(graph, args.budget, args.kinds)]
    else:
        raise ValidationError("need --steps, --schedule or --budget")
    plan = build_plan(graph, steps)
    if args.out:
        save_plan(plan, args.out)
    print(f"plan {plan.digest()[:12]}: {len(plan.steps)} steps, "
          f"initial params {plan.initial_params}")
    for i, (s, p) in enumerate(zip(plan.steps, plan.predicted_params), start=1):
        stats = flops_estimate(plan.graph_after(i))
        d = s.describe()
        print(f"  step {s.step_index}: attention={d['attention']} mlp={d['mlp']} "
              f"params={p} CR={float(stats.aggregate_cr):.4f}")
    for note in plan.notes:
        print(f"  note: {note}")
    return 0


def _budget_step(graph, budget, kinds):
    kinds = {k.strip() for k in kinds.split(",")}
    r = {}
    for layer in graph.layers():
        if not layer.compressible:
            continue
        kind = "attn" if layer.module_kind.is_attention else "mlp"
        if kind not in kinds:
            continue
        rank = rank_for_budget(layer.d_in, layer.d_out, budget)
        r[kind] = min(r.get(kind, rank), rank)
    if not r:
        raise PlanValidationError("budget plan targets no layers")
    return PlanStep(1, r_attn=r.get("attn"), r_mlp=r.get("mlp"))


def cmd_apply(args):
    ckpt = load(args.ckpt)
    plan = load_plan(args.plan)
    if not 1 <= args.step <= len(plan.steps):
        raise ValidationError(f"plan has steps 1..{len(plan.steps)}")
    out = apply_plan_step(ckpt, plan.steps[args.step - 1])
    digest = save(out, args.out, dtype=args.dtype)
    _emit({"checkpoint": str(args.out), "hash": digest, "params": count_params(out)})
    return 0


def cmd_train(args):
    ckpt = load(args.ckpt)
    cfg = _load_config(args.config, args.seed, ckpt.graph)
    corpus, _ = _corpus(args, ckpt.graph)
    out, trace = train(ckpt, cfg, corpus)
    digest = save(out, args.out, dtype=args.dtype)
    for rec in trace:
        _emit({"kind": "train", **rec})
    _emit({"kind": "checkpoint", "path": str(args.out), "hash": digest})
    return 0


def cmd_eval(args):
    ckpt = load(args.ckpt)
    corpus, _ = _corpus(args, ckpt.graph)
    report = evaluate(ckpt, corpus, max_seq_len=args.seq_len)
    _emit({"kind": "eval", "checkpoint": str(args.ckpt), **report.to_dict()})
    return 0


def _run_id(input_hash, plan, cfg, args):
    core = json.dumps({
        "input": input_hash, "plan": plan.digest(), "config": cfg.to_dict(),
        "no_train": args.no_train, "corpus_seed": args.corpus_seed,
        "corpus_tokens": args.corpus_tokens, "dtype": args.dtype,
    }, sort_keys=True)
    return hashlib.sha256(core.encode()).hexdigest()[:12]


def cmd_run(args):
    input_hash = file_digest(args.ckpt)
    ckpt = load(args.ckpt)
    plan = load_plan(args.plan)
    if plan.graph != ckpt.graph:
        raise PlanValidationError("plan was built for a different graph than the checkpoint")
    cfg = _load_config(args.config, args.seed, ckpt.graph)
    run_id = _run_id(input_hash, plan, cfg, args)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "plrd-runs"))
    out_dir = Path(args.out_dir) if args.out_dir else root / f"run-{run_id}"
    out_dir.mkdir(parents=True, exist_ok=True)
    mpath = out_dir / "manifest.json"

    manifest = None
    if mpath.exists():
        old = load_manifest(mpath)
        if old.get("run_id") == run_id:
            manifest = old
        else:
            log.warning("existing manifest belongs to run %s; starting over", old.get("run_id"))
    if manifest is None:
        manifest = new_manifest(
            run_id=run_id, tool_version=__version__, input_checkpoint=str(args.ckpt),
            input_checkpoint_hash=input_hash, plan_hash=plan.digest(),
            train_config=cfg.to_dict(), no_train=bool(args.no_train), dtype=args.dtype,
        )

    # keep the longest prefix of step records that still verifies
    done = []
    parent = input_hash
    for rec in manifest["steps"]:
        if chain_problems({"input_checkpoint_hash": parent, "steps": [rec]}, out_dir):
            break
        done.append(rec)
        parent = rec["checkpoint_hash"]
    manifest["steps"] = done
    if done:
        ckpt = load(out_dir / done[-1]["checkpoint"])

    corpus, corpus_info = None, None
    if not args.no_train or args.eval:
        corpus, corpus_info = _corpus(args, ckpt.graph)
        manifest["corpus"] = corpus_info

    stop = len(plan.steps) if args.max_steps is None else min(args.max_steps, len(plan.steps))
    offset = cfg.data_offset
    for rec in done:
        offset += rec.get("windows", 0)
        log.info("step %d: up to date (hash %s)", rec["step"], rec["checkpoint_hash"][:12])
    for k in range(len(done) + 1, stop + 1):
        step = plan.steps[k - 1]
        t0 = time.perf_counter()
        ckpt = apply_plan_step(ckpt, step)
        tokens, windows = 0, 0
        if not args.no_train:
            budget = step.token_budget or cfg.token_budget
            step_cfg = TrainConfig.from_dict({**cfg.to_dict(), "token_budget": budget,
                                              "data_offset": offset})
            windows = (budget // cfg.max_seq_len) // cfg.batch_size * cfg.batch_size
            ckpt, trace = train(ckpt, step_cfg, corpus)
            tokens = trace[-1]["tokens"] if trace else 0
            offset += windows
            with open(out_dir / f"step_{k}.trace.jsonl", "w") as fh:
                for rec in trace:
                    fh.write(json.dumps({"kind": "train", "run_step": k, **rec}, sort_keys=True) + "\n")
        name = f"step_{k}.plrd"
        digest = save(ckpt, out_dir / name, dtype=args.dtype)
        ckpt = load(out_dir / name)
        params = count_params(ckpt)
        if params != plan.predicted_params[k - 1]:
            raise PLRDError(
                f"step {k}: measured {params} params, plan predicted {plan.predicted_params[k - 1]}"
            )
        record = {
            "step": k, "r_attn": step.r_attn, "r_mlp": step.r_mlp, "params": params,
            "cr": float(flops_estimate(ckpt.graph).aggregate_cr), "tokens": tokens,
            "windows": windows, "parent_hash": parent, "checkpoint": name,
            "checkpoint_hash": digest, "wall_time": round(time.perf_counter() - t0, 3),
        }
        if corpus is not None:
            record["eval"] = evaluate(ckpt, corpus, max_seq_len=cfg.max_seq_len).to_dict()
        manifest["steps"].append(record)
        save_manifest(manifest, mpath)
        parent = digest
        log.info("step %d: params=%d CR=%.4f", k, params, record["cr"])
    save_manifest(manifest, mpath)
    _emit({"manifest": str(mpath), "run_id": run_id, "steps": len(manifest["steps"])})
    return 0


def cmd_bench(args):
    ckpt = load(args.ckpt)
    graph = ckpt.graph
    seq = args.seq_len or graph.max_seq_len
    rng = np.random.default_rng(args.seed or 0)
    tokens = rng.integers(0, graph.vocab, size=(args.batch, seq))

    def timed(c):
        forward(c, tokens)  # warmup, discarded
        times = []
        for _ in range(args.reps):
            t0 = time.perf_counter()
            forward(c, tokens)
            times.append(time.perf_counter() - t0)
        return statistics.median(times)

    stats = flops_estimate(graph)
    report = {"kind": "bench", "checkpoint": str(args.ckpt), "reps": args.reps,
              "batch": args.batch, "seq_len": seq, **stats.to_dict()}
    if not args.no_time:
        report["median_seconds"] = timed(ckpt)
        if graph.ranks:
            report["median_seconds_dense"] = timed(densify(ckpt))
    if not args.per_layer:
        report.pop("layers")
    _emit(report)
    return 0


def cmd_report(args):
    m = load_manifest(args.manifest)
    text = render_csv(m)
    if args.csv:
        Path(args.csv).write_text(text)
    else:
        sys.stdout.write(text)
    sys.stderr.write(render_table(m))
    return 0


def cmd_verify(args):
    m = verify_manifest(args.manifest)
    _emit({"manifest": str(args.manifest), "steps": len(m["steps"]), "chain": "ok"})
    return 0


# -- parser -------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="plrd", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"plrd {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, corpus=False, dtype=False):
        sp.add_argument("--seed", type=int, default=None)
        if corpus:
            sp.add_argument("--corpus-seed", type=int, default=None)
            sp.add_argument("--corpus-tokens", type=int, default=200_000)
        if dtype:
            sp.add_argument("--dtype", choices=["float32", "float64"], default="float32")

    sp = sub.add_parser("init", help="write a randomly initialized checkpoint")
    sp.add_argument("--preset", choices=sorted(PRESETS))
    sp.add_argument("--graph")
    sp.add_argument("--graph-out")
    sp.add_argument("--out", required=True)
    common(sp, dtype=True)
    sp.set_defaults(fn=cmd_init)

    sp = sub.add_parser("plan", help="validate a rank schedule and predict its size")
    sp.add_argument("--graph")
    sp.add_argument("--ckpt")
    sp.add_argument("--steps", help='e.g. "r_mlp=32; r_attn=32,r_mlp=16"')
    sp.add_argument("--schedule", help="schedule file with ranks as fractions of d_model")
    sp.add_argument("--budget", type=int, help="max parameters per factored matrix")
    sp.add_argument("--kinds", default="attn,mlp")
    sp.add_argument("--out")
    common(sp)
    sp.set_defaults(fn=cmd_plan)

    sp = sub.add_parser("apply", help="apply one plan step to a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--plan", required=True)
    sp.add_argument("--step", type=int, required=True)
    sp.add_argument("--out", required=True)
    common(sp, dtype=True)
    sp.set_defaults(fn=cmd_apply)

    sp = sub.add_parser("train", help="recovery-train a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    common(sp, corpus=True, dtype=True)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="held-out cross-entropy and perplexity")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--seq-len", type=int, default=None)
    common(sp, corpus=True)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("run", help="apply and train every plan step, writing a manifest")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--plan", required=True)
    sp.add_argument("--config")
    sp.add_argument("--out-dir")
    sp.add_argument("--no-train", action="store_true")
    sp.add_argument("--eval", action="store_true", help="evaluate even with --no-train")
    sp.add_argument("--max-steps", type=int, default=None)
    common(sp, corpus=True, dtype=True)
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("bench", help="forward timing beside analytic FLOPs")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--reps", type=int, default=10)
    sp.add_argument("--batch", type=int, default=1)
    sp.add_argument("--seq-len", type=int, default=None)
    sp.add_argument("--no-time", action="store_true")
    sp.add_argument("--per-layer", action="store_true")
    common(sp)
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("report", help="CSV and table from a run manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--csv")
    sp.set_defaults(fn=cmd_report)

    sp = sub.add_parser("verify", help="re-hash every checkpoint in a manifest")
    sp.add_argument("--manifest", required=True)
    sp.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.handlers = [handler]
    log.setLevel(logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.fn(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (PLRDError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
