"""``dualrr`` command line: train, eval, infer, simulate, bench-latency, verify-theory."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
ABLATIONS = ("no_kd", "grpo_mode", "no_rank_weight", "no_batch_decouple")

log = logging.getLogger("dualrr")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _ablations(text: str) -> list[str]:
    names = [s.strip() for s in text.split(",") if s.strip()]
    bad = [n for n in names if n not in ABLATIONS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown ablation(s) {bad}; choose from {list(ABLATIONS)}")
    return names


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dualrr", description="Teacher/student generative reranking toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, steps=True):
        sp.add_argument("--config", type=Path, help="flat key=value config file")
        sp.add_argument("--seed", type=_u64)
        if steps:
            sp.add_argument("--steps", type=int)
        return sp

    t = common(sub.add_parser("train", help="run the streaming training loop"))
    t.add_argument("--out", type=Path, default=Path("runs/train"))
    t.add_argument("--checkpoint", type=Path, help="resume from this checkpoint")
    t.add_argument("--mode", choices=("ldro", "grpo"))
    t.add_argument("--ablate", type=_ablations, default=[])

    e = common(sub.add_parser("eval", help="metrics for a checkpoint"), steps=False)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--log", type=Path, help="JSONL interaction log (default: held-out simulated records)")
    e.add_argument("--out", type=Path, help="write the MetricReport JSON here instead of stdout")

    i = sub.add_parser("infer", help="Best-of-N serving over JSONL requests")
    i.add_argument("--checkpoint", type=Path, required=True)
    i.add_argument("--input", type=Path, help="JSONL requests (default stdin)")
    i.add_argument("--out", type=Path, help="JSONL results (default stdout)")
    i.add_argument("--seed", type=_u64, help="override every request's seed")

    s = common(sub.add_parser("simulate", help="emit a simulated interaction log"))
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--batch", type=int, default=None)

    b = sub.add_parser("bench-latency", help="teacher greedy decode vs student serve")
    b.add_argument("--trials", type=int, default=1000)
    b.add_argument("--d-model", type=int, default=256)
    b.add_argument("--l-out", type=int, default=10)
    b.add_argument("--n-cand", type=int, default=30)
    b.add_argument("--samples", type=int, default=8)
    b.add_argument("--seed", type=_u64, default=0)
    b.add_argument("--checkpoint", type=Path)
    b.add_argument("--out", type=Path, help="also write the JSON report here")

    v = sub.add_parser("verify-theory", help="exact checks of the flip bound and CMI decay")
    v.add_argument("--trials", type=int, default=1_000_000)
    v.add_argument("--seed", type=_u64, default=0)
    v.add_argument("--no-grid", action="store_true")
    v.add_argument("--out", type=Path, help="also write the JSON report here")
    return p


def _train_config(args):
    from .trainloop import TrainConfig, load_config

    cfg = load_config(args.config) if args.config else TrainConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        changes["total_steps"] = args.steps
    if getattr(args, "mode", None):
        changes["grpo_mode"] = args.mode == "grpo"
    for name in getattr(args, "ablate", []):
        changes[name] = True
    return cfg.replace(**changes)


def cmd_train(args) -> int:
    from .trainloop import format_config, run

    cfg = _train_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.txt").write_text(format_config(cfg), encoding="utf-8")
    state = run(cfg, args.out, resume_from=args.checkpoint)
    print(json.dumps({"steps": state.step, "out": str(args.out)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import MetricReport, auc, mean_rfr, ptar_from_logits
    from .rewards import batch_ndcg
    from .sampler import masked_argmax_fill
    from .streamsim import RecordBatch, StreamEnv, ingest_log
    from .trainloop import evaluate, load_state

    state = load_state(args.checkpoint)
    if args.config or args.seed is not None:
        state.cfg = _train_config(args)
    env = StreamEnv(state.cfg.env_config())
    if args.log:
        batch = RecordBatch.from_records(list(ingest_log(args.log)))
        window = str(args.log)
    else:
        batch = env.eval_batch(state.cfg.eval_size)
        window = "heldout"
    n = len(batch)
    report = MetricReport()
    model = state.model
    with torch.no_grad():
        enc = model.encoder(batch.ctx, batch.feats)
        t_logits = model.teacher.forced(enc, batch.exposed)
        cube = model.student(enc)
    report.add("ptar", ptar_from_logits(t_logits, cube, batch.exposed), n * batch.exposed.shape[1], window)
    report.add("rfr", mean_rfr(t_logits[:, 0], cube[:, 0]), n, window)
    slates = masked_argmax_fill(cube, cube.shape[1])
    report.add("ndcg", float(batch_ndcg(slates.unsqueeze(1), batch.relevance, slates.shape[1]).mean()), n, window)
    exposed_scores = torch.gather(t_logits[:, 0], 1, batch.exposed)
    shown = batch.exposure.bool()
    labels = batch.clicks[shown].numpy()
    if 0 < labels.sum() < labels.size:
        report.add("auc_click", auc(exposed_scores[shown].numpy(), labels), int(labels.size), window)
    if not args.log:
        extra = evaluate(state, batch, env)
        if "eval/oracle_ratio" in extra:
            report.add("oracle_ratio", extra["eval/oracle_ratio"], n, window)
    text = report.to_json()
    if args.out:
        args.out.write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_infer(args) -> int:
    from .serving import ServeRequest, serve
    from .trainloop import load_state

    state = load_state(args.checkpoint)
    src = open(args.input, encoding="utf-8") if args.input else sys.stdin
    dst = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for lineno, line in enumerate(src, start=1):
            if not line.strip():
                continue
            try:
                req = ServeRequest.from_json(json.loads(line))
            except (ValueError, TypeError) as exc:
                raise ValueError(f"request line {lineno}: {exc}") from None
            if args.seed is not None:
                req.seed = args.seed
            res = serve(req, state.model, state.reward_net, state.cfg.alpha)
            dst.write(json.dumps(res.to_json(req.cands)) + "\n")
    finally:
        if args.input:
            src.close()
        if args.out:
            dst.close()
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .streamsim import StreamEnv, write_log

    cfg = _train_config(args)
    env = StreamEnv(cfg.env_config())
    B = args.batch or cfg.batch_size
    steps = cfg.total_steps
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text("", encoding="utf-8")
    for step in range(steps):
        write_log(args.out, env.next_batch(step, B).records(), append=True)
    print(json.dumps({"records": steps * B, "out": str(args.out)}))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .models import ModelConfig, RerankModel
    from .rewards import RewardNet
    from .serving import bench_decoding
    from .trainloop import load_state

    if args.checkpoint:
        state = load_state(args.checkpoint)
        model, net = state.model, state.reward_net
    else:
        if args.l_out > args.n_cand:
            raise ValueError("--l-out must not exceed --n-cand")
        mc = ModelConfig(n_cand=args.n_cand, l_out=args.l_out, d_model=args.d_model, d_ffn=args.d_model)
        model = RerankModel(mc, seed=args.seed)
        net = RewardNet(mc.d_ctx, mc.d_item, mc.l_out, seed=args.seed)
    report = bench_decoding(model, net, trials=args.trials, n=args.samples, seed=args.seed)
    print(report.to_text())
    if args.out:
        args.out.write_text(report.to_json() + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_verify_theory(args) -> int:
    from .theory import CMI_TOL, cmi_sweep, verify_flip_bound

    report = verify_flip_bound(trials=args.trials, seed=args.seed, grid_resolution=None if args.no_grid else 0.02)
    sweep = cmi_sweep(seed=args.seed)
    cmi = [c for _, c in sweep]
    monotone = all(b <= a + CMI_TOL for a, b in zip(cmi, cmi[1:]))
    print(report.to_text())
    print()
    print("CMI sweep (gamma -> nats): " + ", ".join(f"{g:g}: {c:.3e}" for g, c in sweep))
    if args.out:
        out = json.loads(report.to_json())
        out["cmi_sweep"] = sweep
        out["cmi_monotone"] = monotone
        args.out.write_text(json.dumps(out, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK if report.ok and monotone else EXIT_RUNTIME


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "simulate": cmd_simulate,
    "bench-latency": cmd_bench,
    "verify-theory": cmd_verify_theory,
}


def main(argv=None) -> int:
    level = os.environ.get("DUALRR_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_INVALID
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, TypeError, KeyError) as exc:
        print(f"dualrr: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"dualrr: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # runtime failure: divergence, I/O, ...
        print(f"dualrr: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
