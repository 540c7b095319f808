"""Command-line entry point: ``python -m wam <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .. import tokens as tk
from ..inference import ExpertPolicy, ModelPolicy, RandomPolicy, bench_record, dump_trace, rollout
from ..model import WorldActionModel
from .ablations import DELTA_FIELDS, MASK_FIELDS, ablate_delta, ablate_mask, latency_table, to_csv
from .config import RunConfig, load_config
from .evaluate import run_eval
from .formats import read_dataset, write_dataset
from .runs import apply_threads, generate_dataset, load_model, metrics_file, train

log = logging.getLogger("wam")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wam", description="World-action model toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help, config_required=True):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", type=Path, required=config_required, help="key = value run config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", type=Path, help="output path")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = add("gen-data", "generate expert demonstrations")
    p.add_argument("--n", type=int, help="number of trajectories")

    for name, help in (("pretrain", "video-only flow matching"), ("train", "joint training")):
        p = add(name, help)
        p.add_argument("--steps", type=int)
        p.add_argument("--init", type=Path, help="start from this checkpoint's parameters")
        p.add_argument("--resume", type=Path, help="continue a run from its checkpoint and optimizer state")
        p.add_argument("--mask-mode", choices=("causal", "full"))
        if name == "train":
            p.add_argument("--mode", choices=("joint", "pretrain-video", "action-only"))

    p = add("eval", "closed-loop success rate")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--policy", choices=("model", "untrained", "expert", "random"), default="model")
    p.add_argument("--n", type=int, help="number of episodes")

    p = add("rollout", "one episode, optional PPM frames")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--policy", choices=("model", "untrained", "expert", "random"), default="model")

    p = add("bench", "decode latency")
    p.add_argument("--delta", type=int)
    p.add_argument("--p", type=int)
    p.add_argument("--reps", type=int, default=30)

    p = add("inspect-mask", "print the block attention table", config_required=False)
    p.add_argument("--p", type=int)
    p.add_argument("--delta", type=int)
    p.add_argument("--mask-mode", choices=("causal", "full"))

    p = add("ablate-delta", "train and evaluate one model per sampling interval")
    p.add_argument("--deltas", default="0,2,4,8")
    p.add_argument("--steps", type=int)

    p = add("ablate-mask", "causal vs full attention mask")
    p.add_argument("--steps", type=int, default=0, help="train each arm this long (0: leakage check only)")
    return ap


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    for key in ("steps", "mode"):
        if getattr(args, key, None) is not None:
            over[key] = getattr(args, key)
    if over:
        cfg = RunConfig(**{**{f: getattr(cfg, f) for f in cfg.__dataclass_fields__}, **over})
    model_over = {}
    for key, field in (("mask_mode", "mask_mode"), ("p", "p"), ("delta", "delta")):
        if getattr(args, key, None) is not None:
            model_over[field] = getattr(args, key)
    return cfg.with_model(**model_over) if model_over else cfg


def _dataset(cfg: RunConfig):
    if not cfg.dataset.exists():
        raise FileNotFoundError(f"dataset {cfg.dataset} not found; run gen-data first")
    return read_dataset(cfg.dataset)


def _policy(args, cfg: RunConfig):
    if args.policy == "expert":
        return ExpertPolicy(cfg.model.p)
    if args.policy == "random":
        return RandomPolicy(cfg.model.p)
    if args.policy == "untrained":
        return ModelPolicy(WorldActionModel(cfg.model, seed=cfg.seed))
    return ModelPolicy(load_model(args.checkpoint or cfg.checkpoint, expect=cfg.model))


def cmd_gen_data(args, cfg):
    n = args.n if args.n is not None else cfg.n_demos
    trajs = generate_dataset(cfg, n)
    out = args.out or cfg.dataset
    size = write_dataset(trajs, out)
    print(f"wrote {n} trajectories ({sum(t.success for t in trajs)} successful, {size} bytes) to {out}")


def cmd_train(args, cfg, mode):
    trajs = _dataset(cfg)
    init = load_model(args.init) if args.init else None
    if init is not None and init.config != cfg.model:
        raise ValueError("--init checkpoint config differs from the run config")
    out = args.out or cfg.checkpoint
    model, opt, records = train(cfg, trajs, mode=mode, init=init, resume=args.resume,
                                metrics_path=metrics_file(cfg, mode), checkpoint_path=out)
    if records:
        first, last = records[0], records[-1]
        print(f"{mode}: steps {first['step']}..{last['step']}  L_video {first['L_video']:.4f} -> {last['L_video']:.4f}"
              f"  L_action {first['L_action']:.4f} -> {last['L_action']:.4f}")
    print(f"checkpoint step {opt.step} written to {out}")


def cmd_eval(args, cfg):
    if args.n is not None:
        cfg = RunConfig(**{**{f: getattr(cfg, f) for f in cfg.__dataclass_fields__}, "eval_episodes": args.n})
    out = args.out or Path(f"{cfg.metrics}.eval-{args.policy}")
    metrics = run_eval(_policy(args, cfg), cfg, out)
    print(json.dumps(metrics, sort_keys=True))


def cmd_rollout(args, cfg):
    ok, score, trace = rollout(_policy(args, cfg), cfg.seed, max_steps=cfg.max_episode_steps, horizon=cfg.execute_horizon)
    print(f"seed {cfg.seed}: success={ok} score={score:.2f} steps={len(trace) - 1}")
    if args.out:
        paths = dump_trace(trace, args.out, cfg.model.image_h, cfg.model.image_w)
        print(f"{len(paths)} frames written to {args.out}")


def cmd_bench(args, cfg):
    line = bench_record(latency_table(cfg, args.reps))
    print(line)
    if args.out:
        with open(args.out, "a") as fh:
            fh.write(line + "\n")


def cmd_inspect_mask(args, cfg):
    m = cfg.model
    mask = tk.build_block_mask(m.layout, m.mask_mode, m.action_self_attention)
    lay = m.layout
    print(f"p={m.p} delta={m.delta} K={m.K} mask={m.mask_mode}  n_o={lay.n_o} n_s={lay.n_s} n_a={lay.n_a} n_f={lay.n_f}")
    print(tk.format_block_table(mask))


def _emit(text: str, out):
    print(text, end="")
    if out:
        Path(out).write_text(text)


def cmd_ablate_delta(args, cfg):
    deltas = [int(d) for d in args.deltas.split(",") if d.strip()]
    if not deltas or min(deltas) < 0:
        raise ValueError("--deltas needs a comma-separated list of non-negative integers")
    rows = ablate_delta(cfg, _dataset(cfg), deltas, on_row=lambda r: log.info("delta row %s", r))
    _emit(to_csv(rows, DELTA_FIELDS), args.out)


def cmd_ablate_mask(args, cfg):
    trajs = _dataset(cfg) if cfg.steps > 0 else None
    rows = ablate_mask(cfg, trajs)
    _emit(to_csv(rows, MASK_FIELDS), args.out)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        apply_threads()
        cfg = _config(args)
        c = args.command
        if c == "gen-data":
            cmd_gen_data(args, cfg)
        elif c == "pretrain":
            cmd_train(args, cfg, "pretrain-video")
        elif c == "train":
            cmd_train(args, cfg, cfg.mode)
        elif c == "eval":
            cmd_eval(args, cfg)
        elif c == "rollout":
            cmd_rollout(args, cfg)
        elif c == "bench":
            cmd_bench(args, cfg)
        elif c == "inspect-mask":
            cmd_inspect_mask(args, cfg)
        elif c == "ablate-delta":
            cmd_ablate_delta(args, cfg)
        elif c == "ablate-mask":
            cmd_ablate_mask(args, cfg)
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0
