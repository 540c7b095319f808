"""Decode latency against the number of predicted frames, one JSON line per Δ.

    python scripts/bench_latency.py [--deltas 0,1,2,4,8] [--reps 30]
"""
import argparse

import torch

from wam.inference import bench_latency, bench_record
from wam.model import ModelConfig, WorldActionModel


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--deltas", default="0,1,2,4,8")
    ap.add_argument("--reps", type=int, default=30)
    args = ap.parse_args()
    torch.set_num_threads(1)
    for delta in (int(d) for d in args.deltas.split(",")):
        cfg = ModelConfig(delta=delta)
        report = bench_latency(WorldActionModel(cfg, seed=0), repetitions=args.reps)
        print(bench_record({"delta": delta, "K": cfg.K, **report}), flush=True)


if __name__ == "__main__":
    main()
