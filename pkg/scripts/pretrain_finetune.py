"""Video-only pretraining followed by joint training from the pretrained weights.

    python scripts/pretrain_finetune.py --workdir runs/pre [--pretrain-steps 1000] [--train-steps 1000]
"""
import argparse
from pathlib import Path

from wam.harness import cli


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", type=Path, required=True)
    ap.add_argument("--pretrain-steps", type=int, default=1000)
    ap.add_argument("--train-steps", type=int, default=1000)
    ap.add_argument("--demos", type=int, default=200)
    args = ap.parse_args()
    args.workdir.mkdir(parents=True, exist_ok=True)
    cfg = args.workdir / "run.cfg"
    cfg.write_text(f"n_demos = {args.demos}\nlr_init = 1e-3\nlr_final = 1e-5\neval_episodes = 100\n"
                   "dataset = data.wamd\ncheckpoint = model.wamc\nmetrics = metrics\n")
    base = ["--config", str(cfg), "-v"]
    pre = str(args.workdir / "pretrained.wamc")
    for argv in (
        ["gen-data", *base],
        ["pretrain", *base, "--steps", str(args.pretrain_steps), "--out", pre],
        ["train", *base, "--steps", str(args.train_steps), "--init", pre],
        ["eval", *base],
    ):
        code = cli.main(argv)
        if code:
            return code
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
