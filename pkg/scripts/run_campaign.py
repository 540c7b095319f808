"""Run the Δ campaign and cache its result for the acceptance suite.

    python scripts/run_campaign.py [--config configs/campaign.cfg] [--out results/campaign.json] [--force]
"""
import argparse
import logging
import sys
from pathlib import Path

from wam.harness.ablations import DELTA_FIELDS, to_csv
from wam.harness.campaign import DELTAS, load_campaign, run_campaign, save_campaign
from wam.harness.config import load_config
from wam.harness.runs import apply_threads

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=ROOT / "configs" / "campaign.cfg")
    ap.add_argument("--out", default=ROOT / "results" / "campaign.json")
    ap.add_argument("--force", action="store_true", help="rerun even if a matching result is cached")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    apply_threads()
    cfg = load_config(args.config)
    result = None if args.force else load_campaign(args.out, cfg)
    if result is None:
        result = run_campaign(cfg, DELTAS, on_row=lambda r: print(r, flush=True))
        save_campaign(args.out, result)
    print("untrained", result["baseline"])
    print(to_csv(result["rows"], DELTA_FIELDS), end="")
    print(f"wall time {result['wall_time_s'] / 60:.1f} min")
    return 0


if __name__ == "__main__":
    sys.exit(main())
