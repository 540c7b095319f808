"""The sampling-interval campaign: an untrained baseline plus one trained model per Δ.

Results are cached as JSON keyed by a hash of the full run config, so a
finished campaign can be re-checked without retraining.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from pathlib import Path

from ..inference import ModelPolicy
from ..model import WorldActionModel
from .ablations import ablate_delta
from .config import PATH_KEYS, RunConfig
from .evaluate import run_eval
from .runs import generate_dataset

log = logging.getLogger(__name__)

DELTAS = (0, 2, 4, 8)


def campaign_key(cfg: RunConfig, deltas) -> str:
    # output paths do not affect results, so a moved checkout keeps its cache
    settings = {k: v for k, v in cfg.to_dict().items() if k not in PATH_KEYS}
    blob = json.dumps({"config": settings, "deltas": [int(d) for d in deltas]}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_campaign(cfg: RunConfig, deltas=DELTAS, on_row=None) -> dict:
    """Generate demos, score the untrained model, then train and score every Δ."""
    t0 = time.perf_counter()
    demos = generate_dataset(cfg)
    baseline = run_eval(ModelPolicy(WorldActionModel(cfg.model, seed=cfg.seed)), cfg)
    log.info("untrained baseline %s", baseline)
    rows = ablate_delta(cfg, demos, deltas, on_row=on_row)
    return {
        "key": campaign_key(cfg, deltas),
        "config": cfg.to_dict(),
        "deltas": [int(d) for d in deltas],
        "baseline": baseline,
        "rows": rows,
        "wall_time_s": time.perf_counter() - t0,
    }


def load_campaign(path, cfg: RunConfig, deltas=DELTAS) -> dict | None:
    """Cached result for exactly this config, or None."""
    path = Path(path)
    if not path.exists():
        return None
    result = json.loads(path.read_text())
    return result if result.get("key") == campaign_key(cfg, deltas) else None


def save_campaign(path, result: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")


def row_for(result: dict, delta: int) -> dict:
    return next(r for r in result["rows"] if r["delta"] == delta)
